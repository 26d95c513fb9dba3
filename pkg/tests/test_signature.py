import math

import numpy as np
import pytest

from commodgen.autodiff import Tensor
from commodgen.dataio import DataError
from commodgen.signature import (SignatureVector, batch_signatures, chen_product,
                                 expected_signature, sig_length, signature,
                                 signature_levels, time_augment)


class TestClosedForms:
    def test_one_dimensional_line(self):
        # 1-d path from 0 to a: level k must be a^k / k!
        a = 1.7
        path = np.linspace(0.0, a, 7)[:, None]
        sig = signature(path, depth=5)
        for k in range(1, 6):
            assert sig.level(k)[0] == pytest.approx(a ** k / math.factorial(k), rel=1e-12)

    def test_two_dim_single_segment_level2(self):
        # increment (1, 2): level 2 = outer(v, v) / 2 = [0.5, 1, 1, 2]
        path = np.array([[0.0, 0.0], [1.0, 2.0]])
        sig = signature(path, depth=2)
        np.testing.assert_allclose(sig.level(1), [1.0, 2.0], atol=1e-15)
        np.testing.assert_allclose(sig.level(2), [0.5, 1.0, 1.0, 2.0], atol=1e-15)

    def test_level1_is_total_increment(self):
        rng = np.random.default_rng(2)
        path = rng.standard_normal((12, 3)).cumsum(axis=0)
        sig = signature(path, depth=3)
        np.testing.assert_allclose(sig.level(1), path[-1] - path[0], atol=1e-12)

    def test_shuffle_relation_level2(self):
        # sym part of level 2 is half the square of level 1
        rng = np.random.default_rng(3)
        path = rng.standard_normal((9, 2)).cumsum(axis=0)
        sig = signature(path, depth=2)
        lvl2 = sig.level(2).reshape(2, 2)
        lvl1 = sig.level(1)
        np.testing.assert_allclose(lvl2 + lvl2.T, np.outer(lvl1, lvl1), atol=1e-12)


class TestChen:
    def test_concatenation_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            left = rng.standard_normal((6, 2)).cumsum(axis=0)
            right = left[-1] + rng.standard_normal((5, 2)).cumsum(axis=0)
            right = np.vstack([left[-1], right])
            full = np.vstack([left, right[1:]])
            combined = chen_product(signature(left, 4), signature(right, 4))
            direct = signature(full, 4)
            np.testing.assert_allclose(combined.coeffs, direct.coeffs, atol=1e-10)

    def test_dimension_mismatch(self):
        a = signature(np.zeros((3, 2)) + np.arange(3)[:, None], 2)
        b = signature(np.arange(3.0)[:, None], 2)
        with pytest.raises(DataError):
            chen_product(a, b)


class TestInvariance:
    def test_reparameterisation(self):
        # same polyline traversed at different speeds: identical signature
        rng = np.random.default_rng(5)
        knots = rng.standard_normal((5, 2)).cumsum(axis=0)

        def sample_at(ts):
            # piecewise-linear interpolation at parameter values ts in [0, 4]
            out = np.empty((len(ts), 2))
            for i, t in enumerate(ts):
                j = min(int(t), 3)
                w = t - j
                out[i] = (1 - w) * knots[j] + w * knots[j + 1]
            return out

        # warped grid must still pass through every knot, otherwise the
        # chords cut corners and trace a genuinely different path
        warped_ts = np.union1d(4 * np.linspace(0, 1, 57) ** 2, [0.0, 1.0, 2.0, 3.0, 4.0])
        uniform = sample_at(np.linspace(0, 4, 41))
        warped = sample_at(warped_ts)
        s1 = signature(uniform, 4)
        s2 = signature(warped, 4)
        np.testing.assert_allclose(s1.coeffs, s2.coeffs, atol=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        path = rng.standard_normal((8, 2)).cumsum(axis=0)
        shifted = path + np.array([5.0, -3.0])
        np.testing.assert_allclose(signature(path, 3).coeffs,
                                   signature(shifted, 3).coeffs, atol=1e-12)


class TestBatchAndGradients:
    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        paths = rng.standard_normal((5, 6, 2)).cumsum(axis=1)
        block = batch_signatures(paths, 3)
        assert block.shape == (5, sig_length(2, 3))
        for i in range(5):
            np.testing.assert_allclose(block[i], signature(paths[i], 3).coeffs, atol=1e-13)
        mean_sig = expected_signature(paths, 3)
        np.testing.assert_allclose(mean_sig.coeffs, block.mean(axis=0), atol=1e-14)

    def test_gradients_through_signature(self):
        rng = np.random.default_rng(8)
        path_vals = rng.standard_normal((5, 2)).cumsum(axis=0)
        weights = rng.standard_normal(sig_length(2, 3))

        def value(arr):
            t = Tensor(arr, requires_grad=True)
            incs = t[1:, :] - t[:-1, :]
            levels = signature_levels(incs, 3)
            from commodgen.autodiff import concat
            coeffs = concat(levels, axis=0)
            return (coeffs * Tensor(weights)).sum(), t

        out, t = value(path_vals)
        out.backward()
        grad = t.grad.copy()

        h = 1e-6
        for idx in [(0, 0), (2, 1), (4, 0)]:
            up = path_vals.copy()
            up[idx] += h
            down = path_vals.copy()
            down[idx] -= h
            fd = (value(up)[0].item() - value(down)[0].item()) / (2 * h)
            assert abs(grad[idx] - fd) < 1e-5

    def test_tensor_and_numpy_agree(self):
        rng = np.random.default_rng(9)
        incs = rng.standard_normal((3, 4, 2))
        np_levels = signature_levels(incs, 3)
        t_levels = signature_levels(Tensor(incs), 3)
        for a, b in zip(np_levels, t_levels):
            np.testing.assert_array_equal(a, b.data)


class TestTimeAugment:
    def test_single_and_batch(self):
        path = np.ones((4, 2))
        aug = time_augment(path)
        assert aug.shape == (4, 3)
        np.testing.assert_allclose(aug[:, 0], [0, 1 / 3, 2 / 3, 1.0])
        batch = time_augment(np.ones((5, 4, 2)))
        assert batch.shape == (5, 4, 3)
        np.testing.assert_allclose(batch[2, :, 0], [0, 1 / 3, 2 / 3, 1.0])

    def test_augmented_signature_separates_loops(self):
        # a path that returns to its start has zero level-1 signature,
        # but the time channel keeps the augmented signature informative
        loop = np.array([[0.0], [1.0], [0.0]])
        plain = signature(loop, 2)
        np.testing.assert_allclose(plain.level(1), [0.0], atol=1e-15)
        aug = signature(time_augment(loop), 2)
        assert np.linalg.norm(aug.coeffs) > 0.5


class TestValidation:
    def test_depth_and_size_guards(self):
        with pytest.raises(DataError):
            signature(np.zeros((3, 2)), depth=0)
        with pytest.raises(DataError, match="refusing"):
            signature(np.zeros((3, 50)), depth=5)
        with pytest.raises(DataError):
            signature(np.zeros((1, 2)), depth=2)

    def test_vector_block_layout(self):
        v = SignatureVector(dim=2, depth=3, coeffs=np.arange(14.0))
        np.testing.assert_array_equal(v.level(1), [0, 1])
        np.testing.assert_array_equal(v.level(2), [2, 3, 4, 5])
        np.testing.assert_array_equal(v.level(3), np.arange(6.0, 14.0))
        with pytest.raises(DataError):
            SignatureVector(dim=2, depth=3, coeffs=np.arange(5.0))
