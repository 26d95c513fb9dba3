"""Truncated path signatures of piecewise-linear paths.

The signature of a straight segment with increment v is the tensor
exponential: level k equals v^(tensor k) / k!.  Signatures of consecutive
segments combine via Chen's identity, where the combined level k is the
convolution of the two signatures' levels over all splits i + (k - i) = k.
Iterating segment-by-segment gives the exact signature of the whole
piecewise-linear path: no quadrature, no approximation beyond truncation.

Levels are flattened row-major, so the level-k block has d^k entries and
entry (i1, ..., ik) sits at position i1 * d^(k-1) + ... + ik.  The code is
generic over numpy arrays and autodiff tensors: both support the small op
set used here (slicing, reshape, +, *, /), which is what makes the
signature-based training losses differentiable for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DataError

MAX_COEFFS = 2_000_000


def level_sizes(dim: int, depth: int) -> list[int]:
    return [dim ** k for k in range(1, depth + 1)]


def sig_length(dim: int, depth: int) -> int:
    """Number of coefficients in levels 1..depth."""
    return sum(level_sizes(dim, depth))


def _check_budget(dim: int, depth: int) -> None:
    if depth < 1:
        raise DataError(f"signature depth must be >= 1, got {depth}")
    if dim < 1:
        raise DataError(f"path dimension must be >= 1, got {dim}")
    if sig_length(dim, depth) > MAX_COEFFS:
        raise DataError(f"signature of dimension {dim} at depth {depth} has "
                        f"{sig_length(dim, depth)} coefficients; refusing (> {MAX_COEFFS})")


def _outer(a, b, batch_shape: tuple, na: int, nb: int):
    """Flattened tensor product of (..., na) and (..., nb) -> (..., na * nb)."""
    left = a.reshape(batch_shape + (na, 1))
    right = b.reshape(batch_shape + (1, nb))
    return (left * right).reshape(batch_shape + (na * nb,))


def signature_levels(increments, depth: int) -> list:
    """Signature levels 1..depth from segment increments of shape (..., m, d).

    Accepts numpy arrays or autodiff tensors; leading batch axes are carried
    through unchanged, each level coming back as (..., d^k).
    """
    shape = tuple(increments.shape)
    if len(shape) < 2:
        raise DataError(f"increments must have shape (..., m, d), got {shape}")
    m, d = shape[-2], shape[-1]
    batch_shape = shape[:-2]
    _check_budget(d, depth)
    if m < 1:
        raise DataError("need at least one segment")

    levels = None
    for j in range(m):
        delta = increments[..., j, :]
        segment = [delta]
        for k in range(2, depth + 1):
            segment.append(_outer(segment[-1], delta, batch_shape, d ** (k - 1), d) / float(k))
        if levels is None:
            levels = segment
            continue
        combined = []
        for k in range(1, depth + 1):
            acc = levels[k - 1] + segment[k - 1]
            for i in range(1, k):
                acc = acc + _outer(levels[i - 1], segment[k - i - 1],
                                   batch_shape, d ** i, d ** (k - i))
            combined.append(acc)
        levels = combined
    return levels


@dataclass
class SignatureVector:
    """Flattened signature coefficients of one path, levels 1..depth."""

    dim: int
    depth: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expected = sig_length(self.dim, self.depth)
        if self.coeffs.shape != (expected,):
            raise DataError(f"expected {expected} coefficients for dim {self.dim} "
                            f"depth {self.depth}, got shape {self.coeffs.shape}")

    def level(self, k: int) -> np.ndarray:
        """The level-k block, shape (dim^k,)."""
        if not 1 <= k <= self.depth:
            raise DataError(f"level {k} outside 1..{self.depth}")
        sizes = level_sizes(self.dim, self.depth)
        start = sum(sizes[: k - 1])
        return self.coeffs[start : start + sizes[k - 1]]


def signature(path: np.ndarray, depth: int) -> SignatureVector:
    """Truncated signature of a single path of shape (T, d)."""
    path = np.asarray(path, dtype=np.float64)
    if path.ndim != 2 or path.shape[0] < 2:
        raise DataError(f"path must have shape (T >= 2, d), got {path.shape}")
    levels = signature_levels(np.diff(path, axis=0), depth)
    return SignatureVector(dim=path.shape[1], depth=depth,
                           coeffs=np.concatenate(levels))


def batch_signatures(paths: np.ndarray, depth: int) -> np.ndarray:
    """Signatures of a batch (n, T, d) -> coefficient matrix (n, L)."""
    paths = np.asarray(paths, dtype=np.float64)
    if paths.ndim != 3 or paths.shape[1] < 2:
        raise DataError(f"paths must have shape (n, T >= 2, d), got {paths.shape}")
    levels = signature_levels(np.diff(paths, axis=1), depth)
    return np.concatenate(levels, axis=-1)


def expected_signature(paths: np.ndarray, depth: int) -> SignatureVector:
    """Empirical mean signature over a batch of paths (n, T, d)."""
    coeffs = batch_signatures(paths, depth).mean(axis=0)
    return SignatureVector(dim=paths.shape[2], depth=depth, coeffs=coeffs)


def chen_product(a: SignatureVector, b: SignatureVector) -> SignatureVector:
    """Signature of the concatenated path from the two pieces' signatures."""
    if a.dim != b.dim or a.depth != b.depth:
        raise DataError("chen_product needs matching dimension and depth")
    d, depth = a.dim, a.depth
    out = []
    for k in range(1, depth + 1):
        acc = a.level(k) + b.level(k)
        for i in range(1, k):
            acc = acc + _outer(a.level(i), b.level(k - i), (), d ** i, d ** (k - i))
        out.append(acc)
    return SignatureVector(dim=d, depth=depth, coeffs=np.concatenate(out))


def time_augment(paths: np.ndarray) -> np.ndarray:
    """Prepend a uniform time coordinate running 0..1 over the sequence.

    Accepts (T, d) or (n, T, d); the time channel becomes column 0.  Makes
    the signature injective on paths that revisit values.
    """
    paths = np.asarray(paths, dtype=np.float64)
    if paths.ndim == 2:
        t = np.linspace(0.0, 1.0, paths.shape[0])[:, None]
        return np.concatenate([t, paths], axis=1)
    if paths.ndim == 3:
        t = np.broadcast_to(np.linspace(0.0, 1.0, paths.shape[1])[None, :, None],
                            (paths.shape[0], paths.shape[1], 1))
        return np.concatenate([t, paths], axis=2)
    raise DataError(f"time_augment expects (T, d) or (n, T, d), got {paths.shape}")
