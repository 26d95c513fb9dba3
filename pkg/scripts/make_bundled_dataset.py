"""Regenerate the bundled synthetic commodity dataset.

A single 300-business-day path of a 4-dimensional correlated GBM sits in for
proprietary market data so the full pipeline runs out of the box.  Volatility
vector, correlation structure and price levels follow the published estimates
for the four energy products; the quoted correlation matrix is slightly
indefinite (rounded entries), so it is projected to the nearest valid
correlation matrix before simulation.

Run from the repository root:  python3 scripts/make_bundled_dataset.py
"""

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from commodgen.stochastic import GbmParams, nearest_correlation, simulate_gbm
from commodgen import store

LABELS = ["elec", "gas", "oil", "coal"]
SIGMA = np.array([0.44, 0.50, 0.38, 0.25])
S0 = np.array([41.41, 10.34, 370.49, 52.76])
QUOTED_CORR = np.array([
    [1.00, 0.78, 0.62, 0.00],
    [0.78, 1.00, 0.25, 0.82],
    [0.62, 0.25, 1.00, 0.31],
    [0.00, 0.82, 0.31, 1.00],
])
N_DAYS = 300
START = "2020-01-21"
SEED = 20200121


def main():
    corr = nearest_correlation(QUOTED_CORR)
    params = GbmParams(sigma=SIGMA, corr=corr)
    batch = simulate_gbm(params, 1, N_DAYS, S0, seed=SEED, labels=LABELS)
    dates = np.busday_offset(START, np.arange(N_DAYS), roll="forward")
    lines = ["date," + ",".join(LABELS)]
    for i, day in enumerate(dates):
        row = ",".join(repr(float(v)) for v in batch.values[0, i, :])
        lines.append(f"{day},{row}")
    out = pathlib.Path(__file__).resolve().parents[1] / "src" / "commodgen" / "data"
    out.mkdir(parents=True, exist_ok=True)
    target = out / "commodities.csv"
    target.write_text("\n".join(lines) + "\n")
    print(f"wrote {target} ({N_DAYS} rows)")
    print(f"sha256 {store.file_sha256(target)}")
    print("projected correlation (simulated law):")
    np.set_printoptions(precision=4, suppress=True)
    print(corr)


if __name__ == "__main__":
    main()
