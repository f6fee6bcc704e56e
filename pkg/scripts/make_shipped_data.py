"""Regenerate the files under data/.

    python3 scripts/make_shipped_data.py [--skip-grid]

The 9th-order grids take about 40 minutes on one core; they are cached
under data/grids by parameter hash and reused when present.
"""
import argparse
import logging
import os

import numpy as np

from rydquench.fitting import CorrelatorScan, build_nlce_grid, noise_scale
from rydquench.lattice import LatticeGeometry, InteractionModel
from rydquench.model import pulse_hold_time, sudden_schedule
from rydquench.observables import SnapshotSet

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "data")
GRIDS = os.path.join(DATA, "grids")

OMEGA = 4.05
RISE = 0.01
DETUNINGS = np.arange(-10.0, 9.0, 2.0)
FIT_C6 = [-7.0, -6.6, -6.2, -5.8, -5.4, -5.0]
TRUE_C6, TRUE_ALPHA = -6.0, 0.89
ORDER = 9


def pulse():
    return sudden_schedule(OMEGA, 0.0, pulse_hold_time(OMEGA, np.pi / 2, RISE, RISE), RISE, RISE)


def grids():
    kw = dict(order=ORDER, geom=LatticeGeometry.with_anisotropy(1, 1),
              interaction=InteractionModel(TRUE_C6), cache_dir=GRIDS)
    truth = build_nlce_grid([TRUE_C6], DETUNINGS, pulse(), **kw)
    fitgrid = build_nlce_grid(FIT_C6, DETUNINGS, pulse(), **kw)
    return truth, fitgrid


def synthetic_scan(truth):
    row = truth.row(TRUE_C6)
    a, n = TRUE_ALPHA, row["mean_n"]
    clean = np.stack([4 * (a * n - (a * n) ** 2), a ** 2 * row["c10"], a ** 2 * row["c01"]])
    sig = noise_scale(clean, 0.05)
    scan = CorrelatorScan(DETUNINGS, *clean, *sig,
                          metadata={"generator": "noiseless 9th-order expansion", "c6": TRUE_C6,
                                    "alpha": TRUE_ALPHA, "omega_MHz": OMEGA,
                                    "pulse": "area pi/2, 0.01 us linear rise and fall",
                                    "errors": "5% of each channel's largest magnitude"})
    scan.to_csv(os.path.join(DATA, "synthetic_scan.csv"))


def checkerboard(n_shots=1000, size=8):
    yy, xx = np.mgrid[0:size, 0:size]
    a = ((xx + yy) % 2).astype(np.uint8)
    shots = np.stack([a if k % 2 == 0 else 1 - a for k in range(n_shots)])
    snaps = SnapshotSet(shots, np.ones((size, size), bool),
                        {"generator": "alternating perfect checkerboards"})
    snaps.to_csv(os.path.join(DATA, "checkerboard_snapshots.csv"))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--skip-grid", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    os.makedirs(GRIDS, exist_ok=True)
    checkerboard()
    if not args.skip_grid:
        truth, _ = grids()
        synthetic_scan(truth)
