"""Run a 4-direction scan on a small image and check it against the dense affinity.

    python demos/scan_and_oracle.py
"""
import numpy as np

from gspn.oracle import check_row_stochastic_product, dense_scan, line_matrices
from gspn.propagation import DIRECTIONS, ScanConfig, random_gates, scan_forward

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 2, 6, 6))
gates = random_gates(x.shape, rng)

for d in DIRECTIONS:
    for g in (1, 2):
        cfg = ScanConfig(d, g)
        out = scan_forward(x, gates, cfg)
        err = np.abs(out.h - dense_scan(x, gates, cfg)).max()
        print(f"{d.value:>14} g={g}: max |scan - G @ x| = {err:.1e}")

# every partial product of the per-line propagation matrices stays row-stochastic
lines = line_matrices(gates, DIRECTIONS[2])
rep = check_row_stochastic_product(lines)
print(f"row-stochastic chain of {len(lines)} lines: {rep.ok}, max row-sum deviation {rep.max_deviation:.1e}")
