"""Runtime-scaling benchmark of GSPN scans against softmax and linear attention."""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .attention import linear_attention_causal, softmax_attention
from .propagation import DIRECTIONS, random_gates, scan_all_directions

MECHANISMS = ("gspn-global", "gspn-local", "softmax", "linear")
CSV_HEADER = ("mechanism", "side", "N", "channels", "g", "repeats", "median_seconds")
WARMUP = 2
MIN_REPEATS = 5
# N^2 * d beyond this is treated like an out-of-memory score matrix and skipped
SOFTMAX_WORK_LIMIT = 2**32
SOFTMAX_BLOCK = 1024


@dataclass
class BenchRecord:
    mechanism: str
    side: int
    channels: int
    g: int | None
    repeats: int
    median_seconds: float | None

    @property
    def N(self) -> int:
        return self.side * self.side

    @property
    def skipped(self) -> bool:
        return self.median_seconds is None

    @property
    def throughput(self) -> float | None:
        """Pixels (tokens) per second."""
        if self.skipped or self.median_seconds == 0:
            return None
        return self.N / self.median_seconds

    def row(self) -> list[str]:
        return [self.mechanism, str(self.side), str(self.N), str(self.channels),
                "" if self.g is None else str(self.g), str(self.repeats),
                "skipped" if self.skipped else f"{self.median_seconds:.6e}"]


def time_call(fn, repeats: int = MIN_REPEATS, warmup: int = WARMUP) -> float:
    """Median wall time of ``fn()`` on the monotonic clock, after discarded warm-ups."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _workload(mechanism: str, side: int, channels: int, g: int, rng):
    if mechanism.startswith("gspn"):
        shape = (1, channels, side, side)
        x = rng.standard_normal(shape).astype(np.float32)
        gates = [random_gates(shape, rng).map(lambda a: a.astype(np.float32)) for _ in DIRECTIONS]
        groups = g if mechanism == "gspn-local" else 1
        return lambda: scan_all_directions(x, gates, groups)
    n = side * side
    q, k, v = (rng.standard_normal((n, channels)).astype(np.float32) for _ in range(3))
    if mechanism == "softmax":
        if n * n * channels > SOFTMAX_WORK_LIMIT:
            return None
        return lambda: softmax_attention(q, k, v, block=SOFTMAX_BLOCK)
    return lambda: linear_attention_causal(q, k, v)


def run_bench(mechanisms, sides, channels: int = 1, repeats: int = MIN_REPEATS, g: int = 2,
              seed: int = 0, progress=None) -> list[BenchRecord]:
    unknown = set(mechanisms) - set(MECHANISMS)
    if unknown:
        raise ValueError(f"unknown mechanisms {sorted(unknown)}")
    if any(s < 8 for s in sides):
        raise ValueError("benchmark sides must be >= 8")
    if repeats < MIN_REPEATS:
        raise ValueError(f"need at least {MIN_REPEATS} repeats")
    records = []
    for mech in mechanisms:
        for side in sides:
            fn = _workload(mech, side, channels, g, np.random.default_rng([seed, side]))
            median = None if fn is None else time_call(fn, repeats)
            rec = BenchRecord(mech, side, channels, g if mech == "gspn-local" else
                              (1 if mech == "gspn-global" else None), repeats, median)
            records.append(rec)
            if progress:
                progress(rec)
    return records


def fit_slope(records, mechanism: str) -> float | None:
    """Least-squares slope of log(time) against log(N) over non-skipped records."""
    pts = [(math.log(r.N), math.log(r.median_seconds)) for r in records
           if r.mechanism == mechanism and not r.skipped]
    if len(pts) < 2:
        return None
    xs, ys = zip(*pts)
    return float(np.polyfit(xs, ys, 1)[0])


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [BenchRecord(r["mechanism"], int(r["side"]), int(r["channels"]),
                        int(r["g"]) if r["g"] else None, int(r["repeats"]),
                        None if r["median_seconds"] == "skipped" else float(r["median_seconds"]))
            for r in rows]
