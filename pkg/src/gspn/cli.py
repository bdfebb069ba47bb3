"""``gspn`` command line: verify, bench, heatmap, train-toy.

Exit codes: 0 success, 1 verification (or convergence) failure,
2 training divergence, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import tensor as T
from ._parallel import set_threads
from .bench import MECHANISMS, fit_slope, run_bench, write_csv
from .block import (TOY_GROUPS, TOY_LR, TOY_TASKS, TOY_WARMUP, ToyTask, TrainingDiverged, block_gates,
                    init_params, load_params, merge_weights, train_toy)
from .oracle import MAX_ORACLE_PIXELS, merged_affinity, output_affinity, query_heatmap
from .pgm import to_gray8, write_pgm
from .propagation import DIRECTIONS, ScanConfig
from .verify import FAULTS, format_table, inject_fault, run_suite, write_reproducer

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_DIVERGED = 2
EXIT_USAGE = 64
CONVERGED_RATIO = 0.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{v} is outside the unsigned 64-bit range")
    return v


def _int_list(items) -> list[int]:
    """Accepts ``4,8,16`` as well as ``4 8 16`` (or a mix)."""
    out = []
    for item in items:
        for part in item.split(","):
            if part.strip():
                try:
                    out.append(int(part))
                except ValueError:
                    raise UsageError(f"not an integer: {part!r}")
    if not out:
        raise UsageError("empty list")
    return out


def _pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers H,W, got {text!r}")


# -- commands ----------------------------------------------------------------

def cmd_verify(args) -> int:
    sizes = _int_list(args.sizes) if args.sizes else None
    if sizes and any(s < 1 for s in sizes):
        raise UsageError("grid sides must be >= 1")
    if sizes and max(sizes) ** 2 > MAX_ORACLE_PIXELS:
        raise UsageError(f"grid side {max(sizes)} exceeds the oracle limit of {MAX_ORACLE_PIXELS} pixels")
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            results = run_suite(args.seed, sizes)
    else:
        results = run_suite(args.seed, sizes)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        path = write_reproducer(r, args.repro_dir)
        print(f"reproducer for {r.name}: {path}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} invariant families passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    bad = [m for m in mechanisms if m not in MECHANISMS]
    if bad or not mechanisms:
        raise UsageError(f"unknown mechanisms {bad}; choose from {','.join(MECHANISMS)}")
    sides = _int_list([args.sides])
    if any(s < 8 for s in sides):
        raise UsageError("benchmark sides must be >= 8")
    if args.repeats < 5:
        raise UsageError("--repeats must be >= 5")
    if args.channels < 1 or args.g < 1:
        raise UsageError("--channels and --g must be >= 1")
    if "gspn-local" in mechanisms and args.g > min(sides):
        raise UsageError(f"--g {args.g} exceeds the smallest side {min(sides)}")

    def progress(rec):
        t = "skipped" if rec.skipped else f"{rec.median_seconds:.4g} s"
        print(f"  {rec.mechanism:<12} side {rec.side:>5}  {t}", file=sys.stderr)

    records = run_bench(mechanisms, sides, args.channels, args.repeats, args.g, progress=progress)
    write_csv(records, args.out)
    for m in mechanisms:
        slope = fit_slope(records, m)
        print(f"{m:<12} log-log slope vs N: " + ("n/a (fewer than 2 timed sides)" if slope is None else f"{slope:.3f}"))
    timed = {(r.mechanism, r.side): r.median_seconds for r in records if not r.skipped}
    for side in sides:
        if ("gspn-global", side) in timed and ("gspn-local", side) in timed:
            ratio = timed["gspn-global", side] / timed["gspn-local", side]
            print(f"side {side}: gspn-local (g={args.g}) is {ratio:.2f}x the speed of gspn-global")
    print(f"wrote {args.out}")
    return EXIT_OK


def heatmaps(x, params, query, channel: int = 0, groups: int = 1) -> dict[str, np.ndarray]:
    """Query rows of the four directional affinities and their merge, as ``(H, W)`` maps.

    The merged map weights each direction by the block's merge weight from that
    direction's output of ``channel`` to the merged output of ``channel``.
    """
    gates = block_gates(x, params)
    H, W = x.shape[2:]
    maps = {}
    for d, g in zip(DIRECTIONS, gates):
        maps[d.value] = query_heatmap(output_affinity(g, ScanConfig(d, groups), channel), query, (H, W))
    merged = merged_affinity(gates, merge_weights(params, channel), channel, groups=groups)
    maps["merged"] = query_heatmap(merged, query, (H, W))
    return maps


def cmd_heatmap(args) -> int:
    try:
        x = T.load_file(args.input)
    except (OSError, T.TensorFormatError) as e:
        raise UsageError(f"cannot read {args.input}: {e}")
    B, C, H, W = x.shape
    if B < 1 or C < 1:
        raise UsageError("input tensor has no batch items or channels")
    if H * W > MAX_ORACLE_PIXELS:
        raise UsageError(f"{H}x{W} grid exceeds the oracle limit of {MAX_ORACLE_PIXELS} pixels")
    h, w = args.query
    if not (0 <= h < H and 0 <= w < W):
        raise UsageError(f"query {h},{w} is outside the {H}x{W} grid")
    if not 0 <= args.channel < C:
        raise UsageError(f"--channel {args.channel} is outside 0..{C - 1}")
    if args.params:
        try:
            params = load_params(args.params)
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot load parameters from {args.params}: {e}")
        if params.channels != C:
            raise UsageError(f"parameters expect {params.channels} channels, input has {C}")
    else:
        params = init_params(C, np.random.default_rng(args.random_seed))
    maps = heatmaps(x[:1].astype(np.float64), params, (h, w), args.channel, args.groups)
    for name, m in maps.items():
        path = f"{args.out}-{name}.pgm"
        write_pgm(path, to_gray8(np.abs(m)))
        print(f"{path}  nonzero {np.count_nonzero(m)}/{m.size}  max |a| {np.abs(m).max():.4g}")
    return EXIT_OK


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("step", "loss"))
        for k, loss in enumerate(trace):
            wr.writerow((k, repr(float(loss))))


def cmd_train_toy(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    if not args.lr > 0:
        raise UsageError("--lr must be positive")
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    task = ToyTask(args.task, seed=args.seed)
    if not 1 <= args.groups <= task.height:
        raise UsageError(f"--groups must be in 1..{task.height}")
    try:
        trace, _ = train_toy(task, args.steps, args.lr, seed=args.seed, groups=args.groups,
                              warmup=args.warmup)
    except TrainingDiverged as e:
        write_trace(args.out, e.trace)
        print(f"diverged at step {e.step}", file=sys.stderr)
        return EXIT_DIVERGED
    write_trace(args.out, trace)
    ratio = trace[-1] / trace[0] if trace[0] else 0.0
    ok = ratio <= CONVERGED_RATIO
    print(f"{args.task}: loss {trace[0]:.6g} -> {trace[-1]:.6g} (ratio {ratio:.4f}) "
          f"{'converged' if ok else 'not converged'}")
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gspn", description="2D line-scan propagation tools")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads inside each scan (overrides GSPN_THREADS); never changes results")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--seed", type=_u64, default=0)
    v.add_argument("--sizes", nargs="+", metavar="N", help="grid sides for oracle checks, e.g. 4,8 or 4 8")
    v.add_argument("--repro-dir", default=".", help="where failing cases are written as JSON")
    v.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="runtime scaling benchmark, CSV output")
    b.add_argument("--mechanisms", required=True, help=f"comma list from {','.join(MECHANISMS)}")
    b.add_argument("--sides", required=True, help="comma list of image sides (>= 8)")
    b.add_argument("--channels", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--g", type=int, default=2, help="group count for gspn-local")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    h = sub.add_parser("heatmap", help="per-direction and merged affinity heatmaps as PGM")
    h.add_argument("--input", required=True, help="GSPN-T tensor (B, C, H, W); batch item 0 is used")
    h.add_argument("--query", required=True, type=_pair, help="query pixel as H,W")
    src = h.add_mutually_exclusive_group()
    src.add_argument("--params", help="checkpoint directory written by save_params")
    src.add_argument("--random-seed", type=_u64, default=0, help="seed for freshly initialized parameters")
    h.add_argument("--channel", type=int, default=0)
    h.add_argument("--groups", type=int, default=1)
    h.add_argument("--out", required=True, help="output prefix; writes PREFIX-<direction>.pgm and PREFIX-merged.pgm")
    h.set_defaults(fn=cmd_heatmap)

    t = sub.add_parser("train-toy", help="train one block on a toy task")
    t.add_argument("--task", required=True, choices=TOY_TASKS)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=TOY_LR, help="peak step size")
    t.add_argument("--warmup", type=int, default=TOY_WARMUP,
                   help="updates over which the step size ramps linearly to --lr (0: constant)")
    t.add_argument("--seed", type=_u64, default=0)
    t.add_argument("--groups", type=int, default=TOY_GROUPS)
    t.add_argument("--out", required=True, help="loss trace CSV (step,loss)")
    t.set_defaults(fn=cmd_train_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            set_threads(args.threads)
        elif os.environ.get("GSPN_THREADS"):
            try:
                if int(os.environ["GSPN_THREADS"]) < 1:
                    raise ValueError
            except ValueError:
                raise UsageError("GSPN_THREADS must be a positive integer")
        return args.fn(args)
    except UsageError as e:
        print(f"gspn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        set_threads(None)


if __name__ == "__main__":
    sys.exit(main())
