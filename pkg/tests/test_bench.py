import math

import pytest

from gspn.bench import (CSV_HEADER, SOFTMAX_WORK_LIMIT, BenchRecord, fit_slope, read_csv, run_bench, time_call,
                        write_csv)


def test_small_run_and_csv_schema(tmp_path):
    recs = run_bench(["gspn-global", "gspn-local", "softmax", "linear"], [8, 16], repeats=5)
    assert [(r.mechanism, r.side) for r in recs][:2] == [("gspn-global", 8), ("gspn-global", 16)]
    assert all(not r.skipped and r.median_seconds > 0 for r in recs)
    assert {r.g for r in recs if r.mechanism == "gspn-local"} == {2}
    path = tmp_path / "b.csv"
    write_csv(recs, path)
    data = path.read_bytes()
    assert b"\r\n" not in data
    lines = data.decode().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("gspn-global,8,64,1,1,5,")
    assert lines[-1].startswith("linear,16,256,1,,5,")
    back = read_csv(path)
    assert [(r.mechanism, r.side, r.g) for r in back] == [(r.mechanism, r.side, r.g) for r in recs]


def test_softmax_guard_marks_skipped(tmp_path):
    side = math.ceil((SOFTMAX_WORK_LIMIT + 1) ** 0.25)
    rec = run_bench(["softmax"], [side], repeats=5)[0]
    assert rec.skipped and rec.throughput is None
    assert rec.row()[-1] == "skipped"
    write_csv([rec], tmp_path / "s.csv")
    assert read_csv(tmp_path / "s.csv")[0].skipped


def test_slope_fit():
    recs = [BenchRecord("m", s, 1, None, 5, 1e-9 * (s * s) ** 2) for s in (8, 16, 32)]
    assert abs(fit_slope(recs, "m") - 2.0) < 1e-9
    recs.append(BenchRecord("m", 64, 1, None, 5, None))
    assert abs(fit_slope(recs, "m") - 2.0) < 1e-9
    assert fit_slope(recs[:1], "m") is None


def test_time_call_counts_warmups():
    calls = []
    time_call(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7


def test_validation():
    with pytest.raises(ValueError):
        run_bench(["quadratic"], [8])
    with pytest.raises(ValueError):
        run_bench(["linear"], [4])
    with pytest.raises(ValueError):
        run_bench(["linear"], [8], repeats=3)
