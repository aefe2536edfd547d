import csv
import math

import numpy as np
import pytest

from qhefl import bench, ckks
from qhefl.bench import BenchRow, bench_encryption_sweep, chain_for, encryptable_count, linear_fit_r2, summarize


def test_chain_and_params():
    assert chain_for(40) == (60, 40, 40, 60)
    p = bench.params_for(30, 4096)
    assert p.n == 4096 and p.scale == 2.0**30


def test_capacity_model_at_8192():
    cap = {s: encryptable_count(ckks.gen_context(bench.params_for(s, 8192)), bench.DEFAULT_BUDGET_BITS) for s in (20, 40)}
    # a fresh ciphertext costs 2 * n * (sum of data-prime bits); 4096 slots each
    assert cap[20] == (bench.DEFAULT_BUDGET_BITS // (2 * 8192 * 80)) * 4096 == 13_418_496
    assert cap[40] == (bench.DEFAULT_BUDGET_BITS // (2 * 8192 * 140)) * 4096 == 7_667_712
    assert cap[20] > cap[40]


def test_linear_fit_r2():
    assert linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0)
    assert math.isnan(linear_fit_r2([1, 2], [1, 2]))
    assert linear_fit_r2([1, 2, 3], [5, 5, 5]) == 1.0
    assert linear_fit_r2([1, 2, 3, 4], [1, -1, 1, -1]) < 0.5


def small_grid():
    return [(s, n, 1) for s in (20, 40) for n in (64, 128, 256)]


def test_small_sweep_rows_and_summary():
    rows, summary = bench_encryption_sweep(small_grid(), repeats=1)
    assert len(rows) == 6 and all(r.status == "ok" for r in rows)
    assert all(r.encrypted_params > 0 and r.bytes > 0 and r.seconds > 0 for r in rows)
    for s in (20, 40):
        assert summary["size_r2"][s] > 0.99
    assert summary["failed_points"] == 0 and summary["largest_n"] == 256
    assert isinstance(summary["serialize_dominates_at_largest_n"], bool)


def test_capacity_rises_as_bit_scale_falls():
    rows, _ = bench_encryption_sweep([(s, 128, 1) for s in (20, 30, 40)], repeats=1)
    caps = [r.encrypted_params for r in rows]
    assert caps[0] > caps[1] > caps[2]


def test_bytes_match_size_formula():
    (row,), _ = bench_encryption_sweep([(30, 128, 1)], repeats=1)
    ctx = ckks.gen_context(bench.params_for(30, 128))
    assert row.bytes == ckks.serialized_size(ctx, ctx.max_level)


def test_unconstructible_point_is_recorded_and_sweep_continues():
    rows, summary = bench_encryption_sweep([(30, 100, 1), (30, 64, 1)], repeats=1)
    assert rows[0].status.startswith("failed") and math.isnan(rows[0].seconds)
    assert rows[1].status == "ok"
    assert summary["failed_points"] == 1


def test_summary_capacity_flag():
    rows = [
        BenchRow(20, 8192, 1, 10, 1.0, 0.5, 100),
        BenchRow(40, 8192, 1, 5, 1.0, 2.0, 200),
    ]
    s = summarize(rows)
    assert s["scale_40_to_20_increases_capacity"] is True
    assert s["serialize_dominates_at_largest_n"] is True


def test_csv_and_dat_outputs(tmp_path):
    rows = [BenchRow(20, 64, 1, 10, 0.1, 0.2, 300), BenchRow(40, 64, 2, 0, math.nan, math.nan, 0, "failed: x")]
    bench.write_csv(tmp_path / "b.csv", rows)
    with open(tmp_path / "b.csv") as f:
        got = list(csv.reader(f))
    assert got[0] == bench.CSV_COLUMNS
    assert got[1][:4] == ["20", "64", "1", "10"] and got[2][-1] == "failed: x"
    bench.write_dat(tmp_path / "b.dat", ["a", "b"], [(1, 2), (3, 4)])
    assert (tmp_path / "b.dat").read_text() == "# a b\n1 2\n3 4\n"
    assert np.loadtxt(tmp_path / "b.dat").tolist() == [[1, 2], [3, 4]]
