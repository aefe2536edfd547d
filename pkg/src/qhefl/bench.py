"""Encryption parameter sweep: capacity, encryption/serialization time and ciphertext size.

Capacity is counted against a fixed storage budget: a fresh ciphertext holds
``n/2`` values and occupies ``2 * n * sum(data prime bits)`` bits, so the
encryptable count is ``floor(budget / ciphertext_bits) * n/2``.  Each grid
point uses the chain ``[s+20, s, s, s+20]`` for bit scale ``s``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import ckks
from .errors import QheflError

DEFAULT_BUDGET_BITS = 512 * 1024 * 1024 * 8
CSV_COLUMNS = [
    "bit_scale",
    "poly_degree",
    "extrema_count",
    "encrypted_params",
    "seconds",
    "serialize_seconds",
    "bytes",
    "status",
]


@dataclass
class BenchRow:
    bit_scale: int
    poly_degree: int
    extrema_count: int
    encrypted_params: int
    seconds: float
    serialize_seconds: float
    bytes: int
    status: str = "ok"


def chain_for(bit_scale: int) -> tuple[int, ...]:
    return (bit_scale + 20, bit_scale, bit_scale, bit_scale + 20)


def params_for(bit_scale: int, n: int) -> ckks.CkksParams:
    return ckks.CkksParams(n, chain_for(bit_scale), 2.0**bit_scale, label=f"sweep-{bit_scale}-{n}")


def encryptable_count(ctx: ckks.Context, budget_bits: int) -> int:
    ct_bits = 2 * ctx.n * sum(m.q.bit_length() for m in ctx.data)
    return (budget_bits // ct_bits) * ctx.slots


def _median_seconds(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_point(bit_scale, n, extrema=1, budget_bits=DEFAULT_BUDGET_BITS, repeats=3, seed=0, ctx_factory=None) -> BenchRow:
    try:
        ctx = (ctx_factory or (lambda s, d: ckks.gen_context(params_for(s, d))))(bit_scale, n)
        rng = np.random.default_rng([seed, bit_scale, n])
        keys = ckks.keygen(ctx, rng)
        values = rng.uniform(-1, 1, ctx.slots)
        enc = _median_seconds(lambda: ckks.encrypt(ckks.encode(values, ctx=ctx), keys, ctx, rng), repeats)
        ct = ckks.encrypt(ckks.encode(values, ctx=ctx), keys, ctx, rng)
        ser = _median_seconds(lambda: ckks.serialize(ct, ctx), repeats)
        size = len(ckks.serialize(ct, ctx))
        return BenchRow(bit_scale, n, extrema, encryptable_count(ctx, budget_bits), enc, ser, size)
    except (QheflError, ValueError) as exc:
        return BenchRow(bit_scale, n, extrema, 0, math.nan, math.nan, 0, f"failed: {exc}")


DEFAULT_GRID = [(s, n, 1) for s in (20, 30, 40) for n in (2048, 4096, 8192, 16384)]


def bench_encryption_sweep(grid=DEFAULT_GRID, ctx_factory=None, budget_bits=DEFAULT_BUDGET_BITS, repeats=3, seed=0):
    """Measure every grid point; returns (rows, summary)."""
    rows = [bench_point(s, n, e, budget_bits, repeats, seed, ctx_factory) for s, n, e in grid]
    return rows, summarize(rows)


def linear_fit_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 3 or np.ptp(x) == 0:
        return math.nan
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    tot = np.sum((y - y.mean()) ** 2)
    return float(1 - np.sum(resid**2) / tot) if tot > 0 else 1.0


def summarize(rows: list[BenchRow]) -> dict:
    ok = [r for r in rows if r.status == "ok"]
    out: dict = {"failed_points": len(rows) - len(ok)}
    by_scale = {}
    for r in ok:
        by_scale.setdefault(r.bit_scale, []).append(r)
    out["size_r2"] = {s: linear_fit_r2([r.poly_degree for r in rs], [r.bytes for r in rs]) for s, rs in by_scale.items()}
    scale_at = {(r.bit_scale, r.poly_degree): r.encrypted_params for r in ok}
    if (20, 8192) in scale_at and (40, 8192) in scale_at:
        out["scale_40_to_20_increases_capacity"] = scale_at[(20, 8192)] > scale_at[(40, 8192)]
    if ok:
        top = max(ok, key=lambda r: (r.poly_degree, r.bit_scale))
        out["largest_n"] = top.poly_degree
        out["serialize_dominates_at_largest_n"] = top.serialize_seconds >= top.seconds
    return out


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([asdict(r)[c] for c in CSV_COLUMNS])


def write_dat(path, header: list[str], rows) -> None:
    """Whitespace-separated columns with a '#' header line, for gnuplot."""
    with open(path, "w") as f:
        f.write("# " + " ".join(header) + "\n")
        for row in rows:
            f.write(" ".join(str(v) for v in row) + "\n")


GNUPLOT_BENCH = """set terminal pngcairo size 900,600
set output 'bench_sweep.png'
set xlabel 'polynomial degree'
set ylabel 'seconds'
set logscale x 2
plot 'bench_sweep.dat' using 2:5 with linespoints title 'encrypt', \\
     '' using 2:6 with linespoints title 'serialize'
"""

GNUPLOT_NOISE = """set terminal pngcairo size 900,600
set output 'noise_trace.png'
set xlabel 't'
set ylabel 'angle error (rad)'
plot 'noise_trace.dat' using 1:2 with lines title 'azimuth', \\
     '' using 1:3 with lines title 'elevation'
"""
