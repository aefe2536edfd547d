"""How ring size and bit scale trade capacity against time and bytes.

Capacity counts how many values fit in a fixed 512 MiB modulus budget: a
smaller bit scale means narrower primes, so each ciphertext is cheaper and
more of them fit.  Ciphertext bytes grow linearly with the ring degree.

    python3 demos/05_parameter_sweep.py
"""

from qhefl.bench import bench_encryption_sweep

grid = [(s, n, 1) for s in (20, 40) for n in (2048, 4096, 8192)]
rows, summary = bench_encryption_sweep(grid, repeats=2)
print(f"{'scale':>5} {'n':>6} {'capacity':>11} {'encrypt ms':>10} {'serialize ms':>12} {'bytes':>10}")
for r in rows:
    print(f"{r.bit_scale:>5} {r.poly_degree:>6} {r.encrypted_params:>11,} {r.seconds * 1e3:>10.1f} "
          f"{r.serialize_seconds * 1e3:>12.2f} {r.bytes:>10,}")
print("\nsummary:", summary)
