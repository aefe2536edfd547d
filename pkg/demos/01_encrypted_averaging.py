"""Encrypted weighted averaging, step by step.

Three clients hold weight vectors and sample counts.  Each encrypts its
vector under one shared public key; the server multiplies every ciphertext
by the client's share n_k / n_total, adds them up and rescales once.  Only a
key holder can read the result, which matches the plaintext weighted mean to
CKKS precision.

    python3 demos/01_encrypted_averaging.py
"""

import time

import numpy as np

from qhefl import ckks
from qhefl.protocol import EncryptedUpdate, PlainUpdate, aggregate_encrypted, aggregate_plain, encrypt_weights, unchunk

rng = np.random.default_rng(0)
t0 = time.perf_counter()
ctx = ckks.gen_context(ckks.PAPER)
keys = ckks.keygen(ctx, rng)
print(f"context: n={ctx.n}, {ctx.slots} slots, data primes {[m.q.bit_length() for m in ctx.data]} bits, "
      f"special prime {ctx.special.q.bit_length()} bits  ({time.perf_counter() - t0:.2f} s incl. keygen)")

counts = [120, 40, 240]
weights = [rng.normal(0, 0.3, 6000) for _ in counts]
mh = b"\0" * 16

enc = [EncryptedUpdate(k, 1, n, encrypt_weights(w, keys.public, ctx, rng), mh, w.size) for k, (n, w) in enumerate(zip(counts, weights))]
size = len(ckks.serialize(enc[0].chunks[0], ctx))
print(f"each client sends {len(enc[0].chunks)} ciphertexts of {size:,} bytes for {weights[0].size} weights")

# the aggregator only needs the context, never a key
agg = aggregate_encrypted(enc, ctx)
print(f"aggregate: level {agg[0].level}, scale 2^{np.log2(agg[0].scale):.2f}")

got = unchunk([ckks.decrypt_values(c, keys, ctx) for c in agg], weights[0].size)
want = aggregate_plain([PlainUpdate(k, 1, n, w, mh) for k, (n, w) in enumerate(zip(counts, weights))])
print(f"max |encrypted - plaintext| = {np.max(np.abs(got - want)):.2e}")
print("first weights:", np.round(got[:4], 6), "vs", np.round(want[:4], 6))
