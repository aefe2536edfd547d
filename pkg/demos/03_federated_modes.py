"""Federated training with and without encryption.

Runs the same small multimodal task (k-mer sequences plus blob images) in
the qfl mode and the qfl-fhe mode from one seed, then prints per-round test
accuracy and how far the encrypted run's global weights drift from the
plaintext run.  Uses the toy CKKS ring so the whole script takes seconds.  Its primes are
narrow, so the drift grows by a few orders of magnitude per round; swap
"toy" for "paper" (n=8192, 40-bit scale) to keep it near 1e-7.

    python3 demos/03_federated_modes.py
"""

import numpy as np

from qhefl.experiment import run_experiment

base = {
    "seed": 3,
    "dataset": {"synthetic": {"samples": 240, "image_size": 8, "motif_noise": 0.0}},
    "model": {"qubits": 2, "layers": 1, "heads": 1, "seq_hidden": 4, "kernel": 3, "pool": 2, "head_hidden": 8},
    "train": {"lr": 0.02, "batch_size": 16},
    "fl": {"clients": 3, "rounds": 4, "epochs_per_client": 3},
    "ckks": {"profile": "toy"},
}

runs = {}
for mode in ("qfl", "qfl-fhe"):
    weights = []
    res = run_experiment({**base, "mode": mode}, on_round=lambda rep, fw, w=weights: w.append(fw.values.copy()))
    runs[mode] = (res, weights)

print(f"{'round':>5}  {'qfl acc':>16}  {'qfl-fhe acc':>16}  {'drift':>8}  {'fhe bytes':>10}")
for i, (a, b) in enumerate(zip(runs["qfl"][0].reports, runs["qfl-fhe"][0].reports)):
    drift = np.max(np.abs(runs["qfl"][1][i] - runs["qfl-fhe"][1][i]))
    fmt = lambda acc: "/".join(f"{acc[k]:.2f}" for k in sorted(acc))
    print(f"{a.round:>5}  {fmt(a.test_accuracy):>16}  {fmt(b.test_accuracy):>16}  {drift:8.1e}  {b.bytes:>10,}")
print("\naccuracy columns are image/sequence; the protocol trace of the last round:")
print([stage for stage, r in runs["qfl-fhe"][0].trace if r == base["fl"]["rounds"]])
