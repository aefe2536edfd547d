"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in pytest's terminal summary (see conftest.py) and
also written to stdout as each criterion finishes.
"""

import contextlib
import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import grad_check, numeric_grad
from oracles import dense_circuit
from qhefl import bench, ckks, moe, nn
from qhefl import quantum as qm
from qhefl.config import validate
from qhefl.data import Dataset
from qhefl.experiment import prepare_data, run_experiment
from qhefl.metrics import auc, confusion_matrix, micro_macro_auc, roc_auc, roc_points
from qhefl.noise import EulerAngles, angular_errors, build_j, estimate_period, exp_tj, fundamental_period
from qhefl.protocol import (
    ClientJob,
    EncryptedUpdate,
    PlainUpdate,
    aggregate_encrypted,
    aggregate_plain,
    encrypt_weights,
    run_federated,
    unchunk,
)

RESULTS: dict[int, tuple[bool, str]] = {}
ROOT = Path(__file__).resolve().parent.parent
MH = b"\xac" * 16


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.notes: list[str] = []
        self.failures: list[str] = []
        self.t0 = time.perf_counter()

    def check(self, ok, note):
        (self.notes if ok else self.failures).append(note)

    def elapsed(self):
        return time.perf_counter() - self.t0


@contextlib.contextmanager
def criterion(number, title):
    c = Criterion(number, title)
    try:
        yield c
    except Exception as exc:
        c.failures.append(f"error: {exc!r}")
    ok = not c.failures
    detail = "; ".join(c.failures + c.notes)
    RESULTS[number] = (ok, f"{title}: {detail} [{c.elapsed():.1f} s]")
    print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {RESULTS[number][1]}")
    assert ok, detail


def decrypt_flat(chunks, keys, ctx, length):
    return unchunk([ckks.decrypt_values(c, keys, ctx) for c in chunks], length)


# -- 1 --------------------------------------------------------------------------------


def test_criterion_1_ckks_n8192():
    with criterion(1, "CKKS at n=8192, [60,40,40,60], scale 2^40") as c:
        ctx = ckks.gen_context(ckks.PAPER)
        rng = np.random.default_rng(101)
        keys = ckks.keygen(ctx, rng)
        v = rng.uniform(-1, 1, 1024)
        err = np.max(np.abs(ckks.decrypt_values(ckks.encrypt_values(v, keys, ctx, rng), keys, ctx)[:1024] - v))
        c.check(err <= 1e-5, f"roundtrip max err {err:.2e} (<= 1e-5)")
        vals = [rng.uniform(-1, 1, ctx.slots) for _ in range(10)]
        total = ckks.add_many([ckks.encrypt_values(x, keys, ctx, rng) for x in vals])
        serr = np.max(np.abs(ckks.decrypt_values(total, keys, ctx) - np.sum(vals, axis=0)))
        c.check(serr <= 1e-3, f"10-ciphertext sum err {serr:.2e} (<= 1e-3)")
        c.check(c.elapsed() < 30, f"runtime {c.elapsed():.1f} s (< 30 s)")


# -- 2 --------------------------------------------------------------------------------


def _encrypted_round(values, counts, ctx, keys, rng):
    ups_enc, ups_plain = [], []
    for k, (n, w) in enumerate(zip(counts, values)):
        ups_plain.append(PlainUpdate(k, 1, int(n), w, MH))
        ups_enc.append(EncryptedUpdate(k, 1, int(n), encrypt_weights(w, keys.public, ctx, rng), MH, w.size))
    enc = decrypt_flat(aggregate_encrypted(ups_enc, ctx), keys, ctx, values[0].size)
    return enc, aggregate_plain(ups_plain)


def test_criterion_2_aggregation_equivalence(paper_ctx, paper_keys):
    with criterion(2, "encrypted vs plaintext aggregation, 10 clients x 1e4 weights x 20 rounds") as c:
        ctx, keys = paper_ctx, paper_keys
        rng = np.random.default_rng(202)
        counts = rng.integers(50, 500, 10)
        glob = rng.normal(0, 0.5, 10_000)
        worst = 0.0
        for _ in range(20):
            local = [glob + rng.normal(0, 0.05, glob.size) for _ in counts]
            enc, plain = _encrypted_round(local, counts, ctx, keys, rng)
            worst = max(worst, float(np.max(np.abs(enc - plain))))
            glob = enc
        c.check(worst <= 1e-3, f"worst per-round L-inf {worst:.2e} (<= 1e-3)")

        # a real model driven along both paths for 20 rounds
        data = prepare_data(validate({"mode": "qfl-fhe", "seed": 0}))
        model = moe.build_mqmoe(data.input_shapes, data.classes, {}, seed=0)
        template = nn.flatten_weights(model)
        g_enc = g_plain = template.values.copy()
        for _ in range(20):
            deltas = [rng.normal(0, 0.02, g_enc.size) for _ in counts]
            g_enc, _ = _encrypted_round([g_enc + d for d in deltas], counts, ctx, keys, rng)
            _, g_plain = _encrypted_round([g_plain + d for d in deltas], counts, ctx, keys, rng)
        preds = {}
        for name, w in (("enc", g_enc), ("plain", g_plain)):
            nn.load_weights(model, template.with_values(w))
            _, probs = model.evaluate(data.test.features, data.test.labels)
            preds[name] = {k: p.argmax(axis=1) for k, p in probs.items()}
        agree = min(float(np.mean(preds["enc"][k] == preds["plain"][k])) for k in preds["enc"])
        c.check(agree >= 0.999, f"prediction agreement {agree:.4f} on {len(data.test)} test samples (>= 0.999)")


# -- 3 --------------------------------------------------------------------------------


def test_criterion_3_quantum_engine():
    with criterion(3, "statevector engine") as c:
        rng = np.random.default_rng(303)
        d = 6
        a = rng.normal(size=2**d) + 1j * rng.normal(size=2**d)
        s = qm.StateVector(a / np.linalg.norm(a))
        for _ in range(10_000):
            if rng.random() < 0.5:
                s.rx(int(rng.integers(d)), float(rng.uniform(-np.pi, np.pi)))
            else:
                ctl, tgt = rng.choice(d, 2, replace=False)
                s.cnot(int(ctl), int(tgt))
        drift = abs(s.norm() - 1)
        c.check(drift <= 1e-10, f"norm drift after 1e4 gates {drift:.1e} (<= 1e-10)")

        worst = 0.0
        for _ in range(50):
            th = rng.uniform(-np.pi, np.pi, (int(rng.integers(1, 4)), 2))
            a = rng.normal(size=4) + 1j * rng.normal(size=4)
            a /= np.linalg.norm(a)
            got = qm.run_pqc(qm.StateVector(a), qm.PqcConfig(th)).amplitudes
            worst = max(worst, float(np.max(np.abs(got - dense_circuit(th, 2) @ a))))
        c.check(worst <= 1e-12, f"d=2 dense-oracle max err {worst:.1e} (<= 1e-12)")

        rel = 0.0
        h = 1e-5
        for _ in range(100):
            dq, layers = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            x = rng.uniform(-np.pi, np.pi, dq)
            th = rng.uniform(-np.pi, np.pi, (layers, dq))
            up = rng.normal(size=dq)
            g = qm.param_shift_grad(x, qm.PqcConfig(th), up)
            fd = np.zeros_like(th)
            for idx in np.ndindex(th.shape):
                tp, tm = th.copy(), th.copy()
                tp[idx] += h
                tm[idx] -= h
                fd[idx] = up @ (qm.quantum_layer_forward(x, qm.PqcConfig(tp)) - qm.quantum_layer_forward(x, qm.PqcConfig(tm))) / (2 * h)
            rel = max(rel, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)))
        c.check(rel <= 1e-5, f"parameter-shift vs central FD worst relative err {rel:.1e} over 100 cases (<= 1e-5)")
        c.check(c.elapsed() < 10, f"runtime {c.elapsed():.1f} s (< 10 s)")


# -- 4 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_end_to_end_qfl_fhe():
    with criterion(4, "qfl-fhe run, 4 clients x 5 rounds, ~800 samples") as c:
        cfg = json.loads((ROOT / "configs" / "acceptance_qfl_fhe.json").read_text())
        weights = {}
        results = {}
        for mode in ("qfl-fhe", "qfl"):
            ws = []
            results[mode] = run_experiment({**cfg, "mode": mode}, on_round=lambda rep, fw, ws=ws: ws.append(fw.values.copy()))
            weights[mode] = ws
        acc = results["qfl-fhe"].reports[-1].test_accuracy
        c.check(min(acc.values()) >= 0.90, "test accuracy " + ", ".join(f"{k} {v:.3f}" for k, v in sorted(acc.items())) + " (>= 0.90 each)")
        drift = max(float(np.max(np.abs(a - b))) for a, b in zip(weights["qfl-fhe"], weights["qfl"]))
        c.check(len(weights["qfl-fhe"]) == len(weights["qfl"]) == 5, "5 rounds reported per mode")
        c.check(drift <= 1e-3, f"per-round weight drift vs qfl {drift:.2e} (<= 1e-3)")
        c.check(c.elapsed() < 300, f"runtime {c.elapsed():.0f} s for both modes (< 300 s)")


# -- 5 --------------------------------------------------------------------------------


def test_criterion_5_noise_lab():
    with criterion(5, "rotation generator, 50 random Euler triples") as c:
        rng = np.random.default_rng(505)
        worst_id = worst_orth = worst_period = 0.0
        for _ in range(50):
            a = EulerAngles(*rng.uniform(-np.pi, np.pi, 3))
            J = build_j(a)
            w = fundamental_period(a)
            worst_id = max(worst_id, float(np.max(np.abs(exp_tj(J, w) - np.eye(3)))))
            for t in rng.uniform(-3 * w, 3 * w, 5):
                R = exp_tj(J, t)
                worst_orth = max(worst_orth, float(np.max(np.abs(R.T @ R - np.eye(3)))))
            v = rng.normal(size=3)
            t = np.linspace(0, 4 * w, 4 * 64, endpoint=False)
            tr = angular_errors(v, v + 0.05 * rng.normal(size=3), t, J)
            worst_period = max(worst_period, abs(estimate_period(tr.delta_az, t=t) - w) / w)
        c.check(worst_id <= 1e-9, f"max |SP(w) - I| {worst_id:.1e} (<= 1e-9)")
        c.check(worst_period <= 0.01, f"worst period estimate error {worst_period:.1e} (<= 1%)")
        c.check(worst_orth <= 1e-12, f"orthogonality err {worst_orth:.1e} (<= 1e-12)")
        c.check(c.elapsed() < 5, f"runtime {c.elapsed():.1f} s (< 5 s)")


# -- 6 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_bench_sweep():
    with criterion(6, "encryption parameter sweep") as c:
        grid = [(s, n, 1) for s in (20, 40) for n in (2048, 4096, 8192, 16384)]
        rows, summary = bench.bench_encryption_sweep(grid, repeats=3)
        c.check(summary["failed_points"] == 0, "all grid points constructible")
        cap = {(r.bit_scale, r.poly_degree): r.encrypted_params for r in rows}
        c.check(
            summary.get("scale_40_to_20_increases_capacity") is True,
            f"capacity at n=8192: scale 20 -> {cap[(20, 8192)]}, scale 40 -> {cap[(40, 8192)]}",
        )
        r2 = min(summary["size_r2"].values())
        c.check(r2 > 0.99, f"size vs n linear fit R^2 {r2:.6f} (> 0.99)")
        top = [r for r in rows if r.poly_degree == summary["largest_n"]]
        detail = ", ".join(f"s={r.bit_scale}: serialize {r.serialize_seconds * 1e3:.1f} ms vs encrypt {r.seconds * 1e3:.1f} ms" for r in top)
        c.check(summary["serialize_dominates_at_largest_n"], f"at n={summary['largest_n']} {detail}")


# -- 7 --------------------------------------------------------------------------------


def test_criterion_7_mqmoe_properties():
    with criterion(7, "mixture-of-experts properties") as c:
        rng = np.random.default_rng(707)
        worst, nonneg = 0.0, True
        for m in (1, 2, 3, 5):
            g = moe.GatingNetwork(m, 2, 1, rng)
            for scale in (0.01, 1.0, 100.0):
                w = g.forward(rng.normal(size=(16, m, 2)) * scale)
                worst = max(worst, float(np.max(np.abs(w.sum(axis=1) - 1))))
                nonneg &= bool(np.all(w >= 0))
        c.check(worst <= 1e-9 and nonneg, f"gates on the simplex, sum deviation {worst:.1e} (<= 1e-9)")

        outs = [rng.normal(size=(4, 3)) for _ in range(3)]
        exact = all(np.array_equal(moe.combine(np.eye(3)[[j] * 4], outs), outs[j]) for j in range(3))
        c.check(exact, "one-hot gate recovers each expert exactly")

        lin = True
        for _ in range(200):
            o = [rng.integers(-64, 64, size=(2, 3)) / 8.0 for _ in range(3)]
            g1, g2 = rng.integers(0, 16, (2, 3)) / 16.0, rng.integers(0, 16, (2, 3)) / 16.0
            for alpha in (0.0, 0.25, 0.5, 1.0):
                lin &= np.array_equal(moe.combine(alpha * g1 + (1 - alpha) * g2, o), alpha * moe.combine(g1, o) + (1 - alpha) * moe.combine(g2, o))
        c.check(lin, "combination linearity exact on dyadic inputs")

        shapes = {"sequence": (5,), "image": (1, 5, 5)}
        classes = {"sequence": 3, "image": 2}
        arch = {"qubits": 2, "layers": 1, "heads": 1, "seq_hidden": 3, "img_channels": 1, "kernel": 2, "pool": 2, "head_hidden": 3}
        model = moe.build_mqmoe(shapes, classes, arch, seed=13)
        for _, p, _ in model.named_parameters():
            p[...] = rng.normal(size=p.shape) * 0.5
        feats = {"sequence": rng.normal(size=(3, 5)), "image": rng.normal(size=(3, 1, 5, 5))}
        labels = {"sequence": rng.integers(0, 3, 3), "image": rng.integers(0, 2, 3)}
        model.zero_grad()
        model.loss_and_grad(feats, labels)
        analytic = [g.copy() for _, _, g in model.named_parameters()]
        f = lambda: model.evaluate(feats, labels)[0]
        err = grad_check([(a, numeric_grad(f, p)) for a, (_, p, _) in zip(analytic, model.named_parameters())])
        c.check(err <= 1e-5, f"full-model gradient relative err {err:.1e} (<= 1e-5)")
        c.check(c.elapsed() < 30, f"runtime {c.elapsed():.1f} s (< 30 s)")


# -- 8 --------------------------------------------------------------------------------


def pairwise_auc(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    d = s[y][:, None] - s[~y][None, :]
    return float(np.mean((d > 0) + 0.5 * (d == 0)))


def test_criterion_8_metrics():
    with criterion(8, "ROC/AUC and confusion matrices") as c:
        fpr, tpr, _ = roc_points([0.9, 0.8, 0.3], [1, 1, 0])
        c.check(auc(fpr, tpr) == 1.0 and fpr.tolist() == [0, 0, 0, 1], "hand ROC [0.9,0.8,0.3]/[1,1,0] has AUC 1")
        c.check(roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75, "hand AUC 0.75 case")
        c.check(roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5, "all-tied scores give 0.5")
        cm = confusion_matrix([0, 1, 1, 2, 2, 2], [0, 1, 2, 2, 2, 1])
        c.check(cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 1, 2]], "hand confusion counts")
        norm = confusion_matrix([0, 1, 1, 2, 2, 2], [0, 1, 2, 2, 2, 1], normalize=True)
        rows = float(np.max(np.abs(norm.sum(axis=1) - 1)))
        c.check(rows <= 1e-12, f"normalized rows sum to 1 (dev {rows:.1e})")

        rng = np.random.default_rng(808)
        labels = rng.integers(0, 4, 400)
        scores = rng.random((400, 4)) + 0.8 * np.eye(4)[labels]
        micro, macro = micro_macro_auc(scores, labels)
        onehot = np.eye(4)[labels]
        want_micro = pairwise_auc(scores.ravel(), onehot.ravel())
        want_macro = np.mean([pairwise_auc(scores[:, k], onehot[:, k]) for k in range(4)])
        dev = max(abs(micro - want_micro), abs(macro - want_macro))
        c.check(dev <= 1e-12, f"micro {micro:.4f} / macro {macro:.4f} match pooled and per-class definitions (dev {dev:.1e})")


# -- 9 --------------------------------------------------------------------------------


def _soak_model(seed=0):
    layers = nn.build_layers([{"type": "dense", "in": 6, "out": 8, "activation": "relu"}, {"type": "dense", "in": 8, "out": 3}], np.random.default_rng(seed))
    return nn.Classifier(layers)


def _soak_jobs(keys):
    jobs = []
    for cid in range(10):
        r = np.random.default_rng([9, cid])
        x = r.normal(size=(24, 6))
        ds = Dataset({"x": x}, {"x": np.argmax(x[:, :3], axis=1)})
        jobs.append(ClientJob(cid, functools.partial(_soak_model, 0), ds, None, "fl-fhe", nn.TrainConfig(lr=1e-2, batch_size=8), 1, 9, ckks.PAPER, keys))
    return jobs


@pytest.mark.slow
def test_criterion_9_transport_soak(paper_ctx, paper_keys):
    with criterion(9, "10 clients x 20 rounds, paper-profile ciphertexts, tcp vs inproc") as c:
        init = nn.flatten_weights(_soak_model())
        finals = {}
        for backend in ("tcp", "inproc"):
            t0 = time.perf_counter()
            records, _ = run_federated(
                _soak_jobs(paper_keys), init, 20, transport=backend, ctx=paper_ctx,
                public=paper_keys.public_view(), timeout=120,
            )
            finals[backend] = records
            c.check(len(records) == 20, f"{backend}: 20 rounds in {time.perf_counter() - t0:.1f} s, {sum(r.bytes for r in records) / 2**20:.0f} MiB framed")
        same = all(np.array_equal(a.weights, b.weights) for a, b in zip(finals["tcp"], finals["inproc"]))
        c.check(same, "per-round global weights bit-identical across backends")
        same_bytes = [r.bytes for r in finals["tcp"]] == [r.bytes for r in finals["inproc"]]
        c.check(same_bytes, "byte counts identical across backends")
