"""End-to-end experiment runs over the six training modes."""

from __future__ import annotations

import csv
import functools
import time
from dataclasses import dataclass, field

import numpy as np

from . import ckks
from . import config as config_mod
from .data import (
    IMG,
    SEQ,
    Dataset,
    SyntheticSpec,
    all_kmers,
    generate,
    load_feature_csv,
    load_samples,
    split,
    tfidf_fit,
    to_dataset,
)
from .errors import InputError, RunFailed
from .moe import build_mqmoe
from .nn import FlatWeights, TrainConfig, flatten_weights, load_weights, train_local
from .protocol import ClientJob, ExperimentMode, PqcOptimizer, partition_indices, run_federated

CSV_COLUMNS = ["round", "client_id", "split", "loss", "accuracy", "seconds", "bytes"]


@dataclass
class RoundReport:
    round: int
    client_metrics: dict
    test_loss: float
    test_accuracy: dict
    seconds: float
    bytes: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.test_accuracy.values())))

    def rows(self) -> list[list]:
        out = []
        for cid in sorted(self.client_metrics):
            m = self.client_metrics[cid]
            out.append([self.round, cid, "train", m.get("loss", ""), m.get("accuracy", ""), "", ""])
        out.append([self.round, "global", "test", self.test_loss, self.mean_accuracy, self.seconds, self.bytes])
        for mod in sorted(self.test_accuracy):
            out.append([self.round, "global", f"test/{mod}", "", self.test_accuracy[mod], "", ""])
        return out


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    weights: list[np.ndarray]
    model: object
    test: Dataset
    trace: list = field(default_factory=list)
    optimizer_calls: int = 0


@dataclass
class PreparedData:
    pool: Dataset
    test: Dataset
    input_shapes: dict
    classes: dict


def prepare_data(cfg: dict) -> PreparedData:
    """Load or generate samples, split off the shared test set, build features."""
    ds_cfg = cfg["dataset"]
    seed = cfg["seed"]
    if "csv" in ds_cfg:
        full = load_feature_csv(ds_cfg["csv"])
        labels = full.labels["x"]
        pool_idx, test_idx = split(labels, [1 - cfg["test_fraction"], cfg["test_fraction"]], seed)
        pool, test = full.subset(pool_idx), full.subset(test_idx)
        return PreparedData(pool, test, {"x": full.features["x"].shape[1:]}, {"x": int(labels.max()) + 1})
    if "cache" in ds_cfg:
        samples, meta = load_samples(ds_cfg["cache"])
        k = meta.get("k", 3)
    else:
        spec = SyntheticSpec(**{"seed": seed, **ds_cfg["synthetic"]})
        samples = generate(spec)
        k = spec.k
    if not samples:
        raise InputError("dataset is empty")
    joint = np.array([[s.labels[SEQ], s.labels[IMG]] for s in samples])
    pool_idx, test_idx = split(joint, [1 - cfg["test_fraction"], cfg["test_fraction"]], seed)
    vocab = tfidf_fit([samples[i].sequence for i in pool_idx], k, all_kmers(k))
    full = to_dataset(samples, vocab)
    classes = {SEQ: int(joint[:, 0].max()) + 1, IMG: int(joint[:, 1].max()) + 1}
    shapes = {SEQ: (len(vocab),), IMG: tuple(samples[0].image.shape)}
    return PreparedData(full.subset(pool_idx), full.subset(test_idx), shapes, classes)


def model_factory(cfg: dict, data: PreparedData):
    mode = ExperimentMode(cfg["mode"])
    return functools.partial(
        build_mqmoe, data.input_shapes, data.classes, cfg["model"], cfg["seed"], mode.quantum
    )


def evaluate(model, test: Dataset) -> tuple[float, dict, dict]:
    loss, probs = model.evaluate(test.features, test.labels)
    acc = {k: float(np.mean(probs[k].argmax(axis=1) == test.labels[k])) for k in probs}
    return loss, acc, probs


def _joint_labels(ds: Dataset) -> np.ndarray:
    return np.stack([ds.labels[k] for k in ds.modalities], axis=1)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=t["lr"], plateau_lr=t["plateau_lr"], batch_size=t["batch_size"], epochs=t["epochs"],
        seed=cfg["seed"], optimizer=t["optimizer"],
    )


def run_experiment(cfg: dict, on_round=None, resume: tuple[int, np.ndarray] | None = None, keys=None) -> ExperimentResult:
    """Run one configured experiment.

    Federated modes produce one report per communication round, centralized
    modes one per epoch.  ``resume=(last_round, weights)`` continues a
    federated run after ``last_round``.  ``on_round(report, flat_weights)``
    fires after every report.
    """
    cfg = config_mod.validate(cfg)
    mode = ExperimentMode(cfg["mode"])
    data = prepare_data(cfg)
    factory = model_factory(cfg, data)
    model = factory()
    template = flatten_weights(model)
    tcfg = train_config(cfg)
    reports, weights = [], []

    def emit(round_, client_metrics, seconds, nbytes, values):
        load_weights(model, template.with_values(values))
        loss, acc, _ = evaluate(model, data.test)
        rep = RoundReport(round_, client_metrics, loss, acc, seconds, nbytes)
        reports.append(rep)
        weights.append(values.copy())
        if on_round is not None:
            on_round(rep, template.with_values(values.copy()))

    start = 1
    values = template.values.copy()
    if resume is not None:
        start, values = resume[0] + 1, np.asarray(resume[1], dtype=np.float64)

    if not mode.federated:
        tr, va = split(_joint_labels(data.pool), [0.8, 0.2], cfg["seed"])
        train, val = data.pool.subset(tr), data.pool.subset(va)
        t0 = [time.perf_counter()]
        load_weights(model, template.with_values(values))

        def on_epoch(rec):
            ep = rec["epoch"] + 1
            snap = flatten_weights(model).values
            dt = time.perf_counter() - t0[0]
            emit(ep, {0: {"loss": rec["loss"], "accuracy": rec["accuracy"]}}, dt, 0, snap)
            t0[0] = time.perf_counter()

        try:
            train_local(model, train, tcfg, val, np.random.default_rng([cfg["seed"], 0xCE]), on_epoch)
        except Exception as exc:
            raise RunFailed(f"centralized training failed after {len(reports)} epochs: {exc!r}", len(reports) + 1) from exc
        return ExperimentResult(reports, weights, model, data.test)

    fl = cfg["fl"]
    ctx = public = None
    params = None
    if mode.fhe:
        params = config_mod.ckks_params(cfg)
        ctx = ckks.gen_context(params)
        if keys is None:
            keys = ckks.keygen(ctx, np.random.default_rng([cfg["seed"], 0x4B]))
        public = keys.public_view()
    parts = partition_indices(data.pool.labels[data.pool.modalities[0]], fl["clients"], fl["partition"], fl["alpha"], cfg["seed"])
    jobs = []
    for cid, idx in enumerate(parts):
        local = data.pool.subset(idx)
        tr, va = split(_joint_labels(local), [0.9, 0.1], cfg["seed"] + cid)
        jobs.append(
            ClientJob(
                cid, factory, local.subset(tr), local.subset(va) if len(va) else None, mode.value, tcfg,
                fl["epochs_per_client"], cfg["seed"], params, keys,
            )
        )
    rounds = max(0, fl["rounds"] - (start - 1))
    optimizer = PqcOptimizer()
    trace = []
    if rounds:
        tp = cfg["transport"]
        records, server = run_federated(
            jobs, template.with_values(values), rounds, transport=tp["backend"], workers=tp["workers"],
            ctx=ctx, public=public, decrypt_all_clients=fl["decrypt_all_clients"], timeout=tp["timeout"],
            start_round=start, optimizer=optimizer,
            on_round=lambda rec: emit(rec.round, rec.client_metrics, rec.seconds, rec.bytes, rec.weights),
        )
        trace = server.trace
    else:
        load_weights(model, template.with_values(values))
    return ExperimentResult(reports, weights, model, data.test, trace, optimizer.calls)


def write_reports(path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for rep in reports:
            w.writerows(rep.rows())
