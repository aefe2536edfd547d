"""Federated rounds with encrypted or plaintext weighted averaging.

Per round the server distributes the global weights, every client trains
locally and returns an update (CKKS ciphertext chunks or plain floats), the
server folds the updates into a weighted sum in client-id order, and, with
encryption on, a key-holding client decrypts the aggregate and returns the
new global model.  The server only ever holds public material.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import struct
import threading
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import ckks
from .errors import (
    ConfigError,
    ContractViolation,
    InputError,
    IntegrityWarning,
    ParseError,
    ProtocolError,
    QheflError,
    RunFailed,
)
from .nn import FlatWeights, TrainConfig, flatten_weights, load_weights, train_local
from .transport import (
    DEFAULT_TIMEOUT,
    Endpoint,
    Envelope,
    Kind,
    channel_pair,
    tcp_dial,
    tcp_listen,
)

SERVER_ID = 0xFFFFFFFF
GARBAGE_LIMIT = 1e6


class ExperimentMode(str, Enum):
    CLASSICAL_CENTRALIZED = "classical-centralized"
    QUANTUM_CENTRALIZED = "quantum-centralized"
    CLASSICAL_FL = "classical-fl"
    QFL = "qfl"
    FL_FHE = "fl-fhe"
    QFL_FHE = "qfl-fhe"

    @property
    def quantum(self) -> bool:
        return self in (ExperimentMode.QUANTUM_CENTRALIZED, ExperimentMode.QFL, ExperimentMode.QFL_FHE)

    @property
    def federated(self) -> bool:
        return not self.value.endswith("centralized")

    @property
    def fhe(self) -> bool:
        return self.value.endswith("fhe")


# -- partitioning and chunking -------------------------------------------------------


def partition_indices(labels, k: int, scheme: str = "iid", alpha: float = 0.5, seed: int = 0) -> list[np.ndarray]:
    """Disjoint index sets covering ``range(len(labels))``.

    ``label-skew`` draws per-class client proportions from Dirichlet(alpha);
    a client left empty by the draw takes one sample from the largest client.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if k < 1:
        raise InputError("need at least one client")
    if k > n:
        raise InputError(f"{k} clients for {n} samples")
    rng = np.random.default_rng([seed, 0xDA7A])
    if scheme == "iid":
        return [np.sort(p) for p in np.array_split(rng.permutation(n), k)]
    if scheme != "label-skew":
        raise ConfigError(f"unknown partition scheme {scheme!r}")
    if alpha <= 0:
        raise ConfigError("Dirichlet alpha must be positive")
    parts: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cuts = (np.cumsum(rng.dirichlet(np.full(k, alpha)))[:-1] * len(idx)).astype(int)
        for j, chunk in enumerate(np.split(idx, cuts)):
            parts[j].extend(chunk)
    for j in range(k):
        if not parts[j]:
            donor = max(range(k), key=lambda i: len(parts[i]))
            parts[j].append(parts[donor].pop(int(rng.integers(len(parts[donor])))))
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def partition_dataset(dataset, k: int, scheme: str = "iid", alpha: float = 0.5, seed: int = 0, label_key=None):
    key = label_key or dataset.modalities[0]
    return [dataset.subset(i) for i in partition_indices(dataset.labels[key], k, scheme, alpha, seed)]


def client_imbalance(labels, n_classes: int) -> float:
    """max / min class count, absent classes counted as one sample."""
    counts = np.bincount(np.asarray(labels), minlength=n_classes)
    return float(counts.max() / max(counts.min(), 1))


def chunk_weights(values, slots: int) -> list[np.ndarray]:
    if slots <= 0:
        raise ContractViolation("slot count must be positive")
    v = np.asarray(values.values if isinstance(values, FlatWeights) else values, dtype=np.float64)
    count = max(1, math.ceil(v.size / slots))
    padded = np.zeros(count * slots)
    padded[: v.size] = v
    return list(padded.reshape(count, slots))


def unchunk(chunks, length: int) -> np.ndarray:
    flat = np.concatenate([np.asarray(c, dtype=np.float64) for c in chunks])
    if flat.size < length:
        raise ContractViolation(f"{flat.size} chunked values cannot hold {length} weights")
    return flat[:length].copy()


# -- updates and wire payloads -------------------------------------------------------

_UPDATE_HEAD = struct.Struct("<IIQ16sII")
_GLOBAL_HEAD = struct.Struct("<16sI")


@dataclass
class EncryptedUpdate:
    client_id: int
    round: int
    n_samples: int
    chunks: list
    manifest_hash: bytes
    n_values: int


@dataclass
class PlainUpdate:
    client_id: int
    round: int
    n_samples: int
    values: np.ndarray
    manifest_hash: bytes

    @property
    def n_values(self):
        return self.values.size


def encode_update(u, ctx=None) -> bytes:
    if isinstance(u, EncryptedUpdate):
        blobs = [ckks.serialize(c, ctx) for c in u.chunks]
        head = _UPDATE_HEAD.pack(u.client_id, u.round, u.n_samples, u.manifest_hash, u.n_values, len(blobs))
        return head + b"".join(struct.pack("<I", len(b)) + b for b in blobs)
    head = _UPDATE_HEAD.pack(u.client_id, u.round, u.n_samples, u.manifest_hash, u.values.size, 0)
    return head + u.values.astype("<f8").tobytes()


def decode_update(payload: bytes, encrypted: bool, ctx=None):
    if len(payload) < _UPDATE_HEAD.size:
        raise ParseError("update payload shorter than its header")
    cid, rnd, n, mh, nv, nc = _UPDATE_HEAD.unpack_from(payload)
    off = _UPDATE_HEAD.size
    if not encrypted:
        if len(payload) != off + 8 * nv:
            raise ParseError("plain update length mismatch")
        return PlainUpdate(cid, rnd, n, np.frombuffer(payload, "<f8", nv, off).astype(np.float64), mh)
    chunks = []
    for _ in range(nc):
        (ln,) = struct.unpack_from("<I", payload, off)
        off += 4
        chunks.append(ckks.deserialize(payload[off : off + ln], ctx))
        off += ln
    if off != len(payload):
        raise ParseError("trailing bytes after encrypted update")
    return EncryptedUpdate(cid, rnd, n, chunks, mh, nv)


def encode_global(fw_values: np.ndarray, manifest_hash: bytes) -> bytes:
    return _GLOBAL_HEAD.pack(manifest_hash, fw_values.size) + fw_values.astype("<f8").tobytes()


def decode_global(payload: bytes) -> tuple[np.ndarray, bytes]:
    mh, nv = _GLOBAL_HEAD.unpack_from(payload)
    if len(payload) != _GLOBAL_HEAD.size + 8 * nv:
        raise ParseError("global-model payload length mismatch")
    return np.frombuffer(payload, "<f8", nv, _GLOBAL_HEAD.size).astype(np.float64), mh


# -- client side --------------------------------------------------------------------


def encrypt_weights(values, public, ctx, rng) -> list:
    return [ckks.encrypt(ckks.encode(c, ctx=ctx), public, ctx, rng) for c in chunk_weights(values, ctx.slots)]


def client_round(
    model,
    global_fw: FlatWeights,
    train,
    mode: ExperimentMode,
    train_cfg: TrainConfig,
    epochs: int,
    client_id: int,
    round_: int,
    seed: int,
    val=None,
    ctx=None,
    public=None,
):
    """Local training from the global weights, then (optionally) encryption.

    Returns ``(update, history)``.  Training and encryption draw from
    independent generators seeded by (seed, client, round).
    """
    mode = ExperimentMode(mode)
    if mode.fhe and (ctx is None or public is None):
        raise ConfigError("encrypted modes need an encryption context and public key")
    load_weights(model, global_fw)
    history = []
    if epochs > 0:
        cfg = TrainConfig(**{**train_cfg.__dict__, "epochs": epochs})
        _, history = train_local(model, train, cfg, val, rng=np.random.default_rng([seed, client_id, round_]))
    fw = flatten_weights(model)
    if mode.fhe:
        rng = np.random.default_rng([seed, client_id, round_, 0xE7C])
        chunks = encrypt_weights(fw.values, public, ctx, rng)
        return EncryptedUpdate(client_id, round_, len(train), chunks, fw.manifest_hash, fw.values.size), history
    return PlainUpdate(client_id, round_, len(train), fw.values.copy(), fw.manifest_hash), history


def decrypt_and_update(chunks, secret, ctx, manifest: FlatWeights | tuple, n_values: int | None = None) -> FlatWeights:
    """Decrypt aggregate chunks into global weights laid out by ``manifest``.

    ``manifest`` is a FlatWeights template (its values are ignored) or a
    manifest tuple.  Decoded magnitudes above GARBAGE_LIMIT raise an
    IntegrityWarning (typical of a wrong key).
    """
    man = manifest.manifest if isinstance(manifest, FlatWeights) else tuple(manifest)
    length = sum(int(np.prod(s)) for _, s in man)
    if n_values is not None and n_values != length:
        raise ProtocolError(f"aggregate carries {n_values} weights, manifest expects {length}")
    if len(chunks) != max(1, math.ceil(length / ctx.slots)):
        raise ProtocolError(f"{len(chunks)} chunks do not fit a {length}-weight manifest")
    decoded = [ckks.decrypt_values(c, secret, ctx) for c in chunks]
    peak = max(float(np.max(np.abs(d))) for d in decoded)
    if not math.isfinite(peak) or peak > GARBAGE_LIMIT:
        warnings.warn(f"decrypted weights reach {peak:.3g}; wrong key?", IntegrityWarning, stacklevel=2)
    return FlatWeights(unchunk(decoded, length), man)


# -- server side ------------------------------------------------------------------------


def _weights(updates) -> tuple[list, list[float]]:
    ups = sorted(updates, key=lambda u: u.client_id)
    if not ups:
        raise InputError("no updates to aggregate")
    total = sum(u.n_samples for u in ups)
    if total <= 0:
        raise InputError("updates carry no samples")
    return ups, [u.n_samples / total for u in ups]


def _check_consistent(ups):
    first = ups[0]
    for u in ups[1:]:
        if u.manifest_hash != first.manifest_hash:
            raise ProtocolError(f"client {u.client_id} sent a different weight manifest")
        if u.round != first.round:
            raise ProtocolError(f"client {u.client_id} is on round {u.round}, expected {first.round}")
        if u.n_values != first.n_values:
            raise ProtocolError(f"client {u.client_id} sent {u.n_values} weights")
    if len({u.client_id for u in ups}) != len(ups):
        raise ProtocolError("duplicate client update")


def aggregate_plain(updates) -> np.ndarray:
    """Sample-weighted mean of plaintext updates, summed in client-id order."""
    ups, w = _weights(updates)
    _check_consistent(ups)
    acc = w[0] * ups[0].values
    for wk, u in zip(w[1:], ups[1:]):
        acc = acc + wk * u.values
    return acc


def aggregate_encrypted(updates, ctx) -> list:
    """Per chunk: sum_k ct_k * (n_k / n_total), then a single rescale."""
    ups, w = _weights(updates)
    _check_consistent(ups)
    nchunks = len(ups[0].chunks)
    if any(len(u.chunks) != nchunks for u in ups):
        raise ProtocolError("clients sent different chunk counts")
    out = []
    for c in range(nchunks):
        acc = None
        for wk, u in zip(w, ups):
            ct = u.chunks[c]
            term = ckks.mul_plain(ct, ckks.encode_multiplier(np.full(ctx.slots, wk), ct, ctx))
            acc = term if acc is None else ckks.add(acc, term)
        out.append(ckks.rescale(acc, ctx))
    return out


class PqcOptimizer:
    """Named stage between decryption and distribution; identity unless a hook is set."""

    def __init__(self, hook: Callable[[FlatWeights], FlatWeights] | None = None):
        self.hook = hook
        self.calls = 0

    def __call__(self, fw: FlatWeights) -> FlatWeights:
        self.calls += 1
        return self.hook(fw) if self.hook else fw


def optimize_pqc(fw: FlatWeights, config=None) -> FlatWeights:
    return fw


@dataclass
class ServerState:
    expected: frozenset
    round: int = 0
    received: dict = field(default_factory=dict)
    n_total: int = 0

    def start(self, round_: int):
        self.round = round_
        self.received = {}
        self.n_total = 0

    def receive(self, update):
        if update.client_id not in self.expected:
            raise ProtocolError(f"update from unknown client {update.client_id}")
        if update.round != self.round:
            raise ProtocolError(f"update for round {update.round} during round {self.round}")
        if update.client_id in self.received:
            raise ProtocolError(f"client {update.client_id} reported twice")
        self.received[update.client_id] = update
        self.n_total += update.n_samples

    @property
    def complete(self) -> bool:
        return set(self.received) == set(self.expected)

    def updates(self):
        if not self.complete:
            missing = sorted(set(self.expected) - set(self.received))
            raise ProtocolError(f"aggregation withheld: missing clients {missing}")
        return [self.received[c] for c in sorted(self.received)]


# -- parties ------------------------------------------------------------------------------


@dataclass
class ClientJob:
    """Everything a client process needs; picklable."""

    client_id: int
    model_factory: Callable
    train: object
    val: object
    mode: str
    train_cfg: TrainConfig
    epochs: int
    seed: int
    ckks_params: ckks.CkksParams | None = None
    keys: object = None


def client_loop(job: ClientJob, ep: Endpoint) -> None:
    try:
        mode = ExperimentMode(job.mode)
        ctx = ckks.gen_context(job.ckks_params) if mode.fhe else None
        model = job.model_factory()
        template = flatten_weights(model)
        ep.send(Envelope(Kind.JOIN, 0, job.client_id))
        while True:
            env = ep.recv()
            if env.kind == Kind.SHUTDOWN:
                return
            if env.kind == Kind.GLOBAL_MODEL:
                values, mh = decode_global(env.payload)
                if mh != template.manifest_hash:
                    raise ProtocolError("global model manifest does not match the local model")
                upd, hist = client_round(
                    model, template.with_values(values), job.train, mode, job.train_cfg, job.epochs,
                    job.client_id, env.round, job.seed, job.val, ctx, job.keys.public if mode.fhe else None,
                )
                kind = Kind.ENCRYPTED_UPDATE if mode.fhe else Kind.PLAIN_UPDATE
                ep.send(Envelope(kind, env.round, job.client_id, encode_update(upd, ctx)))
                last = hist[-1] if hist else {}
                rep = {k: float(last[k]) for k in ("loss", "accuracy") if k in last}
                ep.send(Envelope(Kind.ROUND_REPORT, env.round, job.client_id, json.dumps(rep).encode()))
            elif env.kind == Kind.DECRYPT_REQUEST:
                agg = decode_update(env.payload, True, ctx)
                fw = decrypt_and_update(agg.chunks, job.keys, ctx, template, agg.n_values)
                ep.send(Envelope(Kind.GLOBAL_MODEL, env.round, job.client_id, encode_global(fw.values, template.manifest_hash)))
            else:
                raise ProtocolError(f"client got unexpected {env.kind.name}")
    finally:
        ep.close()


@dataclass
class RoundRecord:
    round: int
    weights: np.ndarray
    client_metrics: dict
    seconds: float
    bytes: int


@dataclass
class Server:
    endpoints: dict
    template: FlatWeights
    mode: ExperimentMode
    ctx: object = None
    public: object = None
    decrypt_all_clients: bool = False
    optimizer: PqcOptimizer = field(default_factory=PqcOptimizer)
    trace: list = field(default_factory=list)

    def _bytes(self):
        return sum(e.bytes_sent + e.bytes_received for e in self.endpoints.values())

    def _expect(self, ep, kind, round_):
        env = ep.recv()
        if env.kind != kind or env.round != round_:
            raise ProtocolError(f"expected {kind.name} for round {round_}, got {env.kind.name} round {env.round}")
        return env

    def run_round(self, round_: int, global_values: np.ndarray) -> RoundRecord:
        t0, b0 = time.perf_counter(), self._bytes()
        mh = self.template.manifest_hash
        payload = encode_global(global_values, mh)
        for cid in sorted(self.endpoints):
            self.endpoints[cid].send(Envelope(Kind.GLOBAL_MODEL, round_, SERVER_ID, payload))
        self.trace.append(("distribute", round_))
        state = ServerState(frozenset(self.endpoints))
        state.start(round_)
        metrics = {}
        kind = Kind.ENCRYPTED_UPDATE if self.mode.fhe else Kind.PLAIN_UPDATE
        for cid in sorted(self.endpoints):
            env = self._expect(self.endpoints[cid], kind, round_)
            upd = decode_update(env.payload, self.mode.fhe, self.ctx)
            if upd.client_id != cid:
                raise ProtocolError(f"connection of client {cid} carried an update from {upd.client_id}")
            state.receive(upd)
            rep = self._expect(self.endpoints[cid], Kind.ROUND_REPORT, round_)
            metrics[cid] = json.loads(rep.payload)
        self.trace.append(("collect", round_))
        if self.mode.fhe:
            agg = aggregate_encrypted(state.updates(), self.ctx)
            self.trace.append(("aggregate", round_))
            req = EncryptedUpdate(SERVER_ID, round_, state.n_total, agg, mh, self.template.values.size)
            blob = encode_update(req, self.ctx)
            holders = sorted(self.endpoints) if self.decrypt_all_clients else [min(self.endpoints)]
            for cid in holders:
                self.endpoints[cid].send(Envelope(Kind.DECRYPT_REQUEST, round_, SERVER_ID, blob))
            results = [decode_global(self._expect(self.endpoints[c], Kind.GLOBAL_MODEL, round_).payload)[0] for c in holders]
            if any(not np.array_equal(results[0], r) for r in results[1:]):
                raise ProtocolError("clients decrypted different global models")
            new = results[0]
            self.trace.append(("decrypt", round_))
        else:
            new = aggregate_plain(state.updates())
            self.trace.append(("aggregate", round_))
        new = self.optimizer(self.template.with_values(new)).values
        self.trace.append(("optimize_pqc", round_))
        return RoundRecord(round_, new, metrics, time.perf_counter() - t0, self._bytes() - b0)

    def shutdown(self):
        for cid in sorted(self.endpoints):
            try:
                self.endpoints[cid].send(Envelope(Kind.SHUTDOWN, 0, SERVER_ID))
            except QheflError:
                pass
            self.endpoints[cid].close()


def _thread_client(job, ep, errors):
    try:
        client_loop(job, ep)
    except BaseException as exc:  # surfaced to the server thread
        errors.append((job.client_id, exc))


def _process_client(job, addr, timeout):
    client_loop(job, tcp_dial(addr, timeout))


def _handshake(endpoints, listener, jobs):
    if listener is not None:
        for _ in jobs:
            ep = listener.accept()
            join = ep.recv()
            if join.kind != Kind.JOIN:
                raise ProtocolError("first message from a client must be JOIN")
            endpoints[join.sender] = ep
    else:
        for cid, ep in endpoints.items():
            join = ep.recv()
            if join.kind != Kind.JOIN or join.sender != cid:
                raise ProtocolError("bad JOIN handshake")
    if sorted(endpoints) != sorted(j.client_id for j in jobs):
        raise ProtocolError("client set does not match the job list")


def run_federated(
    jobs: list[ClientJob],
    initial: FlatWeights,
    rounds: int,
    *,
    transport: str = "inproc",
    workers: str = "thread",
    ctx=None,
    public=None,
    decrypt_all_clients: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
    start_round: int = 1,
    on_round: Callable[[RoundRecord], None] | None = None,
    optimizer: PqcOptimizer | None = None,
) -> tuple[list[RoundRecord], Server]:
    """Run ``rounds`` rounds (numbered from ``start_round``) and return per-round records."""
    if not jobs:
        raise InputError("no clients")
    mode = ExperimentMode(jobs[0].mode)
    if mode.fhe and ctx is None:
        raise ConfigError("encrypted modes need an encryption context")
    if workers == "process" and transport != "tcp":
        raise ConfigError("child-process clients need the tcp transport")
    errors: list = []
    threads, procs, endpoints = [], [], {}
    listener = None
    try:
        if transport == "inproc":
            for job in jobs:
                srv, cli = channel_pair(timeout)
                endpoints[job.client_id] = srv
                threads.append(threading.Thread(target=_thread_client, args=(job, cli, errors), daemon=True))
        elif transport == "tcp":
            listener = tcp_listen(("127.0.0.1", 0), timeout)
            for job in jobs:
                if workers == "process":
                    p = multiprocessing.get_context("spawn").Process(
                        target=_process_client, args=(job, listener.address, timeout), daemon=True
                    )
                    procs.append(p)
                else:
                    threads.append(
                        threading.Thread(
                            target=lambda j=job: _thread_client(j, tcp_dial(listener.address, timeout), errors),
                            daemon=True,
                        )
                    )
        else:
            raise ConfigError(f"unknown transport {transport!r}")
        for t in threads + procs:
            t.start()
        try:
            _handshake(endpoints, listener, jobs)
        except QheflError as exc:
            detail = f"; client error: {errors[0][1]!r}" if errors else ""
            raise RunFailed(f"client handshake failed: {exc!r}{detail}", start_round) from exc
        server = Server(endpoints, initial, mode, ctx, public, decrypt_all_clients, optimizer or PqcOptimizer())
        records = []
        values = initial.values.copy()
        for r in range(start_round, start_round + rounds):
            try:
                rec = server.run_round(r, values)
            except QheflError as exc:
                detail = f"; client error: {errors[0][1]!r}" if errors else ""
                raise RunFailed(f"round {r} failed: {exc!r}{detail}", r) from exc
            values = rec.weights
            records.append(rec)
            if on_round is not None:
                on_round(rec)
        server.shutdown()
        return records, server
    finally:
        for ep in endpoints.values():
            ep.close()
        for t in threads:
            t.join(timeout)
        for p in procs:
            p.join(timeout)
            if p.is_alive():
                p.terminate()
        if listener is not None:
            listener.close()
