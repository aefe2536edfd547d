"""Small numpy neural-network toolkit with explicit backward passes.

Layers own ``params`` and ``grads`` dicts with matching keys; ``backward``
accumulates into ``grads`` and returns the gradient w.r.t. the layer input.
Dense weights are stored (in, out) so ``y = x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CapacityError, ConfigError, ContractViolation, InputError, ParseError
from .quantum import MAX_QUBITS, PqcConfig, quantum_layer_forward, shift_jacobians

# -- functional kernels ------------------------------------------------------


def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0]:
        raise ContractViolation(f"dense expects {W.shape[0]} inputs, got {x.shape[-1]}")
    return x @ W + b


def dense_backward(x, W, grad):
    """Returns (dx, dW, db) for y = x @ W + b with x of shape (B, in)."""
    return grad @ W.T, x.T @ grad, grad.sum(axis=0)


def conv2d_forward(x, K, b):
    """Valid, stride-1 cross-correlation.  x (B,C,H,W), K (O,C,k,k)."""
    if x.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ContractViolation(f"conv2d expects (B,{K.shape[1]},H,W) input, got {x.shape}")
    k = K.shape[-1]
    if x.shape[2] < k or x.shape[3] < k:
        raise ContractViolation("input smaller than the kernel")
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", win, K, optimize=True) + b[None, :, None, None]


def conv2d_backward(x, K, grad):
    k = K.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    dK = np.einsum("bchwij,bohw->ocij", win, grad, optimize=True)
    db = grad.sum(axis=(0, 2, 3))
    gpad = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gwin = sliding_window_view(gpad, (k, k), axis=(2, 3))
    dx = np.einsum("bohwij,ocij->bchw", gwin, K[:, :, ::-1, ::-1], optimize=True)
    return dx, dK, db


def maxpool_forward(x, k):
    """Non-overlapping k x k max pooling; trailing rows/cols that don't fill a window are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise ContractViolation("input smaller than the pooling window")
    xc = x[:, :, : Ho * k, : Wo * k].reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = xc.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(x_shape, k, arg, grad):
    B, C, H, W = x_shape
    Ho, Wo = grad.shape[2:]
    flat = np.zeros((B, C, Ho, Wo, k * k))
    np.put_along_axis(flat, arg[..., None], grad[..., None], axis=-1)
    blocks = flat.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
    dx = np.zeros(x_shape)
    dx[:, :, : Ho * k, : Wo * k] = blocks
    return dx


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, grad, axis=-1):
    return p * (grad - (grad * p).sum(axis=axis, keepdims=True))


def cross_entropy(probs, label):
    """-log p[label]; vectorised over a leading batch axis when given arrays."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.ndim == 1:
        return float(-np.log(probs[int(label)]))
    return -np.log(probs[np.arange(len(label)), label])


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    B = len(labels)
    loss = float(np.mean(-np.log(np.maximum(p[np.arange(B), labels], 1e-300))))
    g = p.copy()
    g[np.arange(B), labels] -= 1.0
    return loss, g / B, p


def mha_forward(q_in, k_in, v_in, params, heads):
    """Multi-head scaled dot-product attention on (B, T, d_model) inputs.

    ``params`` holds Wq, bq, Wk, bk, Wv, bv, Wo, bo.  Returns (out, cache).
    """
    B, T, dm = q_in.shape
    if dm % heads:
        raise ConfigError(f"d_model={dm} is not divisible by {heads} heads")
    dk = dm // heads

    def split(t):
        return t.reshape(B, -1, heads, dk).transpose(0, 2, 1, 3)

    Q = split(q_in @ params["Wq"] + params["bq"])
    K = split(k_in @ params["Wk"] + params["bk"])
    V = split(v_in @ params["Wv"] + params["bv"])
    A = softmax(Q @ K.transpose(0, 1, 3, 2) / math.sqrt(dk))
    ctx = (A @ V).transpose(0, 2, 1, 3).reshape(B, T, dm)
    out = ctx @ params["Wo"] + params["bo"]
    cache = dict(q_in=q_in, k_in=k_in, v_in=v_in, Q=Q, K=K, V=V, A=A, ctx=ctx, heads=heads)
    return out, cache


def mha_backward(grad, cache, params):
    """Returns (dq_in, dk_in, dv_in, grads-dict)."""
    q_in, k_in, v_in = cache["q_in"], cache["k_in"], cache["v_in"]
    Q, K, V, A, ctx = cache["Q"], cache["K"], cache["V"], cache["A"], cache["ctx"]
    B, T, dm = q_in.shape
    heads = cache["heads"]
    dk = dm // heads
    g = {}
    g["Wo"] = np.einsum("btd,bte->de", ctx, grad)
    g["bo"] = grad.sum(axis=(0, 1))
    dctx = (grad @ params["Wo"].T).reshape(B, T, heads, dk).transpose(0, 2, 1, 3)
    dA = dctx @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dctx
    dS = softmax_backward(A, dA) / math.sqrt(dk)
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, -1, dm)

    dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
    g["Wq"] = np.einsum("btd,bte->de", q_in, dQ)
    g["bq"] = dQ.sum(axis=(0, 1))
    g["Wk"] = np.einsum("btd,bte->de", k_in, dK)
    g["bk"] = dK.sum(axis=(0, 1))
    g["Wv"] = np.einsum("btd,bte->de", v_in, dV)
    g["bv"] = dV.sum(axis=(0, 1))
    return dQ @ params["Wq"].T, dK @ params["Wk"].T, dV @ params["Wv"].T, g


# -- layers ------------------------------------------------------------------


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _glorot(rng, fan_in, fan_out, shape):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, activation=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params = {"W": _glorot(rng, n_in, n_out, (n_in, n_out)), "b": np.zeros(n_out)}
        self._init_grads()
        self.act = Activation(activation) if activation else None

    def forward(self, x):
        self._x = x
        y = dense_forward(x, self.params["W"], self.params["b"])
        return self.act.forward(y) if self.act else y

    def backward(self, grad):
        if self.act:
            grad = self.act.backward(grad)
        dx, dW, db = dense_backward(self._x, self.params["W"], grad)
        self.grads["W"] += dW
        self.grads["b"] += db
        return dx


class Activation(Layer):
    KINDS = ("relu", "tanh")

    def __init__(self, kind="relu"):
        super().__init__()
        if kind not in self.KINDS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        if self.kind == "relu":
            self._mask = x > 0
            return x * self._mask
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        if self.kind == "relu":
            return grad * self._mask
        return grad * (1.0 - self._y**2)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, rng=None, activation="relu"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params = {
            "K": rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel)),
            "b": np.zeros(out_ch),
        }
        self._init_grads()
        self.act = Activation(activation) if activation else None

    def forward(self, x):
        self._x = x
        y = conv2d_forward(x, self.params["K"], self.params["b"])
        return self.act.forward(y) if self.act else y

    def backward(self, grad):
        if self.act:
            grad = self.act.backward(grad)
        dx, dK, db = conv2d_backward(self._x, self.params["K"], grad)
        self.grads["K"] += dK
        self.grads["b"] += db
        return dx


class MaxPool2d(Layer):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        self._shape = x.shape
        out, self._arg = maxpool_forward(x, self.k)
        return out

    def backward(self, grad):
        return maxpool_backward(self._shape, self.k, self._arg, grad)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class MultiHeadAttention(Layer):
    """Self-attention over (B, T, d_model) token sequences."""

    def __init__(self, d_model, heads, rng=None):
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.heads = heads
        self.params = {}
        for nm in ("q", "k", "v", "o"):
            self.params["W" + nm] = _glorot(rng, d_model, d_model, (d_model, d_model))
            self.params["b" + nm] = np.zeros(d_model)
        self._init_grads()

    def forward(self, x):
        out, self._cache = mha_forward(x, x, x, self.params, self.heads)
        return out

    def backward(self, grad):
        dq, dk, dv, g = mha_backward(grad, self._cache, self.params)
        for k, v in g.items():
            self.grads[k] += v
        return dq + dk + dv


class QuantumLayer(Layer):
    """Angle encoding + layered RX/CNOT circuit + per-wire <Z> readout."""

    def __init__(self, qubits, layers, rng=None, init_scale=0.1):
        super().__init__()
        if qubits > MAX_QUBITS:
            raise CapacityError(f"{qubits} qubits exceed the cap of {MAX_QUBITS}")
        rng = rng or np.random.default_rng(0)
        self.params = {"theta": rng.normal(0.0, init_scale, size=(layers, qubits))}
        self._init_grads()

    def forward(self, x):
        self._x = x
        return quantum_layer_forward(x, PqcConfig(self.params["theta"]))

    def backward(self, grad):
        _, dth, dx = shift_jacobians(self._x, self.params["theta"])
        self.grads["theta"] += np.einsum("blij,bj->li", dth, grad)
        return np.einsum("bij,bj->bi", dx, grad)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self, prefix=""):
        return named_parameters(self.layers, prefix)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def named_parameters(layers, prefix=""):
    """[(name, param, grad)] in a stable order for a list of layers."""
    out = []
    for i, layer in enumerate(layers):
        p = f"{prefix}{i}."
        if isinstance(layer, Sequential):
            out.extend(layer.named_parameters(p))
            continue
        for k in layer.params:
            out.append((p + k, layer.params[k], layer.grads[k]))
    return out


# -- model specs -----------------------------------------------------------------


def build_layers(spec: list[dict], rng) -> list[Layer]:
    """Instantiate a layer list from dicts like {"type": "dense", "in": 4, "out": 2}."""
    layers = []
    for s in spec:
        kind = s["type"]
        if kind == "dense":
            layers.append(Dense(s["in"], s["out"], rng, s.get("activation")))
        elif kind == "conv2d":
            layers.append(Conv2d(s.get("in_channels", 1), s["channels"], s["kernel"], rng, s.get("activation", "relu")))
        elif kind == "maxpool":
            layers.append(MaxPool2d(s["k"]))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "activation":
            layers.append(Activation(s["kind"]))
        elif kind == "mha":
            if "d_k" in s and s["d_k"] * s["heads"] != s["d_model"]:
                raise ConfigError("d_k * heads must equal d_model")
            layers.append(MultiHeadAttention(s["d_model"], s["heads"], rng))
        elif kind == "quantum":
            layers.append(QuantumLayer(s["d"], s["L"], rng))
        else:
            raise ConfigError(f"unknown layer type {kind!r}")
    return layers


class Classifier:
    """Sequential body followed by a softmax head, for one-modality datasets."""

    def __init__(self, layers, key="x"):
        self.body = Sequential(layers)
        self.key = key

    def named_parameters(self):
        return self.body.named_parameters()

    def zero_grad(self):
        self.body.zero_grad()

    def logits(self, features):
        return {self.key: self.body.forward(features[self.key])}

    def loss_and_grad(self, features, labels):
        logits = self.body.forward(features[self.key])
        loss, g, p = softmax_xent(logits, labels[self.key])
        self.body.backward(g)
        return loss, {self.key: p.argmax(axis=1)}

    def evaluate(self, features, labels):
        logits = self.logits(features)
        loss, _, p = softmax_xent(logits[self.key], labels[self.key])
        return loss, {self.key: p}


# -- weights -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlatWeights:
    values: np.ndarray
    manifest: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.manifest)
        if total != self.values.size:
            raise ContractViolation(f"manifest describes {total} values, got {self.values.size}")

    @property
    def manifest_hash(self) -> bytes:
        h = hashlib.sha256(json.dumps([[n, list(s)] for n, s in self.manifest]).encode())
        return h.digest()[:16]

    def __len__(self):
        return self.values.size

    def with_values(self, values) -> "FlatWeights":
        return FlatWeights(np.asarray(values, dtype=np.float64).copy(), self.manifest)


def flatten_weights(model) -> FlatWeights:
    named = model.named_parameters()
    manifest = tuple((n, tuple(p.shape)) for n, p, _ in named)
    values = np.concatenate([p.ravel() for _, p, _ in named]) if named else np.zeros(0)
    return FlatWeights(values.astype(np.float64), manifest)


def flatten_grads(model) -> np.ndarray:
    return np.concatenate([g.ravel() for _, _, g in model.named_parameters()])


def load_weights(model, fw: FlatWeights):
    named = model.named_parameters()
    manifest = tuple((n, tuple(p.shape)) for n, p, _ in named)
    if manifest != fw.manifest:
        raise ContractViolation("weight manifest does not match the model")
    off = 0
    for _, p, _ in named:
        k = p.size
        p[...] = fw.values[off : off + k].reshape(p.shape)
        off += k
    return model


CKPT_MAGIC = b"QWT1"


def save_checkpoint(path, fw: FlatWeights, seed: int, round_: int) -> None:
    """Manifest header (JSON) followed by little-endian float64 weights."""
    head = json.dumps({"manifest": [[n, list(s)] for n, s in fw.manifest], "seed": seed, "round": round_}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(head)) + head)
        f.write(fw.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[FlatWeights, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC or len(blob) < 8:
        raise ParseError("not a weights checkpoint")
    (hl,) = struct.unpack_from("<I", blob, 4)
    meta = json.loads(blob[8 : 8 + hl])
    values = np.frombuffer(blob, dtype="<f8", offset=8 + hl).astype(np.float64)
    manifest = tuple((n, tuple(s)) for n, s in meta.pop("manifest"))
    return FlatWeights(values, manifest), meta


# -- optimisation --------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    plateau_lr: float = 3e-3
    plateau_patience: int = 3
    plateau_delta: float = 1e-4
    batch_size: int = 16
    epochs: int = 25
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr <= 0 or self.plateau_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def sgd_step(w, g, lr):
    if np.shape(w) != np.shape(g):
        raise ContractViolation("weight / gradient shape mismatch")
    return w - lr * g


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(w, g, lr, state: AdamState, key="w"):
    """One Adam update for one array; call ``state.t += 1`` once per step beforehand."""
    if np.shape(w) != np.shape(g):
        raise ContractViolation("weight / gradient shape mismatch")
    if state.t < 1:
        raise ContractViolation("advance AdamState.t before stepping")
    m = state.m.get(key, np.zeros_like(g))
    v = state.v.get(key, np.zeros_like(g))
    m = state.beta1 * m + (1 - state.beta1) * g
    v = state.beta2 * v + (1 - state.beta2) * g * g
    state.m[key], state.v[key] = m, v
    m_hat = m / (1 - state.beta1**state.t)
    v_hat = v / (1 - state.beta2**state.t)
    return w - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _apply_update(model, cfg: TrainConfig, lr: float, state: AdamState):
    named = model.named_parameters()
    if cfg.optimizer == "adam":
        state.t += 1
        for name, p, g in named:
            p[...] = adam_step(p, g, lr, state, name)
    else:
        for _, p, g in named:
            p[...] = sgd_step(p, g, lr)


def _accuracy(preds: dict, labels: dict) -> float:
    accs = [float(np.mean(preds[k] == labels[k])) for k in preds]
    return float(np.mean(accs))


def train_local(model, dataset, cfg: TrainConfig, val=None, rng=None, on_epoch=None):
    """Mini-batch training; returns (FlatWeights, history).

    ``dataset``/``val`` provide ``features`` and ``labels`` dicts plus
    ``__len__`` and ``subset(idx)``.  The learning rate is bumped to
    ``cfg.plateau_lr`` once validation loss improves by less than
    ``cfg.plateau_delta`` for ``cfg.plateau_patience`` consecutive epochs.
    ``on_epoch(record)`` is called after every epoch.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = AdamState()
    lr = cfg.lr
    history = []
    best_val, stall = math.inf, 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot_loss, tot_correct = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = dataset.subset(idx)
            model.zero_grad()
            loss, preds = model.loss_and_grad(batch.features, batch.labels)
            _apply_update(model, cfg, lr, state)
            tot_loss += loss * len(idx)
            tot_correct += _accuracy(preds, batch.labels) * len(idx)
        rec = {"epoch": epoch, "loss": tot_loss / n, "accuracy": tot_correct / n, "lr": lr}
        if val is not None and len(val):
            vloss, _ = model.evaluate(val.features, val.labels)
            rec["val_loss"] = vloss
            if best_val - vloss < cfg.plateau_delta:
                stall += 1
            else:
                stall = 0
            best_val = min(best_val, vloss)
            if stall >= cfg.plateau_patience and lr != cfg.plateau_lr:
                lr = cfg.plateau_lr
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return flatten_weights(model), history
