"""Multimodal mixture of quantum experts.

Each modality has one expert: a classical encoder squeezing the input to d
features followed by a d-qubit circuit (or a dense+tanh stand-in for the
classical baselines).  The m expert outputs are treated as m tokens, fused by
self-attention, flattened and mapped to m gate logits.  The softmax gate mixes
the expert outputs into one d-vector that every modality head reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, InputError
from .nn import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    MaxPool2d,
    MultiHeadAttention,
    QuantumLayer,
    Sequential,
    named_parameters,
    softmax,
    softmax_backward,
    softmax_xent,
)


@dataclass
class Expert:
    modality: str
    encoder: Sequential
    head: Layer
    input_shape: tuple[int, ...]

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ContractViolation(f"{self.modality} expert expects {self.input_shape}, got {x.shape[1:]}")
        return self.head.forward(self.encoder.forward(x))

    def backward(self, grad):
        return self.encoder.backward(self.head.backward(grad))

    @property
    def layers(self):
        return [self.encoder, self.head]


def expert_forward(x, expert: Expert) -> np.ndarray:
    return expert.forward(np.asarray(x, dtype=np.float64))


class GatingNetwork:
    """Self-attention over expert tokens, then a linear map to m logits."""

    def __init__(self, m, d, heads, rng):
        self.m, self.d = m, d
        self.mha = MultiHeadAttention(d, heads, rng)
        self.fc = Dense(m * d, m, rng)

    @property
    def layers(self):
        return [self.mha, self.fc]

    def forward(self, tokens):
        B = tokens.shape[0]
        fused = self.mha.forward(tokens)
        self.g = gate(fused.reshape(B, -1), self.fc)
        return self.g

    def backward(self, dg):
        dlogits = softmax_backward(self.g, dg)
        dphi = self.fc.backward(dlogits)
        return self.mha.backward(dphi.reshape(-1, self.m, self.d))


def gate(fused, fc: Dense) -> np.ndarray:
    """softmax(W_g phi + b) row-wise."""
    return softmax(fc.forward(fused), axis=-1)


def combine(g, outputs) -> np.ndarray:
    """sum_j g[:, j] * outputs[j], accumulated in expert order."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
        outputs = [np.asarray(e)[None, :] for e in outputs]
        return combine(g, outputs)[0]
    if g.shape[-1] != len(outputs):
        raise ContractViolation(f"{g.shape[-1]} gate weights for {len(outputs)} experts")
    y = g[:, 0:1] * outputs[0]
    for j in range(1, len(outputs)):
        y = y + g[:, j : j + 1] * outputs[j]
    return y


class MqmoeModel:
    def __init__(self, experts: list[Expert], gating: GatingNetwork, heads: dict[str, Sequential]):
        if len(experts) != gating.m:
            raise ConfigError("gate size must equal the number of experts")
        self.experts = experts
        self.gating = gating
        self.heads = heads

    @property
    def modalities(self):
        return [e.modality for e in self.experts]

    def named_parameters(self):
        out = []
        for j, e in enumerate(self.experts):
            out += named_parameters(e.layers, f"expert{j}.")
        out += named_parameters(self.gating.layers, "gate.")
        for k, h in self.heads.items():
            out += named_parameters([h], f"head.{k}.")
        return out

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def forward(self, features, gate_override=None):
        """Per-modality logits.  ``gate_override`` replaces the learned gate (B, m)."""
        missing = [e.modality for e in self.experts if e.modality not in features]
        if missing:
            raise InputError(f"sample lacks modalities {missing}")
        self._outs = [expert_forward(features[e.modality], e) for e in self.experts]
        tokens = np.stack(self._outs, axis=1)
        g = self.gating.forward(tokens)
        if gate_override is not None:
            g = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), g.shape)
        self._override = gate_override is not None
        self._g = g
        self._y = combine(g, self._outs)
        return {k: h.forward(self._y) for k, h in self.heads.items()}

    def backward(self, dlogits: dict):
        dy = sum(self.heads[k].backward(dlogits[k]) for k in self.heads)
        de = [self._g[:, j : j + 1] * dy for j in range(len(self.experts))]
        if not self._override:
            dg = np.stack([np.sum(dy * e, axis=1) for e in self._outs], axis=1)
            dtok = self.gating.backward(dg)
            de = [de[j] + dtok[:, j] for j in range(len(de))]
        for e, g in zip(self.experts, de):
            e.backward(g)

    def loss_and_grad(self, features, labels, gate_override=None):
        logits = self.forward(features, gate_override)
        total, dlog, preds = 0.0, {}, {}
        for k, z in logits.items():
            loss, dlog[k], p = softmax_xent(z, labels[k])
            total += loss
            preds[k] = p.argmax(axis=1)
        self.backward(dlog)
        return total, preds

    def evaluate(self, features, labels):
        logits = self.forward(features)
        total, probs = 0.0, {}
        for k, z in logits.items():
            loss, _, probs[k] = softmax_xent(z, labels[k])
            total += loss
        return total, probs


def mqmoe_forward(model: MqmoeModel, sample, gate_override=None) -> dict:
    return model.forward(sample, gate_override)


def mqmoe_backward(model: MqmoeModel, sample, labels) -> list[tuple[str, np.ndarray]]:
    """Total loss gradient for every parameter, as (name, grad) pairs."""
    model.zero_grad()
    model.loss_and_grad(sample, labels)
    return [(n, g.copy()) for n, _, g in model.named_parameters()]


# -- construction -----------------------------------------------------------------

DEFAULT_ARCH = {
    "qubits": 6,
    "layers": 2,
    "heads": 2,
    "seq_hidden": 16,
    "img_channels": 4,
    "kernel": 3,
    "pool": 2,
    "head_hidden": 0,
}


def _head(d, classes, hidden, rng):
    if hidden:
        return Sequential([Dense(d, hidden, rng, "relu"), Dense(hidden, classes, rng)])
    return Sequential([Dense(d, classes, rng)])


def build_expert(modality, input_shape, arch, rng, quantum=True) -> Expert:
    d = arch["qubits"]
    if len(input_shape) == 1:
        enc = Sequential([Dense(input_shape[0], arch["seq_hidden"], rng, "relu"), Dense(arch["seq_hidden"], d, rng)])
    elif len(input_shape) == 3:
        c, h, w = input_shape
        k, p = arch["kernel"], arch["pool"]
        flat = arch["img_channels"] * ((h - k + 1) // p) * ((w - k + 1) // p)
        enc = Sequential(
            [Conv2d(c, arch["img_channels"], k, rng, "relu"), MaxPool2d(p), Flatten(), Dense(flat, d, rng)]
        )
    else:
        raise ConfigError(f"no encoder for input shape {input_shape}")
    head = QuantumLayer(d, arch["layers"], rng) if quantum else Sequential([Dense(d, d, rng), Activation("tanh")])
    return Expert(modality, enc, head, tuple(input_shape))


def build_mqmoe(input_shapes: dict, classes: dict, arch=None, seed=0, quantum=True) -> MqmoeModel:
    """One expert and one output head per modality, in ``input_shapes`` order."""
    arch = {**DEFAULT_ARCH, **(arch or {})}
    if arch["qubits"] % arch["heads"]:
        raise ConfigError("qubit count must be divisible by the attention head count")
    rng = np.random.default_rng([seed, 0xE5])
    experts = [build_expert(m, shp, arch, rng, quantum) for m, shp in input_shapes.items()]
    gating = GatingNetwork(len(experts), arch["qubits"], arch["heads"], rng)
    heads = {m: _head(arch["qubits"], classes[m], arch["head_hidden"], rng) for m in input_shapes}
    return MqmoeModel(experts, gating, heads)
