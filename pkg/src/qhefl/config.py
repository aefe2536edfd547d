"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .ckks import PROFILES, CkksParams
from .errors import ConfigError

MODES = ["classical-centralized", "quantum-centralized", "classical-fl", "qfl", "fl-fhe", "qfl-fhe"]

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["mode", "seed"],
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": MODES},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "synthetic": {"type": "object"},
                "csv": {"type": "string"},
                "cache": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "qubits": {"type": "integer", "minimum": 1, "maximum": 12},
                "layers": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "seq_hidden": {"type": "integer", "minimum": 1},
                "img_channels": {"type": "integer", "minimum": 1},
                "kernel": {"type": "integer", "minimum": 1},
                "pool": {"type": "integer", "minimum": 1},
                "head_hidden": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "plateau_lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "optimizer": {"enum": ["adam", "sgd"]},
            },
        },
        "fl": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "clients": {"type": "integer", "minimum": 1},
                "rounds": {"type": "integer", "minimum": 0},
                "epochs_per_client": {"type": "integer", "minimum": 0},
                "partition": {"enum": ["iid", "label-skew"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "decrypt_all_clients": {"type": "boolean"},
            },
        },
        "ckks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "profile": {"enum": ["paper", "toy", "custom"]},
                "n": {"type": "integer", "minimum": 4},
                "coeff_modulus_bits": {"type": "array", "items": {"type": "integer", "minimum": 10, "maximum": 61}},
                "scale_bits": {"type": "integer", "minimum": 1},
            },
        },
        "transport": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["inproc", "tcp"]},
                "workers": {"enum": ["thread", "process"]},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "test_fraction": 0.2,
    "dataset": {"synthetic": {}},
    "model": {},
    "train": {"lr": 1e-3, "plateau_lr": 3e-3, "batch_size": 16, "epochs": 25, "optimizer": "adam"},
    "fl": {
        "clients": 10,
        "rounds": 20,
        "epochs_per_client": 10,
        "partition": "iid",
        "alpha": 0.5,
        "decrypt_all_clients": False,
    },
    "ckks": {"profile": "paper"},
    "transport": {"backend": "inproc", "workers": "thread", "timeout": 30.0},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> dict:
    """Schema-check ``raw`` and fill defaults; errors name the offending field."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field '{where}': {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if cfg["ckks"]["profile"] == "custom":
        missing = [k for k in ("n", "coeff_modulus_bits", "scale_bits") if k not in cfg["ckks"]]
        if missing:
            raise ConfigError(f"config field 'ckks': custom profile needs {missing}")
    ds = cfg["dataset"]
    # the default synthetic section yields to an explicitly named source
    if "synthetic" not in raw.get("dataset", {}) and len(ds) > 1:
        ds.pop("synthetic")
    if len(ds) != 1:
        raise ConfigError("config field 'dataset': give exactly one of synthetic, csv, cache")
    return cfg


def load(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate(raw)


def ckks_params(cfg: dict) -> CkksParams:
    c = cfg["ckks"]
    if c["profile"] != "custom":
        return PROFILES[c["profile"]]
    return CkksParams(c["n"], tuple(c["coeff_modulus_bits"]), 2.0 ** c["scale_bits"])


def digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
