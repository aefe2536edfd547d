"""Command-line entry point: ``python -m qhefl <command> ...``.

Every command writes into ``--out`` only: CSV artifacts, gnuplot-ready
``.dat``/``.gp`` pairs where a plot makes sense, and ``manifest.json``.  On
failure the command leaves its partial outputs, adds ``error.json`` and a
``FAILED`` marker, and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bench, ckks
from . import config as config_mod
from .config import MODES
from .errors import ConfigError, InputError, QheflError
from .experiment import CSV_COLUMNS, run_experiment
from .metrics import confusion_matrix, micro_macro_auc, roc_auc, roc_curves, roc_points
from .nn import load_checkpoint, save_checkpoint
from .noise import EulerAngles, angular_errors, build_j, estimate_period, fundamental_period

EXIT_FAILED = 1
EXIT_CONFIG = 2

ROUNDS_GP = """set datafile separator ','
set terminal pngcairo size 900,600
set output 'rounds.png'
set xlabel 'round'
set ylabel 'test accuracy'
plot 'rounds.csv' using 1:(strcol(3) eq 'test' ? $5 : 1/0) with linespoints title 'global'
"""

ROC_GP = """set datafile separator ','
set terminal pngcairo size 700,700
set output 'roc_{mod}.png'
set xlabel 'false positive rate'
set ylabel 'true positive rate'
plot 'roc_{mod}.csv' using 2:(strcol(1) eq 'micro' ? $3 : 1/0) with lines title 'micro', \\
     '' using 2:(strcol(1) eq 'macro' ? $3 : 1/0) with lines title 'macro', x dashtype 2 notitle
"""


def _versions() -> dict:
    return {
        "qhefl": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _json_safe(obj):
    """Non-finite floats become null so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(_json_safe(obj), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def _write_manifest(out: Path, command: str, seed, cfg_hash=None, **extra) -> None:
    body = {"command": command, "seed": seed, "config_hash": cfg_hash, "versions": _versions(), **extra}
    _write_json(out / "manifest.json", body)


def _seed(args, default=0) -> int:
    return args.seed if args.seed is not None else default


# -- keygen -------------------------------------------------------------------


def cmd_keygen(args, out: Path) -> None:
    params = ckks.PROFILES[args.profile or "paper"]
    seed = _seed(args)
    ctx = ckks.gen_context(params)
    keys = ckks.keygen(ctx, np.random.default_rng([seed, 0x4B]))
    ckks.save_keys(keys, out / "keys.npz")
    _write_manifest(
        out, "keygen", seed, profile=params.label, n=params.n,
        primes=[m.q for m in ctx.data] + [ctx.special.q], fingerprint=ctx.fingerprint.hex(),
    )


# -- bench-fhe ----------------------------------------------------------------


def _bench_grid(path):
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        return [(int(p["bit_scale"]), int(p["poly_degree"]), int(p.get("extrema_count", 1))) for p in raw["grid"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config field 'grid': expected a list of {{bit_scale, poly_degree}} objects ({exc})") from None


def cmd_bench_fhe(args, out: Path) -> None:
    grid = _bench_grid(args.config) if args.config else bench.DEFAULT_GRID
    seed = _seed(args)
    rows, summary = bench.bench_encryption_sweep(grid, repeats=args.repeats, seed=seed)
    bench.write_csv(out / "bench_sweep.csv", rows)
    cols = bench.CSV_COLUMNS[:-1]
    bench.write_dat(out / "bench_sweep.dat", cols, ([getattr(r, c) for c in cols] for r in rows if r.status == "ok"))
    (out / "bench_sweep.gp").write_text(bench.GNUPLOT_BENCH)
    _write_json(out / "bench_summary.json", summary)
    _write_manifest(out, "bench-fhe", seed, grid=[list(g) for g in grid])


# -- noise-lab ----------------------------------------------------------------


def cmd_noise_lab(args, out: Path) -> None:
    seed = _seed(args)
    rng = np.random.default_rng([seed, 0xA7])
    angles = EulerAngles(*(args.angles if args.angles else rng.uniform(-np.pi, np.pi, 3)))
    J = build_j(angles)
    omega = fundamental_period(angles)
    t = np.arange(args.periods * args.samples) * omega / args.samples
    v = rng.normal(size=3)
    v_err = v + args.perturbation * rng.normal(size=3)
    trace = angular_errors(v, v_err, t, J)
    est = estimate_period(trace.delta_az, t)
    cols = ["t", "delta_az", "delta_el"]
    with open(out / "noise_trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        w.writerows(zip(t.tolist(), trace.delta_az.tolist(), trace.delta_el.tolist()))
    bench.write_dat(out / "noise_trace.dat", cols, zip(t.tolist(), trace.delta_az.tolist(), trace.delta_el.tolist()))
    (out / "noise_trace.gp").write_text(bench.GNUPLOT_NOISE)
    _write_json(
        out / "noise_summary.json",
        {
            "angles": [angles.phi, angles.theta, angles.psi],
            "period": omega,
            "estimated_period": est,
            "relative_error": abs(est - omega) / omega,
        },
    )
    _write_manifest(out, "noise-lab", seed)


# -- metrics ------------------------------------------------------------------


def _read_predictions(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Group a predictions CSV by modality.

    Columns: ``label`` plus either ``score`` (binary, positive-class score) or
    ``score_0 .. score_{C-1}``; an optional ``modality`` column splits rows.
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        rows = list(reader)
    if "label" not in fields:
        raise InputError(f"{path}: missing 'label' column")
    score_cols = ["score"] if "score" in fields else sorted(
        (c for c in fields if c.startswith("score_")), key=lambda c: int(c.split("_", 1)[1])
    )
    if not score_cols:
        raise InputError(f"{path}: need a 'score' or 'score_<k>' columns")
    groups: dict[str, tuple[list, list]] = {}
    for i, r in enumerate(rows, start=2):
        try:
            s = [float(r[c]) for c in score_cols]
            y = int(r["label"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}:{i}: {exc}") from None
        g = groups.setdefault(r.get("modality") or "default", ([], []))
        g[0].append(s)
        g[1].append(y)
    if not groups:
        raise InputError(f"{path}: no rows")
    return {m: (np.array(s), np.array(y)) for m, (s, y) in groups.items()}


def _write_roc(path, curves: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["curve", "fpr", "tpr"])
        for name, (fpr, tpr) in curves.items():
            w.writerows([name, a, b] for a, b in zip(fpr.tolist(), tpr.tolist()))


def _write_confusion(path, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true"] + [f"pred_{j}" for j in range(cm.shape[1])])
        for i, row in enumerate(cm):
            w.writerow([i] + row.tolist())


def _emit_metrics(out: Path, mod: str, scores: np.ndarray, labels: np.ndarray) -> dict:
    if scores.shape[1] == 1:
        fpr, tpr, _ = roc_points(scores[:, 0], labels)
        _write_roc(out / f"roc_{mod}.csv", {"binary": (fpr, tpr)})
        preds = (scores[:, 0] >= 0.5).astype(int)
        summary = {"auc": roc_auc(scores[:, 0], labels)}
        n_classes = 2
    else:
        _write_roc(out / f"roc_{mod}.csv", roc_curves(scores, labels))
        micro, macro = micro_macro_auc(scores, labels)
        preds = scores.argmax(axis=1)
        summary = {"micro_auc": micro, "macro_auc": macro}
        n_classes = scores.shape[1]
    _write_confusion(out / f"confusion_{mod}.csv", confusion_matrix(preds, labels, n_classes, normalize=True))
    (out / f"roc_{mod}.gp").write_text(ROC_GP.format(mod=mod))
    summary["accuracy"] = float(np.mean(preds == labels))
    return summary


def cmd_metrics(args, out: Path) -> None:
    if not args.predictions:
        raise InputError("--predictions is required")
    summary = {mod: _emit_metrics(out, mod, s, y) for mod, (s, y) in _read_predictions(args.predictions).items()}
    _write_json(out / "metrics.json", summary)
    _write_manifest(out, "metrics", args.seed, predictions=str(args.predictions))


# -- train / simulate ---------------------------------------------------------


def _load_config(args, mode=None) -> dict:
    if not args.config:
        raise ConfigError("--config is required")
    with open(args.config) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config field '<root>': expected an object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if mode is not None:
        raw["mode"] = mode
    if getattr(args, "transport", None):
        raw.setdefault("transport", {})["backend"] = args.transport
    if getattr(args, "workers", None):
        raw.setdefault("transport", {})["workers"] = args.workers
    if args.profile:
        raw.setdefault("ckks", {})["profile"] = args.profile
    return config_mod.validate(raw)


def _resume_point(out: Path, cfg: dict, cfg_hash: str):
    """(last_round, weights, kept csv rows) if ``out`` holds a compatible partial run."""
    manifest = out / "manifest.json"
    ckpts = sorted((out / "checkpoints").glob("round_*.qwt"))
    if not manifest.exists() or not ckpts or cfg["mode"].endswith("centralized"):
        return None
    previous = json.loads(manifest.read_text())
    if previous.get("config_hash") != cfg_hash or previous.get("status") == "ok":
        return None
    fw, meta = load_checkpoint(ckpts[-1])
    last = int(meta["round"])
    rows = []
    if (out / "rounds.csv").exists():
        with open(out / "rounds.csv", newline="") as f:
            rows = [r for r in list(csv.reader(f))[1:] if r and int(r[0]) <= last]
    return last, fw.values, rows


def _run_config(cfg: dict, out: Path, command: str):
    out.mkdir(parents=True, exist_ok=True)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    for stale in ("FAILED", "error.json"):
        (out / stale).unlink(missing_ok=True)
    cfg_hash = config_mod.digest(cfg)
    point = _resume_point(out, cfg, cfg_hash)
    resume, rows = (point[:2], point[2]) if point else (None, [])
    if resume is None:
        for old in ckdir.glob("round_*.qwt"):
            old.unlink()
    meta = {"mode": cfg["mode"], "config": cfg, "resumed_from": resume[0] if resume else None}
    _write_manifest(out, command, cfg["seed"], cfg_hash, status="running", **meta)

    def on_round(rep, fw):
        rows.extend(rep.rows())
        with open(out / "rounds.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            w.writerows(rows)
        save_checkpoint(ckdir / f"round_{rep.round:04d}.qwt", fw, cfg["seed"], rep.round)

    try:
        result = run_experiment(cfg, on_round=on_round, resume=resume)
        _, probs = result.model.evaluate(result.test.features, result.test.labels)
        summary = {mod: _emit_metrics(out, mod, p, result.test.labels[mod]) for mod, p in probs.items()}
    except QheflError as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        _write_manifest(out, command, cfg["seed"], cfg_hash, status="failed", **meta)
        raise
    _write_json(out / "metrics.json", summary)
    (out / "rounds.gp").write_text(ROUNDS_GP)
    _write_manifest(out, command, cfg["seed"], cfg_hash, status="ok", last_round=result.reports[-1].round if result.reports else None, **meta)
    return result


def cmd_train(args, out: Path):
    return _run_config(_load_config(args, args.mode), out, "train")


def cmd_simulate(args, out: Path):
    if args.mode != "all":
        return _run_config(_load_config(args, args.mode), out, "simulate")
    results = {}
    for mode in MODES:
        results[mode] = _run_config(_load_config(args, mode), out / mode, "simulate")
    summary = {m: {"test_accuracy": r.reports[-1].test_accuracy if r.reports else {}} for m, r in results.items()}
    _write_json(out / "modes_summary.json", summary)
    _write_manifest(out, "simulate", _seed(args, None), modes=list(MODES))
    return results


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--profile", choices=["paper", "toy"], default=None, help="CKKS parameter profile")

    p = argparse.ArgumentParser(prog="qhefl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qhefl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("keygen", parents=[common], help="generate a CKKS key set")

    b = sub.add_parser("bench-fhe", parents=[common], help="encryption parameter sweep")
    b.add_argument("--config", help="JSON file with a 'grid' list of {bit_scale, poly_degree}")
    b.add_argument("--repeats", type=int, default=3)

    n = sub.add_parser("noise-lab", parents=[common], help="rotation error trace and its period")
    n.add_argument("--angles", type=float, nargs=3, metavar=("PHI", "THETA", "PSI"))
    n.add_argument("--periods", type=int, default=4)
    n.add_argument("--samples", type=int, default=64, help="samples per period")
    n.add_argument("--perturbation", type=float, default=0.05)

    for name, helptext in (("train", "run one configured mode"), ("simulate", "federated simulation")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--config", required=True)
        c.add_argument("--mode", choices=MODES + (["all"] if name == "simulate" else []))
        c.add_argument("--transport", choices=["inproc", "tcp"])
        c.add_argument("--workers", choices=["thread", "process"])

    m = sub.add_parser("metrics", parents=[common], help="ROC/AUC and confusion matrices from a predictions CSV")
    m.add_argument("--predictions", required=True, type=Path)
    return p


COMMANDS = {
    "keygen": cmd_keygen,
    "bench-fhe": cmd_bench_fhe,
    "noise-lab": cmd_noise_lab,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except (QheflError, OSError) as exc:
        record = {"command": args.command, "type": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "round", None) is not None:
            record["round"] = exc.round
        if out.is_dir():
            _write_json(out / "error.json", record)
            (out / "FAILED").write_text(f"{record['type']}: {record['message']}\n")
        print(f"qhefl {args.command}: {record['type']}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILED
    return 0
