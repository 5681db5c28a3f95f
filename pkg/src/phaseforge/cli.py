"""Command-line entry point.

One binary, nine subcommands: gen-data, split, train, tune, sweep, predict,
decode, eval, render. Every command is deterministic given its flags and
seeds; manifests record inputs, outputs, and content hashes so a run can be
audited later. Exit codes are part of the interface:

    2  configuration or flag error
    3  dataset generation failure
    4  training divergence
    5  missing checkpoint
    6  prediction/truth alignment failure

Temperatures are kelvin everywhere; `--celsius` converts flag values on the
way in. `--t` accepts a single value or an inclusive `start:stop:step` sweep.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import builtin_model_path
from .dataio import (
    Dataset,
    DatasetFormatError,
    ElementSet,
    PhaseVocabulary,
    atomic_write_text,
    load_dataset,
    make_splits,
    normalize_T_array,
    save_dataset,
)
from .decode import DecodeConfig, DecodeError, decode, ensemble_probs
from .elemgraph import FeatureBuilder, PropertyTableError, load_properties
from .evaluation import (
    EvaluationError,
    check_alignment,
    dense_grid,
    evaluate,
    percent,
    render_map,
)
from .gatcore import ModelError, forward, load_checkpoint, save_checkpoint
from .losses import LossConfig, LossConfigError
from .thermo_oracle import (
    EquilibriumError,
    Equilibrator,
    ModelConfigError,
    all_binaries,
    all_ternaries,
    generate_dataset,
    load_models,
)
from .train import (
    LAMBDA_GRID,
    TrainConfig,
    TrainError,
    lambda_sweep,
    random_search,
    train_one,
)

EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_DIVERGENCE = 4
EXIT_MISSING_CHECKPOINT = 5
EXIT_ALIGNMENT = 6

PRED_TAG = "#phaseforge-pred-v1"
FORWARD_CHUNK = 2048


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


# -- small helpers ---------------------------------------------------------------


def parse_t_spec(spec: str, celsius: bool = False) -> np.ndarray:
    """Single kelvin value, or inclusive start:stop:step sweep."""
    parts = spec.split(":")
    if len(parts) == 1:
        values = [float(parts[0])]
    elif len(parts) == 3:
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError(f"step must be positive in {spec!r}")
        if stop < start:
            raise ValueError(f"empty temperature range {spec!r}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        values = [start + k * step for k in range(count)]
    else:
        raise ValueError(f"bad temperature spec {spec!r}; use V or a:b:s")
    arr = np.asarray(values, dtype=np.float64)
    if celsius:
        arr = arr + 273.15
    return arr


def parse_system(spec: str) -> tuple[str, ...]:
    parts = tuple(p for p in spec.split("-") if p)
    if not 2 <= len(parts) <= 4:
        raise ValueError(f"system {spec!r} needs 2 to 4 elements")
    return parts


def file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(
    path: Path,
    command: str,
    config: dict,
    inputs: dict[str, str],
    artifacts: list[Path],
) -> None:
    base = path.parent
    payload = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()
        ).hexdigest(),
        "inputs": inputs,
        "artifacts": {
            str(p.relative_to(base)): file_sha(p) for p in sorted(artifacts)
        },
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _labels_of(masks: np.ndarray, k: int) -> np.ndarray:
    bits = np.arange(k, dtype=np.int64)
    return (np.asarray(masks, np.int64)[:, None] >> bits[None, :] & 1).astype(bool)


def _masks_of(labels: np.ndarray) -> np.ndarray:
    k = np.arange(labels.shape[1], dtype=np.int64)
    return (np.asarray(labels, bool).astype(np.int64) << k[None, :]).sum(axis=1)


# -- prediction file format -------------------------------------------------------


@dataclass
class Predictions:
    elements: ElementSet
    vocab: PhaseVocabulary
    x: np.ndarray
    t: np.ndarray
    probs: np.ndarray
    masks: np.ndarray
    flags: list[str]
    t_min: float
    t_max: float
    decoded: bool

    def labels(self) -> np.ndarray:
        return _labels_of(self.masks, self.vocab.size)


def save_predictions(path: Path, pred: Predictions) -> None:
    width = (pred.vocab.size + 3) // 4
    lines = [
        f"{PRED_TAG} elements={','.join(pred.elements.names)} "
        f"phases={','.join(pred.vocab.names)} "
        f"Tmin={pred.t_min:.6f} Tmax={pred.t_max:.6f} "
        f"decoded={1 if pred.decoded else 0}"
    ]
    for i in range(len(pred.t)):
        parts = [f"{v:.9f}" for v in pred.x[i]]
        parts.append(f"{pred.t[i]:.6f}")
        parts.append(format(int(pred.masks[i]), f"0{width}x"))
        parts.extend(f"{v:.9f}" for v in pred.probs[i])
        parts.append(pred.flags[i] if pred.flags[i] else "-")
        lines.append(" ".join(parts))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_predictions(path: Path) -> Predictions:
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"prediction file {path} not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(PRED_TAG + " "):
        raise CliError(EXIT_CONFIG, f"{path}: missing {PRED_TAG} header")
    fields = dict(
        kv.split("=", 1) for kv in lines[0][len(PRED_TAG) + 1 :].split()
    )
    try:
        elements = ElementSet(tuple(fields["elements"].split(",")))
        vocab = PhaseVocabulary(tuple(fields["phases"].split(",")))
        t_min = float(fields["Tmin"])
        t_max = float(fields["Tmax"])
        decoded = fields["decoded"] == "1"
    except (KeyError, DatasetFormatError) as exc:
        raise CliError(EXIT_CONFIG, f"{path}: bad header ({exc})") from exc
    c, k = elements.size, vocab.size
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    want = c + 1 + 1 + k + 1
    x = np.empty((len(rows), c))
    t = np.empty(len(rows))
    probs = np.empty((len(rows), k))
    masks = np.empty(len(rows), dtype=np.int64)
    flags: list[str] = []
    for i, parts in enumerate(rows):
        if len(parts) != want:
            raise CliError(
                EXIT_CONFIG,
                f"{path}:{i + 2}: expected {want} fields, got {len(parts)}",
            )
        x[i] = [float(v) for v in parts[:c]]
        t[i] = float(parts[c])
        masks[i] = int(parts[c + 1], 16)
        probs[i] = [float(v) for v in parts[c + 2 : c + 2 + k]]
        flags.append("" if parts[-1] == "-" else parts[-1])
    return Predictions(
        elements, vocab, x, t, probs, masks, flags, t_min, t_max, decoded
    )


# -- thresholds and run directories ------------------------------------------------


def save_thresholds(
    path: Path, vocab: PhaseVocabulary, t: np.ndarray, flagged: np.ndarray
) -> None:
    lines = ["# phase threshold flagged"]
    for k, name in enumerate(vocab.names):
        lines.append(f"{name} {t[k]:.6f} {1 if flagged[k] else 0}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_thresholds(path: Path, vocab: PhaseVocabulary) -> np.ndarray:
    values = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, value, _ = line.split()
        values[name] = float(value)
    missing = [n for n in vocab.names if n not in values]
    if missing:
        raise CliError(EXIT_CONFIG, f"{path}: missing thresholds for {missing}")
    return np.array([values[n] for n in vocab.names])


def seed_dirs(run_dir: Path) -> list[Path]:
    return sorted(
        (p for p in run_dir.glob("seed*") if p.is_dir()),
        key=lambda p: int(p.name[4:]),
    )


def _jobs_from(args: argparse.Namespace) -> int:
    if getattr(args, "jobs", None):
        return max(1, args.jobs)
    env = os.environ.get("PHASEFORGE_JOBS", "")
    return max(1, int(env)) if env.isdigit() and env != "0" else 1


# -- gen-data / split ---------------------------------------------------------------


def _subsystems_from(args: argparse.Namespace, ms) -> list[tuple[str, ...]]:
    subs: list[tuple[str, ...]] = []
    if args.binaries:
        if args.binaries == "all":
            subs += all_binaries(ms.elements)
        else:
            subs += [parse_system(s) for s in args.binaries.split(",")]
    if args.ternaries:
        if args.ternaries == "all":
            subs += all_ternaries(ms.elements)
        else:
            subs += [parse_system(s) for s in args.ternaries.split(",")]
    if args.quaternary:
        subs.append(tuple(ms.elements.names))
    if not subs:
        raise CliError(
            EXIT_CONFIG, "nothing to generate: give --binaries/--ternaries/--quaternary"
        )
    return subs


def cmd_gen_data(args: argparse.Namespace) -> int:
    ms = load_models(args.models)
    subs = _subsystems_from(args, ms)
    temps = parse_t_spec(args.t, args.celsius) if args.t else []
    iso = (
        parse_t_spec(args.isothermal_t, args.celsius).tolist()
        if args.isothermal_t
        else None
    )
    try:
        ds = generate_dataset(
            ms,
            comp_step=args.comp_step,
            t_schedule=list(temps),
            subsystems=subs,
            isothermal_t=iso,
            grid_step=args.grid_step,
        )
    except (EquilibriumError, RuntimeError) as exc:
        raise CliError(EXIT_GENERATION, f"generation failed: {exc}") from exc
    if not args.no_split:
        ds = make_splits(ds, seed=args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "gen-data",
        {
            "models": str(args.models),
            "subsystems": ["-".join(s) for s in subs],
            "comp_step": args.comp_step,
            "t": args.t,
            "isothermal_t": args.isothermal_t,
            "celsius": args.celsius,
            "grid_step": args.grid_step,
            "seed": args.seed,
            "split": not args.no_split,
        },
        {"models": file_sha(Path(args.models))},
        [out],
    )
    print(f"{out} ({len(ds)} samples)")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    ds = load_dataset(args.data)
    ds = make_splits(ds, seed=args.seed, min_positives=args.min_positives)
    out = Path(args.out or args.data)
    save_dataset(ds, out)
    print(out)
    return 0


# -- train / tune / sweep -----------------------------------------------------------


def _train_config(args: argparse.Namespace) -> TrainConfig:
    loss = LossConfig(q=args.physics, lambda_q=args.lam)
    return TrainConfig(
        hidden_dim=args.heads * args.d_head,
        batch_size=args.batch,
        lr=args.lr,
        dropout=args.dropout,
        weight_decay=args.wd,
        max_epochs=args.epochs,
        patience=args.patience,
        n_layers=args.layers,
        n_heads=args.heads,
        d_head=args.d_head,
        self_loops=not args.no_self_loops,
        loss=loss,
    )


def _train_seed_job(payload: tuple) -> tuple[int, bool, float, int]:
    data_path, props_path, cfg, seed, seed_dir, dataset_sha = payload
    ds = load_dataset(data_path)
    props = load_properties(props_path, ds.elements)
    params, rec = train_one(ds, props, cfg, seed)
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "elements": list(ds.elements.names),
        "phases": list(ds.phases.names),
        "requires": {
            name: sorted(ds.phases.required_elements[name])
            for name in ds.phases.names
        },
        "t_min": ds.t_min,
        "t_max": ds.t_max,
        "seed": seed,
        "dataset_sha256": dataset_sha,
        "best_epoch": rec.best_epoch,
        "best_val_macro_f1": rec.best_val_f1,
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "dropout": cfg.dropout,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "physics": cfg.loss.q,
        "lambda": cfg.loss.lambda_q,
    }
    save_checkpoint(params, meta, seed_dir / "checkpoint.bin")
    atomic_write_text(seed_dir / "history.csv", rec.history_csv())
    save_thresholds(
        seed_dir / "thresholds.txt",
        ds.phases,
        rec.thresholds,
        rec.threshold_flagged,
    )
    return seed, rec.diverged, rec.best_val_f1, rec.n_epochs


def cmd_train(args: argparse.Namespace) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise CliError(EXIT_CONFIG, f"dataset {data_path} not found")
    cfg = _train_config(args)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset_sha = file_sha(data_path)
    seeds = [args.seed + i for i in range(args.seeds)]
    payloads = [
        (
            str(data_path),
            str(args.props),
            cfg,
            seed,
            str(run_dir / f"seed{seed}"),
            dataset_sha,
        )
        for seed in seeds
    ]
    jobs = _jobs_from(args)
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
            results = list(pool.map(_train_seed_job, payloads))
    else:
        results = [_train_seed_job(p) for p in payloads]

    artifacts = []
    for seed in seeds:
        sd = run_dir / f"seed{seed}"
        artifacts += [sd / "checkpoint.bin", sd / "history.csv",
                      sd / "thresholds.txt"]
    write_manifest(
        run_dir / "manifest.json",
        "train",
        {
            "data": str(data_path),
            "props": str(args.props),
            "seeds": seeds,
            "lr": cfg.lr,
            "weight_decay": cfg.weight_decay,
            "dropout": cfg.dropout,
            "batch_size": cfg.batch_size,
            "max_epochs": cfg.max_epochs,
            "patience": cfg.patience,
            "layers": cfg.n_layers,
            "heads": cfg.n_heads,
            "d_head": cfg.d_head,
            "self_loops": cfg.self_loops,
            "physics": cfg.loss.q,
            "lambda": cfg.loss.lambda_q,
        },
        {"data": dataset_sha},
        artifacts,
    )
    diverged = False
    for seed, bad, f1, n_epochs in results:
        status = "DIVERGED" if bad else f"best val Macro-F1 {f1:.6f}"
        print(f"seed {seed}: {n_epochs} epochs, {status}", file=sys.stderr)
        diverged |= bad
    print(run_dir)
    return EXIT_DIVERGENCE if diverged else 0


def cmd_tune(args: argparse.Namespace) -> int:
    ds = load_dataset(args.data)
    props = load_properties(args.props, ds.elements)
    base = _train_config(args)
    best, rows = random_search(
        ds, props, budget=args.budget, seed=args.seed, base=base,
        epochs=args.epochs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ["lr,weight_decay,dropout,val_macro_f1"]
    table += [
        f"{lr:.10g},{wd:.10g},{dr:.10g},{f1:.12g}" for lr, wd, dr, f1 in rows
    ]
    atomic_write_text(out / "tune.csv", "\n".join(table) + "\n")
    atomic_write_text(
        out / "best.json",
        json.dumps(
            {
                "lr": best.lr,
                "weight_decay": best.weight_decay,
                "dropout": best.dropout,
                "batch_size": best.batch_size,
                "max_epochs": best.max_epochs,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
    )
    print(out / "tune.csv")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.physics == "none":
        raise CliError(EXIT_CONFIG, "sweep needs --physics gpr|smooth|pure")
    ds = load_dataset(args.data)
    props = load_properties(args.props, ds.elements)
    base = _train_config(args)
    rows = lambda_sweep(
        ds, props, args.physics, lambdas=LAMBDA_GRID, seed=args.seed,
        epochs=args.epochs, base=base,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = ["lambda,val_macro_f1"]
    table += [f"{lam:.2f},{f1:.12g}" for lam, f1 in rows]
    atomic_write_text(out, "\n".join(table) + "\n")
    print(out)
    return 0


# -- predict / decode ----------------------------------------------------------------


def _load_run(run_dir: Path) -> tuple[list, list[np.ndarray], dict]:
    dirs = seed_dirs(run_dir)
    if not dirs:
        raise CliError(
            EXIT_MISSING_CHECKPOINT, f"no seed*/checkpoint.bin under {run_dir}"
        )
    models = []
    thresholds = []
    meta0: dict = {}
    for sd in dirs:
        ckpt = sd / "checkpoint.bin"
        if not ckpt.exists():
            raise CliError(EXIT_MISSING_CHECKPOINT, f"{ckpt} missing")
        params, meta = load_checkpoint(ckpt)
        if not meta0:
            meta0 = meta
        for key in ("elements", "phases", "t_min", "t_max"):
            if meta.get(key) != meta0.get(key):
                raise CliError(
                    EXIT_CONFIG,
                    f"{ckpt}: {key} differs from {dirs[0].name}; "
                    "cannot ensemble across different runs",
                )
        models.append(params)
        tpath = sd / "thresholds.txt"
        if tpath.exists():
            vocab = PhaseVocabulary(tuple(meta["phases"]))
            thresholds.append(load_thresholds(tpath, vocab))
    return models, thresholds, meta0


def _vocab_from_meta(meta: dict) -> tuple[ElementSet, PhaseVocabulary]:
    elements = ElementSet(tuple(meta["elements"]))
    requires = {
        name: frozenset(symbols)
        for name, symbols in meta.get("requires", {}).items()
    }
    vocab = PhaseVocabulary(tuple(meta["phases"]), requires)
    return elements, vocab


def _forward_chunked(
    params, feats: np.ndarray, t_norm: np.ndarray, adj: np.ndarray
) -> np.ndarray:
    outs = []
    for lo in range(0, len(t_norm), FORWARD_CHUNK):
        probs, _ = forward(
            params, feats[lo : lo + FORWARD_CHUNK],
            t_norm[lo : lo + FORWARD_CHUNK], adj,
        )
        outs.append(probs)
    return np.concatenate(outs, axis=0)


def _predict_points(args: argparse.Namespace, elements: ElementSet):
    if args.points:
        ds = load_dataset(args.points, allow_empty_labels=True)
        if tuple(ds.elements.names) != elements.names:
            raise CliError(
                EXIT_CONFIG,
                f"points file elements {ds.elements.names} != model "
                f"elements {elements.names}",
            )
        rows = (
            np.arange(len(ds))
            if args.split == "all"
            else ds.indices_of(args.split)
        )
        if len(rows) == 0:
            raise CliError(EXIT_CONFIG, f"no rows with split {args.split!r}")
        return ds.x[rows], ds.t[rows]
    if not args.system or not args.t:
        raise CliError(EXIT_CONFIG, "need --points or --system with --t")
    subset = parse_system(args.system)
    temps = parse_t_spec(args.t, args.celsius)
    return dense_grid(subset, elements, args.comp_step, temps)


def cmd_predict(args: argparse.Namespace) -> int:
    models, seed_thresholds, meta = _load_run(Path(args.run))
    elements, vocab = _vocab_from_meta(meta)
    x, t = _predict_points(args, elements)

    props = load_properties(args.props, elements)
    builder = FeatureBuilder(
        props, meta["t_min"], meta["t_max"], models[0].self_loops
    )
    feats, t_norm, clamped = builder.graphs(x, t)
    probs = ensemble_probs(
        [_forward_chunked(p, feats, t_norm, builder.adj) for p in models]
    )

    if not seed_thresholds:
        raise CliError(EXIT_CONFIG, f"no thresholds.txt under {args.run}")
    thresholds = np.mean(seed_thresholds, axis=0)

    fallback = np.zeros(len(t), dtype=bool)
    if args.decode:
        cfg = DecodeConfig(generalize_support=args.generalize_support)
        labels, probs_out, fallback = decode(
            probs, x, t_norm, thresholds, vocab, elements, cfg
        )
    else:
        labels = probs > thresholds[None, :]
        probs_out = probs
    flags = [
        ",".join(
            name
            for name, on in (("fallback", fallback[i]), ("clamped_T", clamped[i]))
            if on
        )
        for i in range(len(t))
    ]
    pred = Predictions(
        elements, vocab, x, t, probs_out, _masks_of(labels), flags,
        float(meta["t_min"]), float(meta["t_max"]), bool(args.decode),
    )
    out = Path(args.out)
    save_predictions(out, pred)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "predict",
        {
            "run": str(args.run),
            "points": args.points,
            "system": args.system,
            "comp_step": args.comp_step,
            "t": args.t,
            "celsius": args.celsius,
            "split": args.split,
            "decode": bool(args.decode),
            "generalize_support": args.generalize_support,
        },
        {"run_manifest": str(Path(args.run) / "manifest.json")},
        [out],
    )
    print(out)
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    pred = load_predictions(Path(args.pred))
    if args.thresholds:
        thresholds = load_thresholds(Path(args.thresholds), pred.vocab)
    elif args.run:
        _, seed_thresholds, _ = _load_run(Path(args.run))
        if not seed_thresholds:
            raise CliError(EXIT_CONFIG, f"no thresholds.txt under {args.run}")
        thresholds = np.mean(seed_thresholds, axis=0)
    else:
        raise CliError(EXIT_CONFIG, "need --thresholds or --run")
    t_norm, _ = normalize_T_array(pred.t_min, pred.t_max, pred.t)
    cfg = DecodeConfig(generalize_support=args.generalize_support)
    labels, probs, fallback = decode(
        pred.probs, pred.x, t_norm, thresholds, pred.vocab, pred.elements, cfg
    )
    flags = []
    for i, old in enumerate(pred.flags):
        kept = [f for f in old.split(",") if f and f != "fallback"]
        if fallback[i]:
            kept.insert(0, "fallback")
        flags.append(",".join(kept))
    out_pred = Predictions(
        pred.elements, pred.vocab, pred.x, pred.t, probs,
        _masks_of(labels), flags, pred.t_min, pred.t_max, True,
    )
    out = Path(args.out)
    save_predictions(out, out_pred)
    print(out)
    return 0


# -- eval / render -------------------------------------------------------------------


def _truth_labels(
    args: argparse.Namespace, pred: Predictions
) -> np.ndarray:
    if args.truth:
        ds = load_dataset(args.truth)
        if tuple(ds.phases.names) != pred.vocab.names:
            raise CliError(
                EXIT_CONFIG,
                f"truth phases {ds.phases.names} != prediction phases "
                f"{pred.vocab.names}",
            )
        check_alignment(pred.x, pred.t, ds.x, ds.t)
        return ds.label_matrix() > 0.5
    if args.oracle:
        ms = load_models(args.models)
        if ms.elements.names != pred.elements.names:
            raise CliError(
                EXIT_CONFIG,
                f"model elements {ms.elements.names} != prediction "
                f"elements {pred.elements.names}",
            )
        eq = Equilibrator(ms, grid_step=args.grid_step)
        masks = np.zeros(len(pred.t), dtype=np.int64)
        for tv in np.unique(pred.t):
            rows = np.flatnonzero(pred.t == tv)
            m, _, _ = eq.solve_batch(pred.x[rows], float(tv))
            masks[rows] = m
        return _labels_of(masks, pred.vocab.size)
    raise CliError(EXIT_CONFIG, "need --truth dataset or --oracle")


def _render_field_maps(
    out_dir: Path,
    x: np.ndarray,
    t: np.ndarray,
    values: np.ndarray,
    elements: ElementSet,
    kind: str,
    stem: str = "map",
) -> list[Path]:
    """Write one PPM per renderable plane of the field."""
    active = [c for c in range(x.shape[1]) if np.any(x[:, c] > 1e-6)]
    written: list[Path] = []

    def emit(rows: np.ndarray, name: str) -> None:
        path = out_dir / name
        render_map(x[rows], t[rows], values[rows], elements, path, kind)
        written.append(path)

    if len(active) == 2:
        emit(np.arange(len(t)), f"{stem}.ppm")
        return written
    temps = np.unique(np.round(t, 6))
    if len(active) == 3:
        if len(temps) == 1:
            emit(np.arange(len(t)), f"{stem}.ppm")
        else:
            for tv in temps:
                emit(np.flatnonzero(np.round(t, 6) == tv),
                     f"{stem}_T{tv:.2f}.ppm")
        return written
    # quaternary: fix the last active element level per slice, then the
    # remaining three span a ternary section
    col = active[-1]
    levels = np.unique(np.round(x[:, col], 9))
    for tv in temps:
        at_t = np.round(t, 6) == tv
        for lv in levels:
            rows = np.flatnonzero(at_t & (np.round(x[:, col], 9) == lv))
            if len(rows) == 0:
                continue
            sliced = x.copy()
            sliced[:, col] = 0.0
            sub_active = [
                c for c in range(x.shape[1]) if np.any(sliced[rows, c] > 1e-6)
            ]
            if len(sub_active) < 2:
                continue
            name = f"{stem}_T{tv:.2f}_{elements.names[col]}{lv:.2f}.ppm"
            path = out_dir / name
            render_map(
                sliced[rows], t[rows], values[rows], elements, path, kind
            )
            written.append(path)
    return written


def cmd_eval(args: argparse.Namespace) -> int:
    pred = load_predictions(Path(args.pred))
    truth = _truth_labels(args, pred)
    labels = pred.labels()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(
        pred.elements, pred.vocab, pred.x, pred.t, truth, labels, out
    )
    maps = _render_field_maps(
        out, pred.x, pred.t, labels.sum(axis=1), pred.elements, "multiplicity"
    )
    from . import plots  # deferred: matplotlib is heavy

    figures = plots.eval_figures(
        report, pred.x, pred.t, truth, labels, pred.elements, pred.vocab, out
    )
    artifacts = [
        out / "report.txt", out / "report.csv", out / "mismatch.csv",
        out / "multiplicity.csv", *maps,
    ]
    write_manifest(
        out / "manifest.json",
        "eval",
        {
            "pred": str(args.pred),
            "truth": args.truth,
            "oracle": bool(args.oracle),
            "models": str(args.models) if args.oracle else None,
            "figures": [str(f.name) for f in figures],
        },
        {"pred": file_sha(Path(args.pred))},
        artifacts,
    )
    print(
        f"accuracy {percent(report.accuracy)}% "
        f"({report.n - report.n_mismatch}/{report.n}), "
        f"macro-F1 {report.macro_f1:.6f}"
    )
    print(out)
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    pred = load_predictions(Path(args.pred))
    labels = pred.labels()
    if args.kind == "multiplicity":
        values = labels.sum(axis=1)
    else:
        truth = _truth_labels(args, pred)
        values = ~(labels != truth).any(axis=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = _render_field_maps(
        out, pred.x, pred.t, values, pred.elements, args.kind
    )
    for path in written:
        print(path)
    return 0


# -- argument parsing ----------------------------------------------------------------


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", default=str(builtin_model_path()),
                   help="free-energy model file (default: built-in)")


def _add_props_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--props", default=str(builtin_model_path("elements.props")),
                   help="element property table (default: built-in)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_props_flag(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=6e-4)
    p.add_argument("--dropout", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-head", type=int, default=40)
    p.add_argument("--no-self-loops", action="store_true")
    p.add_argument("--physics", choices=["none", "gpr", "smooth", "pure"],
                   default="none")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="phaseforge",
        description="phase-set prediction over composition-temperature space",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="label a grid with the built-in solver")
    _add_common_model_flags(g)
    g.add_argument("--binaries", default="",
                   help="'all' or comma list like Ag-Bi,Cu-Sn")
    g.add_argument("--ternaries", default="",
                   help="'all' or comma list like Ag-Bi-Cu")
    g.add_argument("--quaternary", action="store_true")
    g.add_argument("--comp-step", type=int, default=2, help="at.%%")
    g.add_argument("--t", default="", help="binary T sweep, K (a:b:s or value)")
    g.add_argument("--isothermal-t", default="",
                   help="isothermal plane temperatures for ternary and up")
    g.add_argument("--celsius", action="store_true")
    g.add_argument("--grid-step", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0, help="split seed")
    g.add_argument("--no-split", action="store_true")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", help="assign split tags to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-positives", type=int, default=5)
    s.add_argument("-o", "--out", default="")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one or more seeds")
    t.add_argument("--data", required=True)
    _add_train_flags(t)
    t.add_argument("--seeds", type=int, default=1, help="number of seeds")
    t.add_argument("--seed", type=int, default=0, help="first seed")
    t.add_argument("--jobs", type=int, default=0,
                   help="parallel seed jobs (or PHASEFORGE_JOBS)")
    t.add_argument("-o", "--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="seeded random hyperparameter search")
    u.add_argument("--data", required=True)
    _add_train_flags(u)
    u.add_argument("--budget", type=int, default=20)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("-o", "--out", required=True)
    u.set_defaults(func=cmd_tune)

    w = sub.add_parser("sweep", help="penalty-weight sweep at fixed epochs")
    w.add_argument("--data", required=True)
    _add_train_flags(w)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("-o", "--out", required=True, help="output CSV path")
    w.set_defaults(func=cmd_sweep)
    w.set_defaults(epochs=20)

    p = sub.add_parser("predict", help="ensemble probabilities over a grid")
    p.add_argument("--run", required=True, help="training run directory")
    _add_props_flag(p)
    p.add_argument("--points", default="", help="dataset file with query points")
    p.add_argument("--split", default="all",
                   choices=["all", "tr", "va", "te", "?"])
    p.add_argument("--system", default="", help="like Ag-Bi or Ag-Bi-Cu")
    p.add_argument("--comp-step", type=int, default=1, help="at.%%")
    p.add_argument("--t", default="", help="K (a:b:s or value)")
    p.add_argument("--celsius", action="store_true")
    p.add_argument("--decode", action="store_true",
                   help="project onto admissible phase sets")
    p.add_argument("--generalize-support", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_predict)

    d = sub.add_parser("decode", help="re-project a raw prediction file")
    d.add_argument("--pred", required=True)
    d.add_argument("--run", default="", help="run directory for thresholds")
    d.add_argument("--thresholds", default="", help="thresholds file")
    d.add_argument("--generalize-support", action="store_true")
    d.add_argument("-o", "--out", required=True)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score predictions and write reports")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", default="", help="reference dataset file")
    e.add_argument("--oracle", action="store_true",
                   help="label points live with the built-in solver")
    _add_common_model_flags(e)
    e.add_argument("--grid-step", type=float, default=0.01)
    e.add_argument("-o", "--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="rasterize a prediction field")
    r.add_argument("--pred", required=True)
    r.add_argument("--kind", choices=["multiplicity", "match"],
                   default="multiplicity")
    r.add_argument("--truth", default="")
    r.add_argument("--oracle", action="store_true")
    _add_common_model_flags(r)
    r.add_argument("--grid-step", type=float, default=0.01)
    r.add_argument("-o", "--out", required=True, help="output directory")
    r.set_defaults(func=cmd_render)

    return ap


CONFIG_ERRORS = (
    DatasetFormatError,
    ModelConfigError,
    PropertyTableError,
    LossConfigError,
    TrainError,
    DecodeError,
    ModelError,
    ValueError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except EquilibriumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
