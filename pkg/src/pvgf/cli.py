"""Command-line entry point: simulate | featurize | train | eval | predict | export-plots.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .errors import ConfigError, LayoutMismatch
from .features import DEFAULT_RATES, DEFAULT_SNR, Dataset, build_dataset
from .pipeline import (evaluate_model, export_tables, find_runs, load_model, run_training)
from .plant import PlantConfig
from .scenarios import CorpusManifest, ScenarioSpace, generate_corpus
from .vib import TrainConfig, predict

log = logging.getLogger("pvgf")
SCHEMA_VERSION = 1
CONFIG_KEYS = {"schema_version", "plant", "space", "dataset", "train", "seed", "out"}


class UsageError(Exception):
    pass


def _read_json(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {p} is not valid JSON: {exc}") from exc


def load_run_config(path) -> dict:
    if path is None:
        return {}
    cfg = _read_json(path, "config file")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"config {path}: unsupported schema_version {cfg.get('schema_version')!r}")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"config {path}: unknown field(s) {sorted(unknown)}")
    base = Path(path).parent
    for key in ("plant", "space"):
        if isinstance(cfg.get(key), str):
            cfg[key] = _read_json(base / cfg[key], f"{key} config")
    return cfg


def _seed(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("a seed is required (--seed or 'seed' in the config)")
    return int(seed)


def _out(args, cfg, default=None) -> Path:
    out = args.out or cfg.get("out") or default
    if out is None:
        raise UsageError("an output directory is required (--out)")
    return Path(out)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc


# -------------------------------------------------------------- subcommands


def cmd_simulate(args, cfg) -> int:
    space_d = _read_json(args.space, "scenario space") if args.space else cfg.get("space", {})
    plant_d = _read_json(args.plant, "plant config") if args.plant else cfg.get("plant")
    space = ScenarioSpace.from_dict(space_d)
    plant = PlantConfig.from_dict(plant_d) if plant_d else PlantConfig()
    n = args.cases
    if n is None or n < 1:
        raise UsageError("--cases must be a positive integer")
    manifest = generate_corpus(space, n, _seed(args, cfg), _out(args, cfg), plant=plant,
                               workers=args.workers)
    failed = [c["id"] for c in manifest.cases if c["status"] != "ok"]
    print(f"simulated {n - len(failed)}/{n} cases into {manifest.root}")
    if failed:
        print(f"failed cases: {', '.join(failed)}", file=sys.stderr)
    return 0 if len(failed) < n else 1


def cmd_featurize(args, cfg) -> int:
    dcfg = cfg.get("dataset", {})
    rates = _floats(args.rates) if args.rates else dcfg.get("rates", list(DEFAULT_RATES))
    snr = _floats(args.snr) if args.snr else dcfg.get("snr", list(DEFAULT_SNR))
    if not Path(args.corpus, "manifest.json").exists():
        raise UsageError(f"no corpus manifest under {args.corpus}")
    manifest = CorpusManifest.load(args.corpus)
    out = _out(args, cfg)
    datasets = build_dataset(manifest, rates=[int(r) if r == int(r) else r for r in rates],
                             snr_levels=snr, seed=_seed(args, cfg), out_dir=out)
    for rate, ds in datasets.items():
        counts = np.bincount(ds.y, minlength=3)
        print(f"dataset_{int(rate)}.csv: {len(ds.y)} samples, labels {counts.tolist()}, "
              f"test {int(ds.split.sum())}")
    return 0


def _train_config(args, cfg) -> tuple[TrainConfig, float]:
    tcfg = dict(cfg.get("train", {}))
    beta = float(args.beta if args.beta is not None else tcfg.pop("beta", 0.01))
    tcfg.pop("beta", None)
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    tcfg["seed"] = _seed(args, cfg)
    try:
        return TrainConfig(**tcfg), beta
    except TypeError as exc:
        raise UsageError(f"bad train options: {exc}") from exc


def _load_dataset(path) -> Dataset:
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return Dataset.load(path)


def cmd_train(args, cfg) -> int:
    ds = _load_dataset(args.dataset)
    config, beta = _train_config(args, cfg)
    out = _out(args, cfg, default=f"run_{int(ds.rate)}_{args.feature_set}")
    _, metrics = run_training(ds, args.feature_set, config, beta, out)
    rec = ", ".join(f"{r:.4f}" for r in metrics.recall)
    print(f"{out}: accuracy {metrics.accuracy:.4f}, recall [{rec}]")
    return 0


def cmd_eval(args, cfg) -> int:
    if not Path(args.model).exists():
        raise UsageError(f"model not found: {args.model}")
    params, meta = load_model(args.model)
    ds = _load_dataset(args.dataset)
    metrics = evaluate_model(params, meta, ds, _out(args, cfg, default="eval"))
    rec = ", ".join(f"{r:.4f}" for r in metrics.recall)
    print(f"accuracy {metrics.accuracy:.4f}, recall [{rec}]")
    return 0


def cmd_predict(args, cfg) -> int:
    if not Path(args.model).exists():
        raise UsageError(f"model not found: {args.model}")
    if not Path(args.input).exists():
        raise UsageError(f"input not found: {args.input}")
    params, meta = load_model(args.model)
    with open(args.input) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    fcols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    X = np.array([[float(r[i]) for i in fcols] for r in rows]).reshape(len(rows), len(fcols))
    if meta.get("feature_set") == "ps" and X.shape[1] == 50:
        X = X[:, 25:]
    if X.shape[1] != params.n_input:
        raise LayoutMismatch(f"input has {X.shape[1]} feature columns, model expects "
                             f"{params.n_input}")
    labels, probs, _ = predict(params, X)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["label", "p0", "p1", "p2"])
        for lab, p in zip(labels, probs):
            w.writerow([int(lab), *(f"{v:.9g}" for v in p)])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_export_plots(args, cfg) -> int:
    if not Path(args.runs).is_dir():
        raise UsageError(f"run directory not found: {args.runs}")
    runs = find_runs(args.runs)
    if not runs:
        raise UsageError(f"no finished runs (metrics.json) under {args.runs}")
    out = _out(args, cfg, default=Path(args.runs) / "plots")
    data = export_tables(runs, out)
    if data["curves"]:
        plotting.loss_curves(data["curves"], out / "loss_curves.png")
    if data["latents"]:
        plotting.latent_scatter(data["latents"], out / "latent.png")
    plotting.summary_bars(data["summary"], out / "summary.png")
    print(f"exported {len(runs)} run(s) to {out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pvgf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a waveform corpus")
    p.add_argument("--cases", type=int)
    p.add_argument("--space", help="scenario space JSON")
    p.add_argument("--plant", help="plant config JSON")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", parents=[common], help="build per-rate datasets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rates", help="comma-separated sample rates in Hz")
    p.add_argument("--snr", help="comma-separated SNR levels in dB")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train a classifier on one dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--feature-set", choices=("full", "ps"), default="full")
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset's test split")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-plots", parents=[common], help="tables and figures from runs")
    p.add_argument("--runs", required=True)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError, LayoutMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
