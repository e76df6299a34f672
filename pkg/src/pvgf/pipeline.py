"""Training runs on dataset files and the tables built from finished runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import LayoutMismatch
from .features import PS_COLUMNS, Dataset, layout_digest
from .vib import (Metrics, TrainConfig, VibParameters, evaluate, model_from_json, model_to_json,
                  predict, train)

FEATURE_SETS = {"full": tuple(range(50)), "ps": PS_COLUMNS}


def select_features(ds: Dataset, feature_set: str) -> Dataset:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}")
    if ds.X.shape[1] != 50:
        raise LayoutMismatch(f"dataset has {ds.X.shape[1]} feature columns, expected 50")
    return ds.with_columns(FEATURE_SETS[feature_set])


def write_metrics(metrics: Metrics, out: Path, extra: dict) -> None:
    doc = metrics.to_dict()
    doc.update(extra)
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", "0", "1", "2"])
        for c, row in enumerate(metrics.confusion):
            w.writerow([c, *row])
    if metrics.ce_curve:
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "ce", "kl"])
            for e, (ce, kl) in enumerate(zip(metrics.ce_curve, metrics.kl_curve), start=1):
                w.writerow([e, repr(ce), repr(kl)])


def write_latent(z, labels, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z1", "z2", "label"])
        for (z1, z2), lab in zip(z, labels):
            w.writerow([repr(float(z1)), repr(float(z2)), int(lab)])


def run_training(ds: Dataset, feature_set: str, config: TrainConfig, beta: float, out_dir):
    """Train on the train split, evaluate on the test split, persist model and metrics."""
    sub = select_features(ds, feature_set)
    Xtr, ytr = sub.train()
    Xte, yte = sub.test()
    params, curves = train(Xtr, ytr, config, beta)
    model_text = model_to_json(params, config, sub.names, layout_digest(sub.names), feature_set)
    # evaluate the persisted (rounded) model so file and reported numbers agree
    params, _ = model_from_json(model_text)
    metrics = evaluate(params, Xte, yte, curves)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model_text)
    write_metrics(metrics, out, {"rate": ds.rate, "feature_set": feature_set,
                                 "n_train": int(len(ytr)), "n_test": int(len(yte))})
    _, _, z = predict(params, Xte)
    write_latent(z, yte, out / "latent.csv")
    return params, metrics


def load_model(path):
    """(params, metadata) from a model file."""
    return model_from_json(Path(path).read_text())


def features_for_model(ds: Dataset, meta: dict) -> Dataset:
    """Columns of ``ds`` matching the model's layout; LayoutMismatch otherwise."""
    names = meta.get("feature_names")
    if names is None:
        raise LayoutMismatch("model carries no feature layout")
    missing = [n for n in names if n not in ds.names]
    if missing:
        raise LayoutMismatch(f"dataset lacks model features, e.g. {missing[0]}")
    cols = [ds.names.index(n) for n in names]
    sub = ds.with_columns(cols)
    if layout_digest(sub.names) != meta.get("layout_digest"):
        raise LayoutMismatch("feature layout digest differs from the model's")
    return sub


def evaluate_model(params: VibParameters, meta: dict, ds: Dataset, out_dir=None) -> Metrics:
    sub = features_for_model(ds, meta)
    Xte, yte = sub.test()
    metrics = evaluate(params, Xte, yte)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out, {"rate": ds.rate, "feature_set": meta.get("feature_set"),
                                     "n_test": int(len(yte))})
        _, _, z = predict(params, Xte)
        write_latent(z, yte, out / "latent.csv")
    return metrics


def find_runs(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("metrics.json"))


def _read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def summary_rows(runs) -> list[dict]:
    rows = []
    for run in runs:
        m = json.loads((run / "metrics.json").read_text())
        rows.append({"run": run.name, "rate": m["rate"], "feature_set": m["feature_set"],
                     "accuracy": m["accuracy"], "recall_0": m["recall"][0],
                     "recall_1": m["recall"][1], "recall_2": m["recall"][2]})
    rows.sort(key=lambda r: (-r["rate"], r["feature_set"]))
    return rows


def export_tables(runs, out_dir) -> dict:
    """Tidy CSVs (loss curves, latent points, summary grid); returns the data for plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves, latents = {}, {}
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "ce", "kl"])
        for run in runs:
            if not (run / "loss.csv").exists():
                continue
            _, rows = _read_csv(run / "loss.csv")
            arr = np.array(rows, dtype=float)
            curves[run.name] = (arr[:, 0], arr[:, 1], arr[:, 2])
            for r in rows:
                w.writerow([run.name, *r])
    with open(out / "latent.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "z1", "z2", "label"])
        for run in runs:
            if not (run / "latent.csv").exists():
                continue
            _, rows = _read_csv(run / "latent.csv")
            arr = np.array(rows, dtype=float).reshape(-1, 3)
            latents[run.name] = (arr[:, :2], arr[:, 2].astype(int))
            for r in rows:
                w.writerow([run.name, *r])
    rows = summary_rows(runs)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return {"curves": curves, "latents": latents, "summary": rows}
