"""Checkpoint archive and CSV reports for trained detectors.

A checkpoint is a single JSON document with sorted keys: the model
config, named tensors with their shapes and dtype, normalization
statistics and the calibrated threshold. Floats are written with
``repr`` so a save/load round trip is exact and reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .model import ModelConfig, build_variant, param_dtype
from .training import DetectionMetrics, DetectorThreshold, LearningCurves

CHECKPOINT_VERSION = 1
CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "val_f1")
EVAL_COLUMNS = ("TP", "TN", "accuracy", "recall", "precision", "F1")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: ModelConfig
    mean: np.ndarray
    std: np.ndarray
    threshold: DetectorThreshold | None
    meta: dict


def _floats(a) -> list[float]:
    return [float(v) for v in np.ravel(a)]


def save_checkpoint(path, params, config: ModelConfig, mean, std,
                    threshold: DetectorThreshold | None = None, meta: dict | None = None) -> None:
    expected = build_variant(config)
    if set(params) != set(expected):
        raise CheckpointError(f"parameter names {sorted(params)} do not match variant {config.variant}")
    dtype = param_dtype(params)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "dtype": np.dtype(dtype).name,
        "tensors": {k: {"shape": list(np.shape(v)), "data": _floats(v)} for k, v in sorted(params.items())},
        "mean": _floats(mean),
        "std": _floats(std),
        "threshold": None if threshold is None else {"tau": threshold.tau, "refractory": threshold.refractory},
        "meta": meta or {},
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}")
    config = ModelConfig(**doc["config"])
    dtype = np.dtype(doc["dtype"])
    expected = build_variant(config)
    params = {}
    for name, shape in expected.items():
        if name not in doc["tensors"]:
            raise CheckpointError(f"{path}: missing tensor {name}")
        t = doc["tensors"][name]
        if tuple(t["shape"]) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {t['shape']}, expected {list(shape)}")
        params[name] = np.asarray(t["data"], dtype=dtype).reshape(shape)
    th = doc.get("threshold")
    threshold = None if th is None else DetectorThreshold(th["tau"], th["refractory"])
    return Checkpoint(params, config, np.asarray(doc["mean"]), np.asarray(doc["std"]), threshold, doc.get("meta", {}))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_curves_csv(path, curves: LearningCurves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curves.rows():
            w.writerow([_fmt(v) for v in row])


def read_curves_csv(path) -> LearningCurves:
    curves = LearningCurves()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CURVE_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    for r in rows[1:]:
        curves.epoch.append(int(r[0]))
        curves.train_loss.append(float(r[1]))
        curves.val_loss.append(float(r[2]))
        curves.val_f1.append(float(r[3]))
    return curves


def write_eval_csv(path, rows: list[tuple[str, DetectionMetrics]], with_variant: bool = True) -> None:
    """One row per variant, metric columns in the order TP, TN, accuracy, recall, precision, F1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((("variant",) if with_variant else ()) + EVAL_COLUMNS + ("FP", "FN"))
        for name, m in rows:
            r = m.as_row()
            w.writerow(([name] if with_variant else []) + [_fmt(r[c]) for c in EVAL_COLUMNS] + [m.FP, m.FN])


def read_eval_csv(path) -> list[tuple[str, DetectionMetrics]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r.get("variant", ""), DetectionMetrics(int(r["TP"]), int(r["FP"]), int(r["TN"]), int(r["FN"]))) for r in rows]
