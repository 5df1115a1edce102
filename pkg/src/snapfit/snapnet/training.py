"""Mini-batch focal-loss training, threshold calibration and window-level metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream
from . import kernels
from .loss import focal_loss
from .model import ModelConfig, TrainingFault, init_params, loss_and_grad, predict_proba
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 64
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError(f"invalid training config: {self}")
        if not 0 < self.focal_alpha < 1 or self.focal_gamma < 0:
            raise ValueError("focal alpha must lie in (0, 1) and gamma must be non-negative")


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class DetectionMetrics:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN

    @property
    def accuracy(self) -> float:
        return (self.TP + self.TN) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.TP + self.FP
        return self.TP / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.TP + self.FN
        return self.TP / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0

    @classmethod
    def from_scores(cls, scores, y, tau: float) -> "DetectionMetrics":
        pred = np.asarray(scores) > tau
        y = np.asarray(y).astype(bool)
        return cls(int(np.sum(pred & y)), int(np.sum(pred & ~y)),
                   int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))

    def as_row(self) -> dict[str, float]:
        """Report columns in the order TP, TN, accuracy, recall, precision, F1."""
        return {"TP": self.TP, "TN": self.TN, "accuracy": self.accuracy,
                "recall": self.recall, "precision": self.precision, "F1": self.f1}


@dataclass(frozen=True)
class DetectorThreshold:
    tau: float
    refractory: int = 50

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class LearningCurves:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss, self.val_f1))


def predict_batched(X, params, config: ModelConfig, chunk: int = 512, kern=None) -> np.ndarray:
    out = [predict_proba(X[i : i + chunk], params, config, kern) for i in range(0, len(X), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def train(
    X_train, y_train, model_config: ModelConfig, train_config: TrainConfig,
    X_val=None, y_val=None, kern=None, progress=None,
):
    """Adam on the mean focal loss with seeded per-epoch shuffling.

    Returns ``(params, curves)``. Deterministic for a given seed, precision
    and kernel backend. Parameters come back in the training precision.
    """
    kern = kern or kernels
    dtype = PRECISIONS[train_config.precision]
    root = RngStream(train_config.seed)
    params = init_params(model_config, root.child(0), dtype)
    X_train = np.asarray(X_train, dtype=dtype)
    if X_val is not None:
        X_val = np.asarray(X_val, dtype=dtype)
    state = AdamState.zeros_like(params)
    curves = LearningCurves()
    n = len(X_train)
    a, g = train_config.focal_alpha, train_config.focal_gamma
    for epoch in range(train_config.epochs):
        order = root.child(1, epoch).permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            try:
                loss, grads = loss_and_grad(X_train[idx], y_train[idx], params, model_config, a, g, kern)
            except TrainingFault as exc:
                raise TrainingDivergence(epoch, b, str(exc)) from exc
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, b, "non-finite loss")
            params, state = adam_step(params, grads, state, train_config.lr)
            total += loss * len(idx)
            count += len(idx)
        curves.epoch.append(epoch + 1)
        curves.train_loss.append(total / max(count, 1))
        if X_val is not None and len(X_val):
            p = predict_batched(X_val, params, model_config, kern=kern)
            curves.val_loss.append(float(np.mean(focal_loss(y_val, p, a, g))))
            curves.val_f1.append(DetectionMetrics.from_scores(p, y_val, 0.5).f1)
        else:
            curves.val_loss.append(float("nan"))
            curves.val_f1.append(float("nan"))
        if progress is not None:
            progress(epoch + 1, curves)
    return params, curves


THRESHOLD_GRID = np.round(np.arange(1, 100) * 0.01, 2)


def calibrate_from_scores(scores, y, refractory: int = 50) -> DetectorThreshold:
    y = np.asarray(y)
    if y.size == 0 or y.min() == y.max():
        raise ValueError("threshold calibration needs both classes in the validation set")
    best_tau, best_f1 = None, -1.0
    for tau in THRESHOLD_GRID:
        f1 = DetectionMetrics.from_scores(scores, y, tau).f1
        better = f1 > best_f1 + 1e-15
        tie = abs(f1 - best_f1) <= 1e-15 and abs(tau - 0.5) < abs(best_tau - 0.5) - 1e-12
        if better or tie:
            best_tau, best_f1 = float(tau), f1
    return DetectorThreshold(best_tau, refractory)


def calibrate_threshold(params, X_val, y_val, config: ModelConfig, refractory: int = 50) -> DetectorThreshold:
    """Sweep tau over a 0.01 grid and keep the F1-maximizing value (ties toward 0.5)."""
    return calibrate_from_scores(predict_batched(X_val, params, config), y_val, refractory)


def evaluate(params, tau: float, X_test, y_test, config: ModelConfig) -> DetectionMetrics:
    if len(X_test) == 0:
        raise ValueError("empty test set")
    return DetectionMetrics.from_scores(predict_batched(X_test, params, config), y_test, tau)
