"""ROC construction, the TPR/sqrt(FPR) fitness, and ensemble voting.

Proton (label 1) is the positive class throughout.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "INVALID",
    "GAMMA",
    "PROTON",
    "RocCurve",
    "Evaluation",
    "roc_curve",
    "fitness_from_roc",
    "fitness",
    "accuracy",
    "evaluate",
    "ensemble_confidences",
    "ensemble_predict",
    "write_roc_csv",
    "read_roc_csv",
    "fitness_key",
]

INVALID = -1.0
GAMMA, PROTON = 0, 1


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    def __len__(self) -> int:
        return len(self.fpr)


@dataclass
class Evaluation:
    fitness: float
    accuracy: float = float("nan")
    roc: RocCurve | None = None
    extra: dict = field(default_factory=dict)


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype.kind in "US":
        y = np.where(y == "proton", PROTON, np.where(y == "gamma", GAMMA, -1))
    y = y.astype(np.int64)
    if np.any((y != GAMMA) & (y != PROTON)):
        raise ValueError("labels must be gamma (0) or proton (1)")
    return y


def roc_curve(proton_confidences, labels) -> RocCurve:
    """ROC points at every distinct confidence, highest threshold first.

    An event is called proton when its confidence is >= the threshold. The
    lowest threshold always produces the (1, 1) point.
    """
    s = np.asarray(proton_confidences, dtype=np.float64).ravel()
    y = _labels(labels).ravel()
    if s.shape != y.shape or s.size == 0:
        raise ValueError("confidences and labels must be non-empty and of equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("confidences must be finite")
    n_pos = int((y == PROTON).sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined: both classes must be present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted == PROTON)
    fp = np.cumsum(y_sorted == GAMMA)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    thr = s_sorted[last]
    fpr = fp[last] / n_neg
    tpr = tp[last] / n_pos
    return RocCurve(thr, fpr.astype(np.float64), tpr.astype(np.float64))


def fitness_from_roc(roc: RocCurve) -> float:
    """max TPR/sqrt(FPR) over the points with FPR > 0."""
    mask = roc.fpr > 0
    if not np.any(mask):
        return float(roc.tpr.max()) if len(roc) else INVALID
    return float(np.max(roc.tpr[mask] / np.sqrt(roc.fpr[mask])))


def fitness(proton_confidences, labels) -> float:
    return fitness_from_roc(roc_curve(proton_confidences, labels))


def accuracy(confidences: np.ndarray, labels) -> float:
    """Argmax accuracy; a tie between the two classes counts as gamma."""
    conf = np.asarray(confidences, dtype=np.float64)
    pred = (conf[:, PROTON] > conf[:, GAMMA]).astype(np.int64)
    return float(np.mean(pred == _labels(labels)))


def evaluate(model, X: np.ndarray, y) -> Evaluation:
    """Fitness of a trained model on one partition.

    Failed or missing models short-circuit to the ``INVALID`` sentinel.
    """
    from .nn.model import predict

    if model is None or getattr(model, "failed", False):
        return Evaluation(INVALID)
    conf = predict(model, X)
    if not np.all(np.isfinite(conf)):
        return Evaluation(INVALID)
    roc = roc_curve(conf[:, PROTON], y)
    return Evaluation(fitness_from_roc(roc), accuracy(conf, y), roc)


def ensemble_confidences(models: list, X: np.ndarray) -> np.ndarray:
    from .nn.model import predict

    if not models:
        raise ValueError("ensemble needs at least one model")
    shapes = {tuple(m.plan.input_shape) for m in models}
    if len(shapes) != 1:
        raise ValueError(f"models disagree on input shape: {sorted(shapes)}")
    total = None
    for m in models:
        c = predict(m, X)
        total = c if total is None else total + c
    return total / len(models)


def ensemble_predict(models: list, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average the voters' confidences; class is the argmax (ties -> gamma)."""
    conf = ensemble_confidences(models, X)
    return conf, (conf[:, PROTON] > conf[:, GAMMA]).astype(np.int64)


def fitness_key(value: float | None) -> float:
    """Sort key placing INVALID (and missing) below every valid fitness."""
    if value is None or value == INVALID or not np.isfinite(value):
        return -np.inf
    return float(value)


def write_roc_csv(roc: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fp, tp in roc.points:
            w.writerow([f"{t:.10g}", f"{fp:.10g}", f"{tp:.10g}"])


def read_roc_csv(path: str | Path) -> RocCurve:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return RocCurve(
        np.array([float(r["threshold"]) for r in rows]),
        np.array([float(r["fpr"]) for r in rows]),
        np.array([float(r["tpr"]) for r in rows]),
    )
