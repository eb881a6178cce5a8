"""Classic discriminants: S40, Compactness and a Fisher linear discriminant.

All scores are oriented so that larger means more proton-like and are
scored with the same ROC fitness as the networks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DESK_GEOMETRY, Geometry, Partition, array_mask, station_positions
from .metrics import accuracy as _accuracy
from .metrics import fitness as _fitness
from .metrics import roc_curve

__all__ = [
    "S40_DISTANCE",
    "BIN_WIDTH",
    "MIN_REFERENCE_EVENTS",
    "RadialProfile",
    "DiscriminantScores",
    "FisherModel",
    "BaselineModel",
    "estimate_core",
    "s40",
    "radial_profile",
    "reference_ldf",
    "compactness",
    "classic_features",
    "fisher_fit",
    "baseline_fitness",
    "fit_baselines",
]

S40_DISTANCE = 40.0
BIN_WIDTH = 2.0
MIN_REFERENCE_EVENTS = 50
CHI2_EPS = 1e-6
RIDGE = 1e-9


@dataclass(frozen=True)
class RadialProfile:
    edges: np.ndarray  # (n_bins + 1,)
    means: np.ndarray  # (n_bins,)

    def normalized(self) -> np.ndarray:
        return self.means / self.means.sum()


@dataclass(frozen=True)
class DiscriminantScores:
    scores: np.ndarray
    higher_is_proton: bool = True

    def oriented(self) -> np.ndarray:
        s = np.asarray(self.scores, dtype=np.float64)
        return s if self.higher_is_proton else -s


def estimate_core(event: np.ndarray, geometry: Geometry = DESK_GEOMETRY) -> tuple[float, float]:
    """Signal-weighted centroid of the station positions, in metres."""
    grid = np.asarray(event, dtype=np.float64)
    total = grid.sum()
    if not total > 0:
        raise ValueError("cannot estimate the core of an event with no signal")
    x, y = station_positions(geometry)
    return float((grid * x).sum() / total), float((grid * y).sum() / total)


def _distances(core, geometry: Geometry) -> np.ndarray:
    x, y = station_positions(geometry)
    return np.hypot(x - core[0], y - core[1])


def s40(event: np.ndarray, core, geometry: Geometry = DESK_GEOMETRY) -> float:
    """Hottest-station signal over total signal, for stations beyond 40 m."""
    grid = np.asarray(event, dtype=np.float64)
    far = grid[_distances(core, geometry) > S40_DISTANCE]
    total = far.sum()
    if far.size == 0 or total <= 0:
        return 0.0
    return float(far.max() / total)


def _bin_edges(geometry: Geometry) -> np.ndarray:
    n = int(np.ceil(geometry.radius / BIN_WIDTH))
    return np.arange(n + 1) * BIN_WIDTH


def _binned(event: np.ndarray, core, geometry: Geometry, edges: np.ndarray) -> np.ndarray:
    """Mean station signal per radial bin; NaN where the bin has no station."""
    d = _distances(core, geometry)
    inside = array_mask(geometry) & (d < edges[-1])
    idx = np.digitize(d[inside], edges) - 1
    vals = np.asarray(event, dtype=np.float64)[inside]
    n_bins = len(edges) - 1
    sums = np.bincount(idx, weights=vals, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    out = np.full(n_bins, np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def _interpolate(values: np.ndarray, centres: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(values)
    if not ok.any():
        raise ValueError("profile has no populated bins")
    return np.interp(centres, centres[ok], values[ok])


def radial_profile(event: np.ndarray, core=None, geometry: Geometry = DESK_GEOMETRY) -> RadialProfile:
    """Binned profile of one event, empty bins interpolated."""
    core = estimate_core(event, geometry) if core is None else core
    edges = _bin_edges(geometry)
    centres = 0.5 * (edges[1:] + edges[:-1])
    return RadialProfile(edges, _interpolate(_binned(event, core, geometry, edges), centres))


def reference_ldf(events, geometry: Geometry = DESK_GEOMETRY, cores=None) -> RadialProfile:
    """Average gamma profile from training events.

    ``events`` is either an ``(n, H, W)`` array of gamma showers or a training
    ``Partition`` (its gammas are used). Partitions tagged with any other name
    are refused so held-out data cannot leak into the reference.
    """
    if isinstance(events, Partition):
        name = events.meta.get("name", "train")
        if name != "train":
            raise ValueError(f"reference LDF must come from the training partition, got {name!r}")
        sel = events.y == 0
        cores = None if cores is None else np.asarray(cores)[sel]
        events = events.X[sel]
    events = np.asarray(events)
    if len(events) < MIN_REFERENCE_EVENTS:
        raise ValueError(f"reference LDF needs at least {MIN_REFERENCE_EVENTS} gamma events, got {len(events)}")
    edges = _bin_edges(geometry)
    centres = 0.5 * (edges[1:] + edges[:-1])
    rows = np.stack([
        _binned(ev, estimate_core(ev, geometry) if cores is None else cores[i], geometry, edges)
        for i, ev in enumerate(events)
    ])
    with np.errstate(invalid="ignore"):
        present = ~np.isnan(rows)
        sums = np.where(present, rows, 0.0).sum(axis=0)
        n = present.sum(axis=0)
        means = np.where(n > 0, sums / np.maximum(n, 1), np.nan)
    return RadialProfile(edges, _interpolate(means, centres))


def compactness(event: np.ndarray, core, ref: RadialProfile, geometry: Geometry = DESK_GEOMETRY) -> float:
    """Chi-square distance between the event's and the reference's normalised LDF.

    Only bins holding at least one station of this event take part; both
    profiles are renormalised to unit total over those bins.
    """
    prof = _binned(event, core, geometry, ref.edges)
    ok = ~np.isnan(prof)
    p = prof[ok]
    if not p.sum() > 0:
        raise ValueError("compactness undefined for an event with zero total signal")
    r = ref.means[ok]
    p = p / p.sum()
    r = r / r.sum()
    return float(np.sum((p - r) ** 2 / (r + CHI2_EPS)))


def classic_features(X: np.ndarray, ref: RadialProfile, geometry: Geometry = DESK_GEOMETRY) -> np.ndarray:
    """Per-event ``(compactness, s40)`` feature matrix."""
    out = np.empty((len(X), 2))
    for i, ev in enumerate(X):
        core = estimate_core(ev, geometry)
        out[i, 0] = compactness(ev, core, ref, geometry)
        out[i, 1] = s40(ev, core, geometry)
    return out


@dataclass(frozen=True)
class FisherModel:
    weights: np.ndarray

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights


def fisher_fit(features: np.ndarray, labels) -> FisherModel:
    """w proportional to S_w^-1 (mu_proton - mu_gamma), unit-normalised."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels).astype(np.int64)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("Fisher discriminant needs both classes")
    g, p = X[y == 0], X[y == 1]
    sw = np.zeros((X.shape[1], X.shape[1]))
    for part in (g, p):
        c = part - part.mean(axis=0)
        sw += c.T @ c
    sw /= max(len(X) - 2, 1)
    diff = p.mean(axis=0) - g.mean(axis=0)
    try:
        w = np.linalg.solve(sw, diff)
    except np.linalg.LinAlgError:
        w = None
    if w is None or not np.all(np.isfinite(w)) or np.linalg.cond(sw) > 1e15:
        try:
            w = np.linalg.solve(sw + RIDGE * np.eye(len(sw)), diff)
        except np.linalg.LinAlgError:
            raise ValueError("within-class covariance is degenerate even after the ridge") from None
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0:
        raise ValueError("within-class covariance is degenerate even after the ridge")
    return FisherModel(w / norm)


def baseline_fitness(scores: DiscriminantScores | np.ndarray, labels) -> float:
    if not isinstance(scores, DiscriminantScores):
        scores = DiscriminantScores(np.asarray(scores))
    s = scores.oriented()
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return _fitness(s, labels)


def score_accuracy(scores: np.ndarray, labels, threshold: float) -> float:
    """Accuracy of the cut ``score >= threshold`` means proton."""
    s = np.asarray(scores, dtype=np.float64)
    conf = np.stack([(s < threshold).astype(float), (s >= threshold).astype(float)], axis=1)
    return _accuracy(conf, labels)


def best_threshold(scores: np.ndarray, labels) -> float:
    """Threshold maximising the training accuracy of a score cut."""
    roc = roc_curve(scores, labels)
    y = np.asarray(labels)
    n_pos, n_neg = (y == 1).sum(), (y == 0).sum()
    acc = (roc.tpr * n_pos + (1 - roc.fpr) * n_neg) / len(y)
    return float(roc.thresholds[int(np.argmax(acc))])


@dataclass
class BaselineModel:
    """Everything fitted on the training partition."""

    geometry: Geometry
    reference: RadialProfile
    fisher: FisherModel
    thresholds: dict[str, float]

    def scores(self, X: np.ndarray) -> dict[str, np.ndarray]:
        feats = classic_features(X, self.reference, self.geometry)
        return {"compactness": feats[:, 0], "s40": feats[:, 1], "fisher": self.fisher.score(feats)}

    def evaluate(self, X: np.ndarray, y) -> dict[str, tuple[float, float]]:
        """method -> (fitness, accuracy at the train-chosen cut)."""
        out = {}
        for name, s in self.scores(X).items():
            out[name] = (baseline_fitness(s, y), score_accuracy(s, y, self.thresholds[name]))
        return out


def fit_baselines(train: Partition, geometry: Geometry = DESK_GEOMETRY) -> BaselineModel:
    ref = reference_ldf(train, geometry)
    feats = classic_features(train.X, ref, geometry)
    fisher = fisher_fit(feats, train.y)
    train_scores = {"compactness": feats[:, 0], "s40": feats[:, 1], "fisher": fisher.score(feats)}
    thresholds = {k: best_threshold(v, train.y) for k, v in train_scores.items()}
    return BaselineModel(geometry, ref, fisher, thresholds)
