"""scikit-learn style wrappers so the pieces compose with pipelines.

Inputs are event grids shaped ``(n, H, W)``; flat ``(n, H*W)`` input is
accepted when the geometry is known.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from . import baselines
from .datasets import DESK_GEOMETRY, DatasetBundle, Geometry, Partition, apply_norm, fit_norm
from .grammar import default_grammar, default_outer, desk_grammar, desk_outer, load_grammar, parse_outer
from .metrics import fitness

__all__ = [
    "check_events",
    "check_labels",
    "EventNormalizer",
    "ClassicFeatures",
    "FisherDiscriminant",
    "EvolvedCNNClassifier",
]


def check_events(X, geometry: Geometry | None = None, nonnegative: bool = False) -> np.ndarray:
    """Validate and reshape to ``(n, H, W)`` float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim == 2:
        if geometry is None:
            raise ValueError("flat events need a geometry to be reshaped")
        if X.shape[1] != geometry.height * geometry.width:
            raise ValueError(f"expected {geometry.height * geometry.width} features, got {X.shape[1]}")
        X = X.reshape(-1, geometry.height, geometry.width)
    if X.ndim != 3:
        raise ValueError(f"events must be (n, H, W), got shape {X.shape}")
    if geometry is not None and X.shape[1:] != (geometry.height, geometry.width):
        raise ValueError(f"grid {X.shape[1:]} does not match geometry {(geometry.height, geometry.width)}")
    if nonnegative and np.any(X < 0):
        raise ValueError("station signals must be non-negative")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind in "US":
        y = np.where(y == "proton", 1, np.where(y == "gamma", 0, -1))
    y = y.astype(np.int64).ravel()
    if len(y) != n:
        raise ValueError(f"{n} events but {len(y)} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 (gamma) or 1 (proton)")
    return y


class EventNormalizer(BaseEstimator, TransformerMixin):
    """Per-cell centring and scaling fitted on training events."""

    def fit(self, X, y=None):
        X = check_events(X)
        self.stats_ = fit_norm(X)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_events(X)
        if X.shape[1:] != self.stats_.mean.shape:
            raise ValueError(f"grid {X.shape[1:]} differs from the fitted {self.stats_.mean.shape}")
        return apply_norm(self.stats_, X)


class ClassicFeatures(BaseEstimator, TransformerMixin):
    """Events to ``(compactness, s40)``; the reference LDF is fitted on the
    gamma events passed to :meth:`fit`."""

    def __init__(self, geometry: Geometry | None = None):
        self.geometry = geometry

    def fit(self, X, y):
        geo = self.geometry or DESK_GEOMETRY
        X = check_events(X, geo, nonnegative=True)
        y = check_labels(y, len(X))
        self.reference_ = baselines.reference_ldf(X[y == 0], geo)
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        geo = self.geometry or DESK_GEOMETRY
        return baselines.classic_features(check_events(X, geo, nonnegative=True), self.reference_, geo)


class FisherDiscriminant(BaseEstimator, ClassifierMixin):
    """Linear discriminant; ``decision_function`` is oriented proton-high.

    The class cut is the training-accuracy-optimal threshold on the score.
    """

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_labels(y, len(X))
        self.model_ = baselines.fisher_fit(X, y)
        self.coef_ = self.model_.weights
        self.threshold_ = baselines.best_threshold(self.model_.score(X), y)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.score(check_array(X, dtype=np.float64))

    def predict(self, X):
        return (self.decision_function(X) >= self.threshold_).astype(np.int64)

    def fitness_score(self, X, y) -> float:
        return fitness(self.decision_function(X), check_labels(y, len(X)))


class EvolvedCNNClassifier(BaseEstimator, ClassifierMixin):
    """Runs one evolutionary search on ``fit`` and keeps its best network.

    ``fit`` carves stratified validation and test subsets out of the data it
    is given: validation drives early stopping, test scores individuals.
    """

    def __init__(self, lam: int = 4, generations: int = 10, default_budget_seconds: float = 10.0,
                 seed: int = 0, search_space: str = "desk", outer_structure: str | None = None,
                 validation_fraction: float = 0.1, test_fraction: float = 0.2, clock: str = "virtual",
                 workers: int = 1):
        self.lam = lam
        self.generations = generations
        self.default_budget_seconds = default_budget_seconds
        self.seed = seed
        self.search_space = search_space
        self.outer_structure = outer_structure
        self.validation_fraction = validation_fraction
        self.test_fraction = test_fraction
        self.clock = clock
        self.workers = workers

    def _space(self):
        if self.search_space == "desk":
            grammar, outer = desk_grammar(), desk_outer()
        elif self.search_space == "full":
            grammar, outer = default_grammar(), default_outer()
        else:
            grammar, outer = load_grammar(self.search_space), desk_outer()
        if self.outer_structure is not None:
            outer = parse_outer(self.outer_structure)
        return grammar, outer

    def fit(self, X, y):
        from .engine import EsConfig, run

        X = check_events(X)
        y = check_labels(y, len(X))
        Xa, Xt, ya, yt = train_test_split(X, y, test_size=self.test_fraction, stratify=y,
                                          random_state=self.seed)
        val = self.validation_fraction / (1.0 - self.test_fraction)
        Xtr, Xv, ytr, yv = train_test_split(Xa, ya, test_size=val, stratify=ya, random_state=self.seed)
        geo = Geometry(X.shape[1], X.shape[2])
        parts = {
            "train": Partition(Xtr.astype(np.float32), ytr, {"name": "train"}),
            "validation": Partition(Xv.astype(np.float32), yv, {"name": "validation"}),
            "test": Partition(Xt.astype(np.float32), yt, {"name": "test"}),
            "generalisation": Partition(Xt.astype(np.float32), yt, {"name": "generalisation"}),
        }
        grammar, outer = self._space()
        config = EsConfig(lam=self.lam, generations=self.generations,
                          default_budget_seconds=self.default_budget_seconds, seed=self.seed,
                          runs=1, clock=self.clock, workers=self.workers)
        self.state_ = run(config, grammar, outer, DatasetBundle(parts, geo))
        self.model_ = self.state_.parent.model
        self.best_fitness_ = self.state_.best_fitness
        self.phenotypes_ = list(self.model_.plan.phenotypes)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        from .nn.model import predict

        check_is_fitted(self, "model_")
        return predict(self.model_, check_events(X))

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        p = self.predict_proba(X)
        return (p[:, 1] > p[:, 0]).astype(np.int64)

    def fitness_score(self, X, y) -> float:
        return fitness(self.decision_function(X), check_labels(y, len(X)))
