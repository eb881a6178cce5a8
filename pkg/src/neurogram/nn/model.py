"""Network assembly, training with early stopping and budgets, and persistence."""
from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from ..phenotype import NetworkPlan, check_valid, plan_from_phenotypes
from .layers import BatchNorm, Conv2D, Dense, Dropout, Layer, Pool2D
from .optim import Optimizer

__all__ = [
    "TrainBudget",
    "TrainedModel",
    "EarlyStopping",
    "WallClock",
    "VirtualClock",
    "DEFAULT_FLOP_RATE",
    "assemble",
    "forward",
    "gradients",
    "cross_entropy",
    "train",
    "predict",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
    "ModelFormatError",
]

MODEL_MAGIC = b"NGMD"
MODEL_VERSION = 1
# cost model behind VirtualClock, roughly one numpy core
DEFAULT_FLOP_RATE = 3.0e10
ELEMENT_COST = 2.0e-9


@dataclass(frozen=True)
class TrainBudget:
    max_seconds: float
    patience: int = 5

    def __post_init__(self):
        if not self.max_seconds > 0:
            raise ValueError("max_seconds must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class WallClock:
    def __init__(self):
        self._t0 = time.perf_counter()

    def charge(self, seconds: float) -> None:
        pass

    def elapsed(self) -> float:
        return time.perf_counter() - self._t0


class VirtualClock:
    """Deterministic clock advanced by a modelled cost instead of real time.

    Training results then do not depend on machine load, which keeps seeded
    runs and resumed checkpoints reproducible.
    """

    def __init__(self):
        self._seconds = 0.0

    def charge(self, seconds: float) -> None:
        self._seconds += seconds

    def elapsed(self) -> float:
        return self._seconds


@dataclass
class TrainedModel:
    plan: NetworkPlan
    layers: list[Layer]
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    history: list[tuple[float, float, float]] = field(default_factory=list)
    status: str = "untrained"  # untrained | trained | failed
    stop_reason: str = ""
    epochs: int = 0
    dtype: type = np.float32

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def param_names(self) -> list[str]:
        return [f"{i}.{k}" for i, layer in enumerate(self.layers) for k in layer.params]

    def state(self) -> list[np.ndarray]:
        """Copies of every parameter and running buffer."""
        return [a.copy() for layer in self.layers for a in (*layer.params.values(), *layer.buffers.values())]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for layer in self.layers:
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k][...] = next(it)

    def flops_per_sample(self) -> float:
        return sum(layer.flops() for layer in self.layers)

    def cost_per_sample(self) -> float:
        """Modelled seconds for one forward pass of one sample."""
        elems = sum(layer.elements() for layer in self.layers)
        return self.flops_per_sample() / DEFAULT_FLOP_RATE + elems * ELEMENT_COST


def assemble(plan: NetworkPlan, rng: np.random.Generator, dtype=np.float32) -> TrainedModel:
    """Build layers with Glorot-uniform weights, zero biases, unit BN scale."""
    ok, reason = check_valid(plan)
    if not ok:
        raise ValueError(f"invalid plan: {reason}")
    shape: tuple[int, ...] = tuple(plan.input_shape)
    layers: list[Layer] = []
    for spec in plan.layers:
        a = spec.attrs
        if spec.kind == "conv":
            layer = Conv2D(shape, a["num-filters"], a["filter-shape"], a["stride"], a["padding"],
                           a["act"], a["bias"], rng, dtype)
        elif spec.kind in ("pool-avg", "pool-max"):
            layer = Pool2D(shape, spec.kind[5:], a["kernel-size"], a["stride"], a["padding"])
        elif spec.kind == "dropout":
            layer = Dropout(shape, a["rate"])
        elif spec.kind == "batch-norm":
            layer = BatchNorm(shape, dtype)
        else:
            layer = Dense(shape, a["num-units"], a["act"], a["bias"], rng, dtype)
        layers.append(layer)
        shape = layer.out_shape
    return TrainedModel(plan, layers, dtype=dtype)


def _as_input(model: TrainedModel, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=model.dtype)
    if x.ndim == 3:
        x = x[..., None]
    if tuple(x.shape[1:]) != tuple(model.plan.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match plan input {model.plan.input_shape}")
    return x


def forward(model: TrainedModel, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class confidences for an already-normalised batch."""
    x = _as_input(model, batch)
    if training and rng is None:
        rng = np.random.default_rng(0)
    for layer in model.layers:
        x = layer.forward(x, training, rng)
    return x


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, 1.0)
    return float(-(onehot * np.log(p)).sum(axis=1).mean())


def _onehot(labels: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(dtype)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1
    return out


def gradients(model: TrainedModel, batch: np.ndarray, labels: np.ndarray, training: bool = True,
              rng: np.random.Generator | None = None) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its exact gradients.

    Gradients come back in :meth:`TrainedModel.parameters` order. A
    non-finite loss raises ``FloatingPointError``.
    """
    probs = forward(model, batch, training=training, rng=rng)
    y = _onehot(labels, model.plan.n_classes, probs.dtype)
    loss = cross_entropy(probs, y)
    if not np.isfinite(loss) or not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite loss")
    d = (probs - y) / probs.shape[0]
    for layer in reversed(model.layers):
        d = layer.backward(d)
    return loss, [layer.grads[k] for layer in model.layers for k in layer.params]


class EarlyStopping:
    """Tracks the best validation loss and counts non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.best_state: list[np.ndarray] | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, model: TrainedModel | None = None) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            if model is not None:
                self.best_state = model.state()
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _eval_loss(model: TrainedModel, X: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for i in range(0, len(X), chunk):
        p = forward(model, X[i : i + chunk], training=False)
        total += cross_entropy(p, _onehot(y[i : i + chunk], model.plan.n_classes, p.dtype)) * len(p)
    return total / len(X)


def train(
    model: TrainedModel,
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    budget: TrainBudget,
    rng: np.random.Generator,
    clock: WallClock | VirtualClock | None = None,
    max_epochs: int | None = None,
) -> TrainedModel:
    """Mini-batch training with early stopping on validation loss.

    Stops after ``budget.patience`` epochs without improvement or once the
    clock passes ``budget.max_seconds`` (checked at epoch boundaries), and
    restores the best-validation weights. A non-finite loss marks the model
    ``failed`` instead of raising.
    """
    spec = model.plan.learning
    opt = Optimizer(spec.algorithm, spec.hyper)
    clock = WallClock() if clock is None else clock
    params = model.parameters()
    stopper = EarlyStopping(budget.patience)
    n = len(train_X)
    bs = max(1, int(spec.batch_size))
    per_sample = model.cost_per_sample()
    epoch = 0
    model.stop_reason = "max_epochs"
    while max_epochs is None or epoch < max_epochs:
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                for i in range(0, n, bs):
                    idx = order[i : i + bs]
                    loss, grads = gradients(model, train_X[idx], train_y[idx], training=True, rng=rng)
                    opt.step(params, grads)
                    losses.append(loss * len(idx))
                val_loss = _eval_loss(model, val_X, val_y)
        except FloatingPointError:
            model.status, model.stop_reason = "failed", "diverged"
            model.epochs = epoch + 1
            return model
        if not np.isfinite(val_loss) or not all(np.all(np.isfinite(p)) for p in params):
            model.status, model.stop_reason = "failed", "diverged"
            model.epochs = epoch + 1
            return model
        clock.charge(per_sample * (3.0 * n + len(val_X)))
        model.history.append((sum(losses) / n, val_loss, time.perf_counter() - t0))
        stop = stopper.update(epoch, val_loss, model)
        epoch += 1
        if stop:
            model.stop_reason = "early_stop"
            break
        if clock.elapsed() >= budget.max_seconds:
            model.stop_reason = "budget"
            break
    if stopper.best_state is not None:
        model.load_state(stopper.best_state)
    model.status = "trained"
    model.epochs = epoch
    return model


def predict(model: TrainedModel, events: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per-event ``(gamma, proton)`` confidences in evaluation mode.

    Raw event grids are normalised with the model's stored statistics.
    """
    X = np.asarray(events, dtype=np.float64)
    if model.norm_mean is not None:
        X = (X - model.norm_mean) / model.norm_std
    out = [forward(model, X[i : i + chunk], training=False) for i in range(0, len(X), chunk)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.plan.n_classes))


_DTYPES = {0: "<f4", 1: "<f8"}


class ModelFormatError(ValueError):
    pass


def _write_array(buf: io.BytesIO, name: str, a: np.ndarray, code: int = 0) -> None:
    a = np.ascontiguousarray(a, dtype=_DTYPES[code])
    nb = name.encode()
    buf.write(struct.pack("<I", len(nb)) + nb)
    buf.write(struct.pack("<BI", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(a.tobytes())


def _read_array(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (ln,) = struct.unpack("<I", _read(buf, 4))
    name = _read(buf, ln).decode()
    code, ndim = struct.unpack("<BI", _read(buf, 5))
    if code not in _DTYPES:
        raise ModelFormatError(f"unknown array dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    width = np.dtype(_DTYPES[code]).itemsize
    data = np.frombuffer(_read(buf, width * count), dtype=_DTYPES[code]).reshape(shape)
    return name, data.copy()


def _read(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise ModelFormatError("truncated model file")
    return b


def model_to_bytes(model: TrainedModel) -> bytes:
    """Versioned binary: phenotype lines, input shape, norm stats (float64),
    then per-layer little-endian float32 arrays with shape headers."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + struct.pack("<I", MODEL_VERSION))
    text = "\n".join(model.plan.phenotypes).encode()
    buf.write(struct.pack("<I", len(text)) + text)
    buf.write(struct.pack("<3I", *model.plan.input_shape))
    buf.write(struct.pack("<B", model.norm_mean is not None))
    if model.norm_mean is not None:
        _write_array(buf, "norm_mean", model.norm_mean, 1)
        _write_array(buf, "norm_std", model.norm_std, 1)
    arrays = [(f"{i}.{k}", v) for i, layer in enumerate(model.layers)
              for k, v in (*layer.params.items(), *layer.buffers.items())]
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays:
        _write_array(buf, name, a)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> TrainedModel:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MODEL_MAGIC:
        raise ModelFormatError("not a model file (magic mismatch)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (ln,) = struct.unpack("<I", _read(buf, 4))
    lines = _read(buf, ln).decode().split("\n")
    shape = struct.unpack("<3I", _read(buf, 12))
    try:
        plan = plan_from_phenotypes(lines, shape)
    except ValueError as e:
        raise ModelFormatError(f"bad phenotype section: {e}") from None
    model = assemble(plan, np.random.default_rng(0))
    (has_norm,) = struct.unpack("<B", _read(buf, 1))
    if has_norm:
        model.norm_mean = _read_array(buf)[1].astype(np.float64)
        model.norm_std = _read_array(buf)[1].astype(np.float64)
    (count,) = struct.unpack("<I", _read(buf, 4))
    stored = dict(_read_array(buf) for _ in range(count))
    for i, layer in enumerate(model.layers):
        for d in (layer.params, layer.buffers):
            for k in d:
                key = f"{i}.{k}"
                if key not in stored or stored[key].shape != d[k].shape:
                    raise ModelFormatError(f"model file lacks a matching array for {key}")
                d[k][...] = stored[key]
    model.status = "trained"
    return model


def save_model(model: TrainedModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> TrainedModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
