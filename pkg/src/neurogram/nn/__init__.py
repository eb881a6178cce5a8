"""Numpy network engine: layers, optimizers, training and persistence."""
from .model import (
    DEFAULT_FLOP_RATE,
    EarlyStopping,
    ModelFormatError,
    TrainBudget,
    TrainedModel,
    VirtualClock,
    WallClock,
    assemble,
    cross_entropy,
    forward,
    gradients,
    load_model,
    model_from_bytes,
    model_to_bytes,
    predict,
    save_model,
    train,
)
from .optim import Optimizer, adam_step, rmsprop_step, sgd_step

__all__ = [
    "DEFAULT_FLOP_RATE",
    "EarlyStopping",
    "ModelFormatError",
    "TrainBudget",
    "TrainedModel",
    "VirtualClock",
    "WallClock",
    "assemble",
    "cross_entropy",
    "forward",
    "gradients",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "predict",
    "save_model",
    "train",
    "Optimizer",
    "adam_step",
    "rmsprop_step",
    "sgd_step",
]
