"""Gradient-descent (with momentum / Nesterov), Adam and RMSprop updates.

Each ``*_step`` updates one parameter array given its gradient, a per-array
state dict and the number ``t`` of updates already applied (0 on the first
call). All three use inverse-time learning-rate decay
``lr_t = lr / (1 + decay * t)``. Adam and RMSprop read an optional
``epsilon`` entry from ``hyper`` and fall back to :data:`EPSILON`.
"""
from __future__ import annotations

import numpy as np

EPSILON = 1e-8


def decayed_lr(hyper: dict, t: int) -> float:
    return hyper["lr"] / (1.0 + hyper.get("decay", 0.0) * t)


def sgd_step(w, g, state: dict, hyper: dict, t: int):
    lr = decayed_lr(hyper, t)
    m = hyper.get("momentum", 0.0)
    v = state.get("velocity")
    if v is None:
        v = np.zeros_like(w)
    v = m * v - lr * g
    state["velocity"] = v
    if hyper.get("nesterov", False):
        return w + m * v - lr * g, state
    return w + v, state


def adam_step(w, g, state: dict, hyper: dict, t: int):
    lr = decayed_lr(hyper, t)
    b1, b2 = hyper["beta1"], hyper["beta2"]
    m = state.get("m")
    v = state.get("v")
    if m is None:
        m, v = np.zeros_like(w), np.zeros_like(w)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    state["m"], state["v"] = m, v
    m_hat = m / (1 - b1 ** (t + 1))
    v_hat = v / (1 - b2 ** (t + 1))
    return w - lr * m_hat / (np.sqrt(v_hat) + hyper.get("epsilon", EPSILON)), state


def rmsprop_step(w, g, state: dict, hyper: dict, t: int):
    lr = decayed_lr(hyper, t)
    rho = hyper["rho"]
    a = state.get("accumulator")
    if a is None:
        a = np.zeros_like(w)
    a = rho * a + (1 - rho) * g * g
    state["accumulator"] = a
    return w - lr * g / np.sqrt(a + hyper.get("epsilon", EPSILON)), state


STEPS = {"gradient-descent": sgd_step, "adam": adam_step, "rmsprop": rmsprop_step}


class Optimizer:
    """Applies one of the step rules to a list of parameter arrays in place."""

    def __init__(self, algorithm: str, hyper: dict):
        if algorithm not in STEPS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        self.algorithm = algorithm
        self.hyper = dict(hyper)
        self._step = STEPS[algorithm]
        self.states: list[dict] = []
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.states:
            self.states = [{} for _ in params]
        for i, (w, g) in enumerate(zip(params, grads)):
            new, self.states[i] = self._step(w, g, self.states[i], self.hyper, self.t)
            w[...] = new
        self.t += 1
