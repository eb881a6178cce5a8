"""Forward/backward passes for the six layer kinds, channels-last (N, H, W, C)."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def same_pads(d: int, k: int, s: int) -> tuple[int, int]:
    out = -(-d // s)
    total = max((out - 1) * s + k - d, 0)
    return total // 2, total - total // 2


def activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return z
    if act == "relu":
        return np.maximum(z, 0)
    if act == "sigmoid":
        return expit(z)
    if act == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {act!r}")


def activation_grad(dy: np.ndarray, z: np.ndarray, y: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return dy
    if act == "relu":
        return dy * (z > 0)
    if act == "sigmoid":
        return dy * y * (1 - y)
    raise ValueError(f"no standalone gradient for {act!r}")


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.out_shape: tuple[int, ...] = ()

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator | None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flops(self) -> float:
        """Approximate forward floating-point operations per sample."""
        return float(np.prod(self.out_shape))

    def elements(self) -> float:
        """Array elements written per sample in the forward pass."""
        return float(np.prod(self.out_shape))


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_shape, filters, k, stride, padding, act, bias, rng, dtype):
        super().__init__()
        h, w, c = in_shape
        self.in_shape, self.k, self.s, self.padding, self.act, self.use_bias = in_shape, k, stride, padding, act, bias
        if padding == "same":
            self.pad_h, self.pad_w = same_pads(h, k, stride), same_pads(w, k, stride)
        else:
            self.pad_h = self.pad_w = (0, 0)
        hp, wp = h + sum(self.pad_h), w + sum(self.pad_w)
        self.ho, self.wo = (hp - k) // stride + 1, (wp - k) // stride + 1
        self.out_shape = (self.ho, self.wo, filters)
        self.params["W"] = glorot_uniform((k, k, c, filters), k * k * c, k * k * filters, rng, dtype)
        if bias:
            self.params["b"] = np.zeros(filters, dtype=dtype)

    def _cols(self, x: np.ndarray) -> np.ndarray:
        if any(self.pad_h) or any(self.pad_w):
            x = np.pad(x, ((0, 0), self.pad_h, self.pad_w, (0, 0)))
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))
        win = win[:, : self.s * self.ho : self.s, : self.s * self.wo : self.s]
        # (N, Ho, Wo, C, k, k) -> rows of (k, k, C) patches
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, self.k * self.k * x.shape[-1])

    def forward(self, x, training, rng):
        n = x.shape[0]
        cols = self._cols(x)
        W = self.params["W"]
        z = cols @ W.reshape(-1, W.shape[-1])
        if self.use_bias:
            z += self.params["b"]
        z = z.reshape(n, self.ho, self.wo, -1)
        y = activate(z, self.act)
        self._cache = (x.shape, cols, z, y)
        return y

    def backward(self, dy):
        x_shape, cols, z, y = self._cache
        W = self.params["W"]
        dz = activation_grad(dy, z, y, self.act).reshape(-1, W.shape[-1])
        self.grads["W"] = (cols.T @ dz).reshape(W.shape)
        if self.use_bias:
            self.grads["b"] = dz.sum(axis=0)
        n, h, w, c = x_shape
        k, s = self.k, self.s
        dcols = (dz @ W.reshape(-1, W.shape[-1]).T).reshape(n, self.ho, self.wo, k, k, c)
        dxp = np.zeros((n, h + sum(self.pad_h), w + sum(self.pad_w), c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * self.ho : s, j : j + s * self.wo : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, self.pad_h[0] : self.pad_h[0] + h, self.pad_w[0] : self.pad_w[0] + w, :]

    def flops(self):
        k, c = self.k, self.in_shape[2]
        return 2.0 * self.ho * self.wo * k * k * c * self.out_shape[2]

    def elements(self):
        return float(self.ho * self.wo * (self.k * self.k * self.in_shape[2] + self.out_shape[2]))


class Pool2D(Layer):
    def __init__(self, in_shape, method, k, stride, padding):
        super().__init__()
        h, w, c = in_shape
        self.kind = f"pool-{method}"
        self.method, self.k, self.s, self.padding = method, k, stride, padding
        if padding == "same":
            self.pad_h, self.pad_w = same_pads(h, k, stride), same_pads(w, k, stride)
        else:
            self.pad_h = self.pad_w = (0, 0)
        hp, wp = h + sum(self.pad_h), w + sum(self.pad_w)
        self.ho, self.wo = (hp - k) // stride + 1, (wp - k) // stride + 1
        self.out_shape = (self.ho, self.wo, c)
        if method == "avg":
            # padded cells are excluded from the average
            ones = np.pad(np.ones((h, w)), (self.pad_h, self.pad_w))
            cnt = sliding_window_view(ones, (k, k))[:: stride, :: stride][: self.ho, : self.wo].sum(axis=(-1, -2))
            self.count = cnt[None, :, :, None]

    def _windows(self, x: np.ndarray) -> np.ndarray:
        if any(self.pad_h) or any(self.pad_w):
            fill = -np.inf if self.method == "max" else 0.0
            x = np.pad(x, ((0, 0), self.pad_h, self.pad_w, (0, 0)), constant_values=fill)
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))
        return win[:, : self.s * self.ho : self.s, : self.s * self.wo : self.s]

    def forward(self, x, training, rng):
        win = self._windows(x)
        if self.method == "max":
            flat = win.reshape(*win.shape[:4], -1)
            idx = flat.argmax(axis=-1)
            y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
            self._cache = (x.shape, idx)
        else:
            y = (win.sum(axis=(-1, -2)) / self.count).astype(x.dtype)
            self._cache = (x.shape, None)
        return y

    def backward(self, dy):
        x_shape, idx = self._cache
        n, h, w, c = x_shape
        k, s = self.k, self.s
        dxp = np.zeros((n, h + sum(self.pad_h), w + sum(self.pad_w), c), dtype=dy.dtype)
        g = dy if self.method == "max" else dy / self.count
        for i in range(k):
            for j in range(k):
                contrib = g * (idx == i * k + j) if self.method == "max" else g
                dxp[:, i : i + s * self.ho : s, j : j + s * self.wo : s, :] += contrib
        return dxp[:, self.pad_h[0] : self.pad_h[0] + h, self.pad_w[0] : self.pad_w[0] + w, :]

    def flops(self):
        return float(self.ho * self.wo * self.out_shape[2] * self.k * self.k)

    def elements(self):
        return self.flops() + float(np.prod(self.out_shape))


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, in_shape, rate):
        super().__init__()
        self.rate = float(rate)
        self.out_shape = tuple(in_shape)

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class BatchNorm(Layer):
    kind = "batch-norm"

    def __init__(self, in_shape, dtype):
        super().__init__()
        c = in_shape[-1]
        self.out_shape = tuple(in_shape)
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def forward(self, x, training, rng):
        axes = tuple(range(x.ndim - 1))
        if training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= BN_MOMENTUM
            rm += (1 - BN_MOMENTUM) * mu
            rv *= BN_MOMENTUM
            rv += (1 - BN_MOMENTUM) * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, axes)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        xhat, inv, axes = self._cache
        m = dy.size // dy.shape[-1]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))

    def flops(self):
        return 4.0 * float(np.prod(self.out_shape))


class Dense(Layer):
    """Fully-connected layer; flattens spatial input.

    With ``act='softmax'`` the backward pass expects the gradient with
    respect to the logits (the combined softmax/cross-entropy gradient).
    """

    kind = "fc"

    def __init__(self, in_shape, units, act, bias, rng, dtype):
        super().__init__()
        fan_in = int(np.prod(in_shape))
        self.in_shape, self.act, self.use_bias = tuple(in_shape), act, bias
        self.out_shape = (units,)
        self.params["W"] = glorot_uniform((fan_in, units), fan_in, units, rng, dtype)
        if bias:
            self.params["b"] = np.zeros(units, dtype=dtype)

    def forward(self, x, training, rng):
        x2 = x.reshape(x.shape[0], -1)
        z = x2 @ self.params["W"]
        if self.use_bias:
            z = z + self.params["b"]
        y = activate(z, self.act)
        self._cache = (x.shape, x2, z, y)
        return y

    def backward(self, dy):
        x_shape, x2, z, y = self._cache
        dz = dy if self.act == "softmax" else activation_grad(dy, z, y, self.act)
        self.grads["W"] = x2.T @ dz
        if self.use_bias:
            self.grads["b"] = dz.sum(axis=0)
        return (dz @ self.params["W"].T).reshape(x_shape)

    def flops(self):
        return 2.0 * self.params["W"].size
