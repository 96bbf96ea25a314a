"""Layers with hand-written backward passes.

Each layer caches what its backward needs from the most recent forward.
``forward(x, mode, domain)`` / ``backward(grad)`` is the whole contract;
parameter gradients accumulate into ``Parameter.grad``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, StateError, as_tensor
from .whitening import (
    BatchStats,
    DegenerateBatchError,
    Domain,
    DwtLayer,
    UninitializedStatsError,
    _flatten_features,
    _unflatten_features,
    fold_running_stats,
    group_moments,
)


class Layer:
    def parameters(self):
        return []

    def _pop_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward")
        self._cache = None
        return cache


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    """``x W + b``. Pass ``bias=False`` when a normalisation layer follows,
    since its mean subtraction cancels the bias."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        self.din, self.dout = din, dout
        self.W = Parameter(he_uniform(rng, din, (din, dout)), name="W")
        self.b = Parameter(np.zeros(dout), weight_decay_exempt=True, name="b") if bias else None
        self._cache = None

    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeError(f"Dense expects (m, {self.din}), got {x.shape}")
        self._cache = x
        out = x @ self.W.value
        return out if self.b is None else out + self.b.value

    def backward(self, grad):
        x = self._pop_cache()
        self.W.grad += x.T @ grad
        if self.b is not None:
            self.b.grad += grad.sum(axis=0)
        return grad @ self.W.value.T


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


class Conv2d(Layer):
    """Cross-correlation via im2col. ``padding`` is ``"same"`` or ``"valid"``."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None, bias: bool = True):
        if padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        if padding == "same" and k % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if padding == "same" else 0
        self.padding = padding
        self.W = Parameter(he_uniform(rng, cin * k * k, (cout, cin, k, k)), name="W")
        self.b = Parameter(np.zeros(cout), weight_decay_exempt=True, name="b") if bias else None
        self._cache = None

    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def out_hw(self, h, w):
        s, k, p = self.stride, self.k, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _im2col(self, x):
        # (m, c, h, w) -> (m, ho, wo, c*k*k)
        xp = _pad(x, self.pad)
        win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride]
        m, c, ho, wo = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(m, ho, wo, c * self.k * self.k)

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"Conv2d expects (m, {self.cin}, h, w), got {x.shape}")
        cols = self._im2col(x)
        wmat = self.W.value.reshape(self.cout, -1)
        out = cols @ wmat.T
        if self.b is not None:
            out = out + self.b.value
        self._cache = (x.shape, cols)
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        xshape, cols = self._pop_cache()
        m, c, h, w = xshape
        g = grad.transpose(0, 2, 3, 1)  # (m, ho, wo, cout)
        ho, wo = g.shape[1:3]
        wmat = self.W.value.reshape(self.cout, -1)
        self.W.grad += np.einsum("mhwo,mhwk->ok", g, cols).reshape(self.W.value.shape)
        if self.b is not None:
            self.b.grad += g.sum(axis=(0, 1, 2))
        dcols = (g @ wmat).reshape(m, ho, wo, c, self.k, self.k)
        p, s = self.pad, self.stride
        dxp = np.zeros((m, c, h + 2 * p, w + 2 * p))
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        x = as_tensor(x)
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return np.where(self._pop_cache(), grad, 0.0)


class MaxPool2d(Layer):
    """Non-overlapping ``size x size`` max-pool; ties go to the first element in row-major order."""

    def __init__(self, size: int = 2):
        self.size = size
        self._cache = None

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        x = as_tensor(x)
        m, c, h, w = x.shape
        s = self.size
        ho, wo = h // s, w // s
        blocks = x[:, :, :ho * s, :wo * s].reshape(m, c, ho, s, wo, s)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(m, c, ho, wo, s * s)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (m, c, h, w), idx = self._pop_cache()
        s = self.size
        ho, wo = grad.shape[2:]
        blocks = np.zeros((m, c, ho, wo, s * s))
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(m, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((m, c, h, w))
        dx[:, :, :ho * s, :wo * s] = blocks.reshape(m, c, ho * s, wo * s)
        return dx


class Flatten(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        x = as_tensor(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._pop_cache())


class BatchNorm(Layer):
    """Per-feature standardisation with separate running statistics per domain.

    Statistics come from the same moment routine as :class:`DwtLayer` with
    ``g = 1``, so the two layers agree bit for bit in that case.
    """

    def __init__(self, d: int, epsilon: float = 1e-5, rho: float = 0.1):
        self.d = d
        self.epsilon = epsilon
        self.rho = rho
        self.gamma = Parameter(np.ones(d), weight_decay_exempt=True, name="gamma")
        self.beta = Parameter(np.zeros(d), weight_decay_exempt=True, name="beta")
        self.running = {Domain.SOURCE: None, Domain.TARGET: None}
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def update_running_stats(self, domain, fresh):
        fold_running_stats(self.running, domain, fresh, self.rho)

    def forward(self, x, mode="train", domain=Domain.TARGET):
        flat, shape = _flatten_features(as_tensor(x))
        m, d = flat.shape
        if d != self.d:
            raise ShapeError(f"BatchNorm expects {self.d} features, got {d}")
        if mode == "train":
            if m < 2:
                raise DegenerateBatchError(f"need at least 2 samples, got {m}")
            mu, xc, cov = group_moments(flat, 1)
            var = cov + self.epsilon * np.eye(1)
            self.update_running_stats(domain, BatchStats(mu, var, m))
        elif mode == "eval":
            stats = self.running[domain]
            if stats is None:
                raise UninitializedStatsError(f"no running statistics for {domain.value} domain")
            var = stats.sigma
            xc = flat.reshape(m, d, 1) - stats.mu
        else:
            raise ValueError(f"unknown mode {mode!r}")
        std = np.sqrt(var[:, 0, 0])
        xhat = (xc[:, :, 0] / std)
        self._cache = (mode, xhat, std, shape)
        return _unflatten_features(self.gamma.value * xhat + self.beta.value, shape)

    def backward(self, grad):
        mode, xhat, std, shape = self._pop_cache()
        G, _ = _flatten_features(as_tensor(grad))
        self.gamma.grad += np.sum(G * xhat, axis=0)
        self.beta.grad += np.sum(G, axis=0)
        dxhat = G * self.gamma.value
        if mode == "eval":
            return _unflatten_features(dxhat / std, shape)
        dx = (dxhat - dxhat.mean(axis=0) - xhat * np.mean(dxhat * xhat, axis=0)) / std
        return _unflatten_features(dx, shape)


__all__ = [
    "Layer", "Dense", "Conv2d", "ReLU", "MaxPool2d", "Flatten", "BatchNorm", "DwtLayer", "he_uniform",
]
