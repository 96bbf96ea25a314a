"""Grouped Cholesky batch whitening with per-domain statistics.

Features are split into ``d // g`` contiguous groups of size ``g``; every
group gets its own mean and ``g x g`` covariance.  The whitening matrix of a
group is ``W = L^{-1}`` where ``L L^T = Sigma``.  It is never formed in the
forward pass, only applied by forward substitution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import (
    NotPositiveDefinite,
    Parameter,
    ShapeError,
    StateError,
    as_tensor,
    cholesky_lower,
    tri_solve_lower,
)


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class DegenerateBatchError(ValueError):
    pass


class UninitializedStatsError(StateError):
    pass


@dataclass
class BatchStats:
    """Statistics of all groups of one layer, stacked along axis 0.

    ``mu`` has shape ``(k, g)``, ``sigma`` ``(k, g, g)`` with the shrinkage
    already on its diagonal.
    """

    mu: np.ndarray
    sigma: np.ndarray
    count: int

    @property
    def n_groups(self) -> int:
        return self.mu.shape[0]

    @property
    def group_size(self) -> int:
        return self.mu.shape[1]

    def group(self, i: int) -> "BatchStats":
        return BatchStats(self.mu[i:i + 1].copy(), self.sigma[i:i + 1].copy(), self.count)

    def copy(self) -> "BatchStats":
        return BatchStats(self.mu.copy(), self.sigma.copy(), self.count)


def _split_groups(batch: np.ndarray, g: int) -> np.ndarray:
    m, d = batch.shape
    if g <= 0 or d % g:
        raise ShapeError(f"group size {g} does not divide feature count {d}")
    return batch.reshape(m, d // g, g)


def group_moments(batch: np.ndarray, g: int):
    """Mean ``(k, g)``, centred batch ``(m, k, g)`` and biased covariance ``(k, g, g)``.

    Batch norm uses this same routine with ``g = 1`` so that both layers see
    bit-identical statistics.
    """
    xg = _split_groups(batch, g)
    mu = xg.mean(axis=0)
    xc = xg - mu
    cov = np.einsum("mki,mkj->kij", xc, xc) / xg.shape[0]
    return mu, xc, cov


def batch_stats(batch, g: int, epsilon: float = 1e-5) -> BatchStats:
    batch = as_tensor(batch)
    if batch.ndim != 2:
        raise ShapeError(f"expected an m x d matrix, got {batch.shape}")
    if batch.shape[0] < 2:
        raise DegenerateBatchError(f"need at least 2 samples, got {batch.shape[0]}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    mu, _, cov = group_moments(batch, g)
    cov = cov + epsilon * np.eye(g)
    return BatchStats(mu, cov, batch.shape[0])


def whitening_matrix(stats: BatchStats) -> np.ndarray:
    """Lower-triangular ``W`` with ``W Sigma W^T = I`` (stacked per group)."""
    L = cholesky_lower(stats.sigma)
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    return tri_solve_lower(L, eye)


def _whiten(xc: np.ndarray, L: np.ndarray) -> np.ndarray:
    # xc (m, k, g), L (k, g, g) -> L^{-1} x_i for each sample and group
    z = tri_solve_lower(L, np.transpose(xc, (1, 2, 0)))
    return np.transpose(z, (2, 0, 1))


def bw_forward(batch, stats: BatchStats, gamma, beta) -> np.ndarray:
    """Whiten each group with ``stats`` then scale and shift per feature."""
    batch = as_tensor(batch)
    m, d = batch.shape
    k, g = stats.mu.shape
    if k * g != d or np.size(gamma) != d or np.size(beta) != d:
        raise ShapeError(f"stats cover {k}x{g} features, batch has {d}")
    xc = batch.reshape(m, k, g) - stats.mu
    xhat = _whiten(xc, cholesky_lower(stats.sigma)).reshape(m, d)
    return np.asarray(gamma).reshape(d) * xhat + np.asarray(beta).reshape(d)


def _flatten_features(x: np.ndarray):
    """(m, c, h, w) -> (m*h*w, c) treating every position as a sample."""
    if x.ndim == 2:
        return x, None
    if x.ndim != 4:
        raise ShapeError(f"expected 2-D or 4-D input, got {x.shape}")
    m, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(m * h * w, c), x.shape


def _unflatten_features(y: np.ndarray, shape):
    if shape is None:
        return y
    m, c, h, w = shape
    return y.reshape(m, h, w, c).transpose(0, 3, 1, 2)


class DwtLayer:
    """Domain-specific whitening layer.

    Train mode whitens with the statistics of the incoming batch and folds
    them into the running average of the given domain.  Eval mode whitens
    with the running statistics of the given domain.  Accepts ``(m, d)`` or
    ``(m, d, h, w)`` inputs.
    """

    def __init__(self, d: int, g: int = 4, epsilon: float = 1e-5, rho: float = 0.1):
        if g <= 0 or d % g:
            raise ShapeError(f"group size {g} does not divide {d}")
        self.d = d
        self.g = g
        self.epsilon = epsilon
        self.rho = rho
        self.gamma = Parameter(np.ones(d), weight_decay_exempt=True, name="gamma")
        self.beta = Parameter(np.zeros(d), weight_decay_exempt=True, name="beta")
        self.running = {Domain.SOURCE: None, Domain.TARGET: None}
        self._cache = None
        # stats of the most recent train-mode forward, for inspection in tests
        self.last_stats = None

    @property
    def n_groups(self) -> int:
        return self.d // self.g

    def parameters(self):
        return [self.gamma, self.beta]

    def _factor(self, batch: np.ndarray):
        eps = self.epsilon
        mu, xc, cov = group_moments(batch, self.g)
        eye = np.eye(self.g)
        try:
            L = cholesky_lower(cov + eps * eye)
        except NotPositiveDefinite:
            eps = eps * 10.0
            L = cholesky_lower(cov + eps * eye)
        return BatchStats(mu, cov + eps * eye, batch.shape[0]), xc, L

    def forward(self, x, mode: str = "train", domain: Domain = Domain.TARGET):
        x = as_tensor(x)
        flat, shape = _flatten_features(x)
        m, d = flat.shape
        if d != self.d:
            raise ShapeError(f"layer expects {self.d} features, got {d}")
        k, g = self.n_groups, self.g
        if mode == "train":
            if m < 2:
                raise DegenerateBatchError(f"need at least 2 samples, got {m}")
            stats, xc, L = self._factor(flat)
            self.last_stats = stats
            self.update_running_stats(domain, stats)
        elif mode == "eval":
            stats = self.running[domain]
            if stats is None:
                raise UninitializedStatsError(f"no running statistics for {domain.value} domain")
            xc = flat.reshape(m, k, g) - stats.mu
            L = cholesky_lower(stats.sigma)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        xhat = _whiten(xc, L).reshape(m, d)
        out = self.gamma.value * xhat + self.beta.value
        self._cache = (mode, xc, L, xhat, shape)
        return _unflatten_features(out, shape)

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("backward called without a cached forward")
        mode, xc, L, xhat, shape = self._cache
        self._cache = None
        G, _ = _flatten_features(as_tensor(grad_out))
        m, d = G.shape
        k, g = self.n_groups, self.g
        self.gamma.grad += np.sum(G * xhat, axis=0)
        self.beta.grad += np.sum(G, axis=0)

        dxhat = (G * self.gamma.value).reshape(m, k, g)
        W = tri_solve_lower(L, np.broadcast_to(np.eye(g), L.shape))
        dxc = np.einsum("mki,kij->mkj", dxhat, W)
        if mode == "eval":
            return _unflatten_features(dxc.reshape(m, d), shape)

        # through W = L^{-1}, then L = chol(Sigma), then Sigma = xc^T xc / m
        dW = np.einsum("mki,mkj->kij", dxhat, xc)
        WT = np.swapaxes(W, -1, -2)
        dL = np.tril(-WT @ dW @ WT)
        P = np.tril(np.swapaxes(L, -1, -2) @ dL)
        P[..., np.arange(g), np.arange(g)] *= 0.5
        S = WT @ P @ W
        dsigma = 0.5 * (S + np.swapaxes(S, -1, -2))
        dxc = dxc + (2.0 / m) * np.einsum("mki,kij->mkj", xc, dsigma)
        dx = dxc - dxc.mean(axis=0)
        return _unflatten_features(dx.reshape(m, d), shape)

    def update_running_stats(self, domain: Domain, fresh: BatchStats):
        fold_running_stats(self.running, domain, fresh, self.rho)


def fold_running_stats(running: dict, domain: Domain, fresh: BatchStats, rho: float):
    """stored <- (1 - rho) * stored + rho * fresh; the first update copies."""
    stored = running[domain]
    if stored is None:
        running[domain] = fresh.copy()
        return
    stored.mu = (1.0 - rho) * stored.mu + rho * fresh.mu
    stored.sigma = (1.0 - rho) * stored.sigma + rho * fresh.sigma
    stored.count = fresh.count


def dwt_forward(layer: DwtLayer, batch, domain: Domain = Domain.TARGET, mode: str = "train"):
    return layer.forward(batch, mode=mode, domain=domain)


def dwt_backward(layer: DwtLayer, upstream):
    return layer.backward(upstream)


def update_running_stats(layer: DwtLayer, domain: Domain, fresh: BatchStats):
    layer.update_running_stats(domain, fresh)


def dwt_on_features(layer: DwtLayer, fmap, domain: Domain = Domain.TARGET, mode: str = "train"):
    """Whiten a ``(m, c, h, w)`` feature map channel-wise, positions as samples."""
    fmap = as_tensor(fmap)
    if fmap.ndim != 4:
        raise ShapeError(f"expected a 4-D feature map, got {fmap.shape}")
    return layer.forward(fmap, mode=mode, domain=domain)
