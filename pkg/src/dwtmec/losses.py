"""Classification losses over log-probabilities.

Every loss returns a :class:`LossValue` carrying the scalar and its gradient
with respect to the *logits* that produced each log-probability input, which
is what the network backward pass consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, as_tensor


class LabelError(ValueError):
    pass


@dataclass
class LossValue:
    value: float
    # gradients w.r.t. the logits behind each log-prob input, in argument order
    grads: list = field(default_factory=list)


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_backward(lp: np.ndarray, grad_lp: np.ndarray) -> np.ndarray:
    # d/dz of log_softmax: g - p * sum(g)
    return grad_lp - np.exp(lp) * grad_lp.sum(axis=-1, keepdims=True)


def cross_entropy(lp, labels) -> LossValue:
    lp = as_tensor(lp)
    labels = np.asarray(labels)
    m, C = lp.shape
    if labels.shape != (m,):
        raise ShapeError(f"{m} predictions but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C})")
    rows = np.arange(m)
    value = -float(np.mean(lp[rows, labels]))
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    return LossValue(value, [grad / m])


def entropy_loss(lp) -> LossValue:
    """Mean Shannon entropy of the predicted distributions."""
    lp = as_tensor(lp)
    m = lp.shape[0]
    p = np.exp(lp)
    # 0 * log 0 = 0, so exact one-hot rows (log-prob -inf) stay finite
    plogp = np.where(p > 0, p * np.where(p > 0, lp, 0.0), 0.0)
    value = -float(np.sum(plogp) / m)
    # dH/dz_j = -p_j (log p_j + H_row)
    h_row = -np.sum(plogp, axis=-1, keepdims=True)
    grad = -np.where(p > 0, p * (np.where(p > 0, lp, 0.0) + h_row), 0.0) / m
    return LossValue(value, [grad])


def consistency_l2(lp1, lp2) -> LossValue:
    """Mean squared L2 distance between the two probability vectors."""
    lp1, lp2 = as_tensor(lp1), as_tensor(lp2)
    if lp1.shape != lp2.shape:
        raise ShapeError(f"{lp1.shape} vs {lp2.shape}")
    m = lp1.shape[0]
    p1, p2 = np.exp(lp1), np.exp(lp2)
    diff = p1 - p2
    value = float(np.sum(diff * diff) / m)
    g1 = 2.0 * diff / m
    # through p = softmax(z): dp^T g = p * (g - <p, g>)
    z1 = p1 * (g1 - np.sum(p1 * g1, axis=-1, keepdims=True))
    z2 = p2 * (-g1 - np.sum(p2 * -g1, axis=-1, keepdims=True))
    return LossValue(value, [z1, z2])


def mec_pseudo_labels(lp1, lp2) -> np.ndarray:
    """Class of maximal agreement per row; argmax keeps the first of ties."""
    return np.argmax(as_tensor(lp1) + as_tensor(lp2), axis=-1)


def mec_pseudo_label(lp1_row, lp2_row) -> int:
    return int(mec_pseudo_labels(np.atleast_2d(lp1_row), np.atleast_2d(lp2_row))[0])


def mec_loss(lp1, lp2) -> LossValue:
    """Min-entropy consensus between two views of the same target samples.

    Per row: ``-0.5 * max_y (log p1(y) + log p2(y))``, averaged over rows.
    The gradient is routed through the pseudo-label only.
    """
    lp1, lp2 = as_tensor(lp1), as_tensor(lp2)
    if lp1.shape != lp2.shape:
        raise ShapeError(f"{lp1.shape} vs {lp2.shape}")
    m = lp1.shape[0]
    rows = np.arange(m)
    z = mec_pseudo_labels(lp1, lp2)
    # summed in this order so that mec_loss(a, b) == mec_loss(b, a) bitwise
    picked = lp1[rows, z] + lp2[rows, z]
    value = float(np.sum(-0.5 * picked) / m)
    grads = []
    for lp in (lp1, lp2):
        g = np.zeros_like(lp)
        g[rows, z] = -0.5 / m
        grads.append(_softmax_backward(lp, g))
    return LossValue(value, grads)


def mec_row_losses(lp1, lp2) -> np.ndarray:
    lp1, lp2 = as_tensor(lp1), as_tensor(lp2)
    return -0.5 * np.max(lp1 + lp2, axis=-1)


def total_loss(ls: LossValue, lt: LossValue, lam: float) -> LossValue:
    """``L = L^s + lam * L^t``; source gradients come first in ``grads``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    grads = list(ls.grads) + [lam * g for g in lt.grads]
    return LossValue(ls.value + lam * lt.value, grads)
