"""Dense float64 primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The linear
algebra here (Cholesky, forward substitution) is written out by hand and
vectorised over leading batch axes, so the whitening layer can factor all of
its feature groups in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix not positive definite: pivot {pivot} = {value:.3e}")
        self.pivot = pivot
        self.value = value


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class EvaluationError(FloatingPointError):
    pass


class StateError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    weight_decay_exempt: bool = False
    name: str = ""

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.value.size


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def cholesky_lower(sigma, sym_tol: float = 1e-9) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``; the column
    loop runs once for the whole stack.
    """
    a = as_tensor(sigma)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expected square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > sym_tol * scale:
        raise ShapeError("matrix is not symmetric")
    n = a.shape[-1]
    L = np.zeros_like(a)
    for j in range(n):
        row = L[..., j, :j]
        pivot = a[..., j, j] - np.einsum("...k,...k->...", row, row)
        if not np.all(pivot > 0.0):
            bad = float(np.min(pivot)) if np.all(np.isfinite(pivot)) else float("nan")
            raise NotPositiveDefinite(j, bad)
        d = np.sqrt(pivot)
        L[..., j, j] = d
        if j + 1 < n:
            below = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", L[..., j + 1:, :j], row)
            L[..., j + 1:, j] = below / d[..., None]
    return L


def tri_solve_lower(L, b) -> np.ndarray:
    """Solve ``L x = b`` by forward substitution (batched over leading axes)."""
    L = as_tensor(L)
    b = as_tensor(b)
    vector = b.ndim == L.ndim - 1
    if vector:
        b = b[..., None]
    if L.shape[-1] != L.shape[-2] or b.shape[-2] != L.shape[-1]:
        raise ShapeError(f"cannot solve {L.shape} against {b.shape}")
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag == 0.0):
        raise SingularMatrixError("zero on the diagonal of a triangular matrix")
    n = L.shape[-1]
    x = np.empty(np.broadcast_shapes(L.shape[:-2], b.shape[:-2]) + b.shape[-2:], dtype=DTYPE)
    for i in range(n):
        acc = b[..., i, :] - np.einsum("...k,...kj->...j", L[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / L[..., i, i][..., None]
    return x[..., 0] if vector else x


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {k}")
        g[k] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) over all entries."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
