import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwtmec.tensor import (
    EvaluationError,
    NotPositiveDefinite,
    Parameter,
    ShapeError,
    SingularMatrixError,
    cholesky_lower,
    finite_diff_grad,
    matmul,
    max_rel_error,
    tri_solve_lower,
)


def random_spd(rng, d, cond=100.0):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eig = np.geomspace(1.0, cond, d)
    return (q * eig) @ q.T


def test_matmul_examples():
    A = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), A), A)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - ref)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_cholesky_examples():
    assert np.array_equal(cholesky_lower(np.eye(3)), np.eye(3))
    L = cholesky_lower(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert np.allclose(L, [[2, 0], [1, math.sqrt(2)]], atol=1e-15)
    assert np.allclose(L @ L.T, [[4, 2], [2, 3]], atol=1e-14)
    D = cholesky_lower(np.diag([2.0, 0.5]))
    assert np.allclose(D, np.diag([math.sqrt(2), 1 / math.sqrt(2)]), atol=1e-15)


def test_cholesky_not_positive_definite_carries_pivot():
    with pytest.raises(NotPositiveDefinite) as err:
        cholesky_lower(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert err.value.pivot == 1


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ValueError):
        cholesky_lower(np.array([[2.0, 1.0], [0.0, 2.0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_cholesky_roundtrip(d, seed):
    sigma = random_spd(np.random.default_rng(seed), d)
    L = cholesky_lower(sigma)
    assert np.all(np.diag(L) > 0)
    assert np.array_equal(L, np.tril(L))
    assert np.linalg.norm(L @ L.T - sigma) / np.linalg.norm(sigma) < 1e-9


def test_cholesky_agrees_with_lapack():
    sigma = random_spd(np.random.default_rng(3), 6)
    assert np.allclose(cholesky_lower(sigma), np.linalg.cholesky(sigma), atol=1e-12)


def test_tri_solve_examples():
    b = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert np.array_equal(tri_solve_lower(np.eye(2), b), b)
    x = tri_solve_lower(np.array([[2.0, 0.0], [1.0, math.sqrt(2)]]), np.array([[2.0], [1.0]]))
    assert np.allclose(x, [[1.0], [0.0]], atol=1e-15)


def test_tri_solve_singular():
    with pytest.raises(SingularMatrixError):
        tri_solve_lower(np.array([[1.0, 0.0], [1.0, 0.0]]), np.ones((2, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_tri_solve_residual(d, k, seed):
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(random_spd(rng, d, cond=1e3))
    assert np.linalg.cond(L) < 1e4
    b = rng.normal(size=(d, k))
    x = tri_solve_lower(L, b)
    assert np.linalg.norm(L @ x - b) < 1e-10


def test_finite_diff_examples():
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.max(np.abs(finite_diff_grad(np.sum, x) - 1.0)) < 1e-10
    g = finite_diff_grad(lambda v: 0.5 * float(np.sum(v * v)), np.array([1.0, 2.0]))
    assert np.max(np.abs(g - [1.0, 2.0])) < 1e-8


def test_finite_diff_nonfinite_raises():
    with pytest.raises(EvaluationError):
        with np.errstate(divide="ignore", invalid="ignore"):
            finite_diff_grad(lambda v: float(np.log(v[0])), np.array([0.0]))


def test_finite_diff_matches_two_layer_mlp():
    # cross-entropy of x -> relu(x W1) W2 with a hand-written backward
    rng = np.random.default_rng(1)
    x, W1, W2 = rng.normal(size=(5, 4)), rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=5)

    def loss(W):
        h = np.maximum(x @ W, 0) @ W2
        h = h - h.max(axis=1, keepdims=True)
        lp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
        return -float(lp[np.arange(5), y].mean())

    a = x @ W1
    z = np.maximum(a, 0) @ W2
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(5), y] -= 1
    dW1 = x.T @ ((p / 5) @ W2.T * (a > 0))
    assert max_rel_error(dW1, finite_diff_grad(loss, W1)) < 1e-4


def test_max_rel_error_floor():
    assert max_rel_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)
    assert max_rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_parameter_grad_shape():
    p = Parameter(np.ones((2, 3)))
    assert p.grad.shape == p.value.shape
    p.grad += 1
    p.zero_grad()
    assert not p.grad.any()
