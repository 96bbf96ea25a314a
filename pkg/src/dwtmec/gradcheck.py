"""Finite-difference checks for every backward pass in the package.

Layer checks use the scalar probe ``sum(forward(x) * R)`` for a random
``R`` and compare the analytic input and parameter gradients with central
differences.  The worst relative error over all seeds is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BatchTriple
from .layers import BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .losses import consistency_l2, cross_entropy, entropy_loss, log_softmax, mec_loss
from .model import build_cnn, build_mlp
from .tensor import finite_diff_grad, max_rel_error
from .train import TrainConfig, step_loss
from .whitening import Domain, DwtLayer

TOL = 1e-4
H = 1e-5


@dataclass
class CheckResult:
    name: str
    shape: tuple
    seeds: int
    max_error: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} shape={str(self.shape):<16} seeds={self.seeds:<3} max_rel_err={self.max_error:.3e}"


def layer_error(layer, x, rng, mode="train", domain=Domain.SOURCE) -> float:
    """Worst relative error of input and parameter gradients for one draw."""
    out = layer.forward(x, mode=mode, domain=domain)
    R = rng.normal(size=out.shape)
    for p in layer.parameters():
        p.zero_grad()
    dx = layer.backward(R)
    probe = lambda v: float(np.sum(layer.forward(v, mode=mode, domain=domain) * R))
    worst = max_rel_error(dx, finite_diff_grad(probe, x, H))
    for p in layer.parameters():
        analytic = p.grad.copy()
        saved = p.value.copy()

        def probe_p(v, p=p):
            p.value[...] = v
            return float(np.sum(layer.forward(x, mode=mode, domain=domain) * R))

        numeric = finite_diff_grad(probe_p, saved, H)
        p.value[...] = saved
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


def _layer_cases():
    # (name, factory(rng) -> (layer, x, mode))
    def dense(rng):
        return Dense(5, 4, rng), rng.normal(size=(6, 5)), "train"

    def conv(rng):
        return Conv2d(2, 2, 3, 1, "same", rng), rng.normal(size=(2, 2, 5, 5)), "train"

    def conv_valid(rng):
        return Conv2d(2, 2, 3, 2, "valid", rng), rng.normal(size=(2, 2, 5, 5)), "train"

    def relu(rng):
        return ReLU(), _away_from_zero(rng, (6, 5)), "train"

    def pool(rng):
        # distinct values keep the argmax stable under the probe step
        x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + rng.normal(size=(2, 2, 4, 4)) * 1e-3
        return MaxPool2d(2), x, "train"

    def flatten(rng):
        return Flatten(), rng.normal(size=(2, 3, 2, 2)), "train"

    def bn(rng):
        layer = BatchNorm(5)
        layer.gamma.value = rng.normal(size=5)
        layer.beta.value = rng.normal(size=5)
        return layer, rng.normal(size=(8, 5)), "train"

    def bn_spatial(rng):
        layer = BatchNorm(3)
        layer.gamma.value = rng.normal(size=3)
        return layer, rng.normal(size=(2, 3, 3, 3)), "train"

    cases = [("dense", dense), ("conv2d same", conv), ("conv2d valid s2", conv_valid), ("relu", relu),
             ("maxpool", pool), ("flatten", flatten), ("bn", bn), ("bn spatial", bn_spatial)]

    for g in (1, 2, 4):
        for m in (4, 8, 16):
            def dwt(rng, g=g, m=m):
                # a group of g features seen through m <= g samples has a singular
                # covariance; the larger shrinkage keeps it well conditioned
                layer = DwtLayer(4, g, epsilon=1e-3 if m <= g else 1e-5)
                layer.gamma.value = rng.normal(size=4)
                layer.beta.value = rng.normal(size=4)
                return layer, rng.normal(size=(m, 4)), "train"
            cases.append((f"dwt g={g} m={m}", dwt))

    def dwt_spatial(rng):
        layer = DwtLayer(4, 2)
        layer.gamma.value = rng.normal(size=4)
        return layer, rng.normal(size=(2, 4, 3, 3)), "train"

    def dwt_eval(rng):
        layer = DwtLayer(4, 2)
        layer.forward(rng.normal(size=(16, 4)), domain=Domain.SOURCE)
        layer.gamma.value = rng.normal(size=4)
        return layer, rng.normal(size=(4, 4)), "eval"

    cases += [("dwt spatial", dwt_spatial), ("dwt eval", dwt_eval)]
    return cases


def check_layers(seeds: int = 20, only=None):
    results = []
    for name, factory in _layer_cases():
        if only and not any(key in name for key in only):
            continue
        worst, shape = 0.0, None
        for s in range(seeds):
            rng = np.random.default_rng(s)
            layer, x, mode = factory(rng)
            shape = x.shape
            worst = max(worst, layer_error(layer, x, rng, mode=mode))
        results.append(CheckResult(name, shape, seeds, worst))
    return results


def _loss_error(fn, n_inputs, rng, m=5, C=4):
    zs = [rng.normal(size=(m, C)) for _ in range(n_inputs)]
    labels = rng.integers(0, C, size=m)

    def value(*z):
        lps = [log_softmax(v) for v in z]
        return fn(lps, labels)

    res = value(*zs)
    worst = 0.0
    for k in range(n_inputs):
        def f(v, k=k):
            args = list(zs)
            args[k] = v
            return value(*args).value
        worst = max(worst, max_rel_error(res.grads[k], finite_diff_grad(f, zs[k], H)))
    return worst, (m, C)


def check_losses(seeds: int = 20):
    cases = [
        ("cross_entropy", 1, lambda lps, y: cross_entropy(lps[0], y)),
        ("entropy_loss", 1, lambda lps, y: entropy_loss(lps[0])),
        ("consistency_l2", 2, lambda lps, y: consistency_l2(lps[0], lps[1])),
        ("mec_loss", 2, lambda lps, y: mec_loss(lps[0], lps[1])),
    ]
    results = []
    for name, n, fn in cases:
        worst, shape = 0.0, None
        for s in range(seeds):
            err, shape = _loss_error(fn, n, np.random.default_rng(s))
            worst = max(worst, err)
        results.append(CheckResult(name, shape, seeds, worst))
    return results


def network_error(net, loss_fn, rng) -> float:
    """End-to-end: gradients w.r.t. every parameter of ``net``."""
    net.zero_grad()
    loss_fn(backward=True)
    worst = 0.0
    for p in net.parameters():
        analytic = p.grad.copy()
        saved = p.value.copy()

        def f(v, p=p):
            p.value[...] = v
            return loss_fn(backward=False)

        numeric = finite_diff_grad(f, saved, H)
        p.value[...] = saved
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _classifier_loss(net, x, y):
    def run(backward):
        lp = log_softmax(net.forward(x, mode="train", domain=Domain.SOURCE))
        res = cross_entropy(lp, y)
        if backward:
            net.backward(res.grads[0])
        return res.value
    return run


def check_networks(seeds: int = 20):
    results = []
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        net = build_mlp([4, 8, 8, 3], n_dwt=1, g=4, seed=s, epsilon=1e-3)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
        worst = max(worst, network_error(net, _classifier_loss(net, x, y), rng))
    results.append(CheckResult("mlp end-to-end", (6, 4), seeds, worst))

    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        # no dense BN head: batch-normalising 2 samples maps every pair to +-1
        # and leaves the upstream gradients at round-off level
        net = build_cnn((4, 4), n_dwt=2, g=2, in_shape=(1, 8, 8), n_classes=3, hidden=None, seed=s)
        x, y = rng.normal(size=(2, 1, 8, 8)), rng.integers(0, 3, size=2)
        worst = max(worst, network_error(net, _classifier_loss(net, x, y), rng))
    results.append(CheckResult("cnn end-to-end", (2, 1, 8, 8), seeds, worst))
    return results


def check_train_step(seeds: int = 20):
    """Gradient of the whole three-batch objective at m=4, d=4, C=3."""
    results = []
    for variant in ("source-only", "dwt-entropy", "dwt-mec"):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(s)
            # g=2 < m keeps the source covariance full rank; whitening m <= g
            # samples is almost invariant to the preceding weights
            cfg = TrainConfig(variant=variant, lam=0.5, g=2)
            net = build_mlp([4, 8, 8, 3], n_dwt=2, g=2, seed=s)
            xt = rng.normal(size=(4, 4))
            triple = BatchTriple(rng.normal(size=(4, 4)), rng.integers(0, 3, size=4),
                                 xt + 0.1 * rng.normal(size=xt.shape), xt + 0.1 * rng.normal(size=xt.shape))
            worst = max(worst, network_error(net, lambda backward: step_loss(net, triple, cfg, backward).value, rng))
        results.append(CheckResult(f"train_step {variant}", (4, 4), seeds, worst))
    return results


def run_all(seeds: int = 20):
    return check_layers(seeds) + check_losses(seeds) + check_networks(seeds) + check_train_step(seeds)
