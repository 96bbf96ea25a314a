"""Optimisers, the three-batch training step and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import BatchTriple, LabeledSet, PerturbSpec, batch_triples
from .losses import LossValue, cross_entropy, entropy_loss, log_softmax, mec_loss, total_loss
from .metrics import MetricsRow, accuracy
from .model import Network, build_cnn, build_mlp
from .tensor import StateError
from .whitening import Domain

log = logging.getLogger(__name__)

VARIANTS = ("source-only", "dwt-entropy", "dwt-mec", "dwt-mec-mt")


@dataclass
class TrainConfig:
    lam: float = 0.1
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 30
    decay_fractions: tuple = (50 / 120, 90 / 120)
    decay_factor: float = 0.1
    g: int = 4
    epsilon: float = 1e-5
    rho: float = 0.1
    ema_decay: float = 0.99
    variant: str = "dwt-mec"
    optimizer: str = "adam"
    momentum: float = 0.9
    # network
    arch: str = "mlp"
    hidden: tuple = (64, 64)
    n_dwt: int = 2
    channels: tuple = (8, 16)

    def __post_init__(self):
        self.decay_fractions = tuple(self.decay_fractions)
        self.hidden = tuple(self.hidden)
        self.channels = tuple(self.channels)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.arch not in ("mlp", "cnn"):
            raise ValueError("arch must be 'mlp' or 'cnn'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def to_dict(self):
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr * factor**k`` where ``k`` counts milestones passed."""
    milestones = [max(1, int(math.floor(f * cfg.epochs))) for f in cfg.decay_fractions]
    return cfg.lr * cfg.decay_factor ** sum(epoch >= ms for ms in milestones)


# ------------------------------------------------------------- optimisers

class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0):
        """Adam with decoupled weight decay: ``theta -= lr * wd * theta`` on
        non-exempt parameters, alongside the moment-based update."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay and not p.weight_decay_exempt:
                update = update + lr * weight_decay * p.value
            p.value -= update


class SGD:
    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0):
        self.t += 1
        for p, vel in zip(self.params, self.velocity):
            g = p.grad
            if weight_decay and not p.weight_decay_exempt:
                g = g + weight_decay * p.value
            vel *= self.momentum
            vel += g
            p.value -= lr * vel


def adam_step(params, state: Adam, lr: float, weight_decay: float = 0.0):
    state.step(lr, weight_decay)


def sgd_step(params, state: SGD, lr: float, weight_decay: float = 0.0):
    state.step(lr, weight_decay)


def make_optimizer(net: Network, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(net.parameters())
    return SGD(net.parameters(), cfg.momentum)


# ------------------------------------------------------------------ steps

class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class StepResult:
    loss_s: float
    loss_t: float
    loss_total: float
    grad_norm: float
    target_grad_norm: float = 0.0


def uses_target(variant: str) -> bool:
    return variant != "source-only"


def target_loss(net: Network, triple: BatchTriple, variant: str, backward_scale: float | None = None):
    """Forward the target views in train mode and return ``L^t``.

    The MEC variants feed both views as one ``2m``-row batch so every
    whitening layer estimates a single target statistic from their union.
    When ``backward_scale`` is given, ``backward_scale * dL^t`` is
    back-propagated.
    """
    if variant == "dwt-entropy":
        lp = log_softmax(net.forward(triple.target_v1, mode="train", domain=Domain.TARGET))
        lt = entropy_loss(lp)
        grad = lt.grads[0]
    else:
        m = len(triple.target_v1)
        both = np.concatenate([triple.target_v1, triple.target_v2], axis=0)
        lp = log_softmax(net.forward(both, mode="train", domain=Domain.TARGET))
        lt = mec_loss(lp[:m], lp[m:])
        grad = np.concatenate(lt.grads, axis=0)
    if backward_scale is not None:
        net.backward(backward_scale * grad)
    return lt


def step_loss(net: Network, triple: BatchTriple, cfg: TrainConfig, backward: bool = False) -> LossValue:
    """``L = L^s + lam * L^t`` for one triple, optionally accumulating gradients.

    Source and target streams are forwarded and back-propagated one after
    the other; they share weights but no batch statistics, so the
    gradients simply add.
    """
    lp_s = log_softmax(net.forward(triple.source_x, mode="train", domain=Domain.SOURCE))
    ls = cross_entropy(lp_s, triple.source_y)
    if backward:
        net.backward(ls.grads[0])
    if not uses_target(cfg.variant):
        return total_loss(ls, LossValue(0.0, []), cfg.lam)
    lt = target_loss(net, triple, cfg.variant, cfg.lam if backward else None)
    return total_loss(ls, lt, cfg.lam)


def _grad_norm(params) -> float:
    return float(math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def train_step(net: Network, triple: BatchTriple, cfg: TrainConfig, optim, lr: float | None = None) -> StepResult:
    net.zero_grad()
    params = net.parameters()
    lp_s = log_softmax(net.forward(triple.source_x, mode="train", domain=Domain.SOURCE))
    ls = cross_entropy(lp_s, triple.source_y)
    net.backward(ls.grads[0])
    lt_value, t_norm = 0.0, 0.0
    if uses_target(cfg.variant):
        before = [p.grad.copy() for p in params]
        lt = target_loss(net, triple, cfg.variant, cfg.lam)
        lt_value = lt.value
        t_norm = float(math.sqrt(sum(float(np.sum((p.grad - b) ** 2)) for p, b in zip(params, before))))
    total = ls.value + cfg.lam * lt_value
    if not math.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss {total}", {"loss_s": ls.value, "loss_t": lt_value})
    norm = _grad_norm(params)
    optim.step(cfg.lr if lr is None else lr, cfg.weight_decay)
    return StepResult(ls.value, lt_value, total, norm, t_norm)


# ---------------------------------------------------------------- teacher

@dataclass
class TeacherState:
    net: Network
    updates: int = 0


def make_teacher(student: Network) -> TeacherState:
    return TeacherState(copy.deepcopy(student))


def _blend(t, s, decay):
    return decay * t + (1.0 - decay) * s


def ema_update(teacher: TeacherState, student: Network, decay: float):
    """``theta_T <- decay * theta_T + (1 - decay) * theta_S`` for parameters and running statistics."""
    tp, sp = teacher.net.parameters(), student.parameters()
    tl, sl = teacher.net.stat_layers(), student.stat_layers()
    if len(tp) != len(sp) or len(tl) != len(sl):
        raise StateError("teacher and student structures differ")
    for a, b in zip(tp, sp):
        if a.value.shape != b.value.shape:
            raise StateError(f"parameter shape mismatch {a.value.shape} vs {b.value.shape}")
        a.value[...] = _blend(a.value, b.value, decay)
    for a, b in zip(tl, sl):
        if type(a) is not type(b):
            raise StateError("layer type mismatch between teacher and student")
        for dom, fresh in b.running.items():
            if fresh is None:
                continue
            cur = a.running[dom]
            if cur is None:
                a.running[dom] = fresh.copy()
            else:
                cur.mu = _blend(cur.mu, fresh.mu, decay)
                cur.sigma = _blend(cur.sigma, fresh.sigma, decay)
                cur.count = fresh.count
    teacher.updates += 1


# ------------------------------------------------------------------- loop

def build_network(cfg: TrainConfig, input_shape, n_classes: int, seed: int) -> Network:
    kw = dict(seed=seed, epsilon=cfg.epsilon, rho=cfg.rho)
    if cfg.arch == "mlp":
        d_in = int(np.prod(input_shape))
        return build_mlp([d_in, *cfg.hidden, n_classes], cfg.n_dwt, cfg.g, **kw)
    return build_cnn(cfg.channels, cfg.n_dwt, cfg.g, in_shape=tuple(input_shape), n_classes=n_classes,
                     hidden=cfg.hidden[0] if cfg.hidden else None, **kw)


@dataclass
class TrainRecord:
    rows: list = field(default_factory=list)
    net: Network | None = None
    teacher: TeacherState | None = None

    @property
    def final_target_acc(self) -> float:
        return self.rows[-1].target_acc


def eval_domain(variant: str) -> Domain:
    # source-only never sees target data, so it has no target statistics
    return Domain.SOURCE if variant == "source-only" else Domain.TARGET


def _prepare(x, net):
    # MLPs take flattened images
    if net.layers and hasattr(net.layers[0], "din") and x.ndim > 2:
        return x.reshape(len(x), -1)
    return x


def evaluate(net: Network, data: LabeledSet, domain: Domain) -> float:
    return accuracy(net.predict_log_proba(_prepare(data.inputs, net), domain=domain), data.labels)


def warm_up_stats(net: Network, datasets: dict, cfg: TrainConfig, seed: int):
    """Initialise running statistics from one batch per domain so that the
    epoch-0 evaluation is defined.  Parameters are not touched."""
    m = cfg.batch_size
    rng = np.random.default_rng([seed, 2**31 - 1])
    domains = [("source", Domain.SOURCE)]
    if uses_target(cfg.variant):
        domains.append(("target", Domain.TARGET))
    for key, dom in domains:
        data = datasets[key]
        idx = rng.permutation(len(data))[:m]
        net.forward(_prepare(data.inputs[idx], net), mode="train", domain=dom)
    for layer in net.layers:
        layer._cache = None


def train_loop(cfg: TrainConfig, datasets: dict, seed: int, perturb: PerturbSpec | None = None,
               on_row=None) -> TrainRecord:
    """Train on ``datasets['source']`` (labelled) and ``datasets['target']``
    (labels unused), evaluating on ``datasets.get('target_test', target)``.

    Row 0 is the evaluation before any update; losses there are NaN.
    """
    source, target = datasets["source"], datasets["target"]
    target_test = datasets.get("target_test", target)
    n_classes = int(max(source.labels.max(), target_test.labels.max())) + 1
    net = build_network(cfg, source.inputs.shape[1:], n_classes, seed)
    warm_up_stats(net, datasets, cfg, seed)
    optim = make_optimizer(net, cfg)
    teacher = make_teacher(net) if cfg.variant == "dwt-mec-mt" else None
    if cfg.variant in ("dwt-mec", "dwt-mec-mt"):
        spec = perturb if perturb is not None else PerturbSpec()
        perturb_source = True
    else:
        spec = PerturbSpec.none()
        perturb_source = False
    dom = eval_domain(cfg.variant)
    record = TrainRecord(net=net, teacher=teacher)

    def emit(epoch, ls, lt, tot):
        ev = teacher.net if teacher is not None else net
        row = MetricsRow(epoch, cfg.variant, cfg.g, cfg.n_dwt, ls, lt, tot,
                         evaluate(ev, source, Domain.SOURCE), evaluate(ev, target_test, dom))
        record.rows.append(row)
        if on_row is not None:
            on_row(row)

    nan = float("nan")
    emit(0, nan, nan, nan)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(3)
        steps = 0
        for triple in batch_triples(source, target, cfg.batch_size, spec, seed, epoch, perturb_source):
            triple = BatchTriple(_prepare(triple.source_x, net), triple.source_y,
                                 _prepare(triple.target_v1, net), _prepare(triple.target_v2, net),
                                 triple.target_index)
            try:
                res = train_step(net, triple, cfg, optim, lr)
            except NonFiniteLossError as err:
                err.diagnostics.update(epoch=epoch, step=steps, lr=lr, variant=cfg.variant, seed=seed)
                raise
            if teacher is not None:
                ema_update(teacher, net, cfg.ema_decay)
            sums += (res.loss_s, res.loss_t, res.loss_total)
            steps += 1
        mean = sums / max(steps, 1)
        emit(epoch + 1, *map(float, mean))
        log.debug("epoch %d lr %.2e loss %.4f target acc %.4f", epoch + 1, lr, mean[2],
                  record.rows[-1].target_acc)
    return record
