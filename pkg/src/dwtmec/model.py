"""Sequential networks and the builders for the desk-scale classifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .tensor import ShapeError
from .whitening import Domain, DwtLayer


@dataclass
class LayerSpec:
    kind: str
    sizes: dict = field(default_factory=dict)


class Network:
    def __init__(self, layers, specs=None):
        self.layers = list(layers)
        self.specs = list(specs) if specs is not None else []

    def forward(self, x, mode="train", domain=Domain.SOURCE):
        for layer in self.layers:
            x = layer.forward(x, mode=mode, domain=domain)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def n_dwt(self) -> int:
        return sum(isinstance(layer, DwtLayer) for layer in self.layers)

    def stat_layers(self):
        """Layers holding per-domain running statistics."""
        return [layer for layer in self.layers if isinstance(layer, (DwtLayer, BatchNorm))]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def predict_log_proba(self, x, domain=Domain.TARGET, chunk: int = 1024):
        from .losses import log_softmax

        out = [log_softmax(self.forward(x[i:i + chunk], mode="eval", domain=domain))
               for i in range(0, len(x), chunk)]
        return np.concatenate(out, axis=0)


def _norm_layer(width: int, use_dwt: bool, g: int, epsilon: float, rho: float):
    if use_dwt:
        return DwtLayer(width, g, epsilon=epsilon, rho=rho), LayerSpec("dwt", {"d": width, "g": g})
    return BatchNorm(width, epsilon=epsilon, rho=rho), LayerSpec("bn", {"d": width})


def build_mlp(dims, n_dwt: int = 0, g: int = 4, *, seed: int = 0,
              epsilon: float = 1e-5, rho: float = 0.1) -> Network:
    """``dims = [d_in, h_1, ..., h_k, C]``.

    Hidden block ``i`` is dense -> DWT -> ReLU for ``i < n_dwt`` and
    dense -> BN -> ReLU afterwards; a final dense layer yields the logits.
    """
    dims = list(dims)
    if len(dims) < 2 or any(int(v) <= 0 for v in dims):
        raise ShapeError(f"invalid dims {dims}")
    hidden = dims[1:-1]
    if not 0 <= n_dwt <= len(hidden):
        raise ShapeError(f"n_dwt={n_dwt} exceeds {len(hidden)} hidden layers")
    rng = np.random.default_rng(seed)
    layers, specs = [], []
    for i, (din, dout) in enumerate(zip(dims[:-2], hidden)):
        layers.append(Dense(din, dout, rng, bias=False))
        specs.append(LayerSpec("dense", {"din": din, "dout": dout, "bias": False}))
        norm, spec = _norm_layer(dout, i < n_dwt, g, epsilon, rho)
        layers.append(norm)
        specs.append(spec)
        layers.append(ReLU())
        specs.append(LayerSpec("relu"))
    layers.append(Dense(dims[-2], dims[-1], rng))
    specs.append(LayerSpec("dense", {"din": dims[-2], "dout": dims[-1], "bias": True}))
    return Network(layers, specs)


def mlp_param_count(dims) -> int:
    """Weights of every dense layer, the logit bias, and gamma/beta per hidden unit."""
    dims = list(dims)
    weights = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    return weights + dims[-1] + sum(2 * h for h in dims[1:-1])


def build_cnn(channels, n_dwt: int = 0, g: int = 4, *, in_shape=(1, 28, 28), n_classes: int = 10,
              hidden: int | None = 64, seed: int = 0, epsilon: float = 1e-5, rho: float = 0.1) -> Network:
    """Conv blocks (3x3 same conv -> DWT/BN -> ReLU -> 2x2 max-pool), then a
    dense -> BN -> ReLU head and the logit layer.  ``channels`` lists the
    output channels of the conv blocks; ``hidden=None`` drops the head and
    maps the pooled features straight to logits."""
    channels = list(channels)
    if not channels or not 0 <= n_dwt <= len(channels):
        raise ShapeError(f"n_dwt={n_dwt} invalid for {len(channels)} conv blocks")
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers, specs = [], []
    for i, cout in enumerate(channels):
        layers.append(Conv2d(c, cout, 3, 1, "same", rng, bias=False))
        specs.append(LayerSpec("conv2d", {"cin": c, "cout": cout, "k": 3, "stride": 1, "padding": "same",
                                          "bias": False}))
        norm, spec = _norm_layer(cout, i < n_dwt, g, epsilon, rho)
        layers += [norm, ReLU(), MaxPool2d(2)]
        specs += [spec, LayerSpec("relu"), LayerSpec("maxpool", {"size": 2})]
        c, h, w = cout, h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError("input too small for the number of pooling stages")
    flat = c * h * w
    layers.append(Flatten())
    specs.append(LayerSpec("flatten"))
    if hidden:
        layers += [Dense(flat, hidden, rng, bias=False), BatchNorm(hidden, epsilon, rho), ReLU()]
        specs += [LayerSpec("dense", {"din": flat, "dout": hidden, "bias": False}),
                  LayerSpec("bn", {"d": hidden}), LayerSpec("relu")]
        flat = hidden
    layers.append(Dense(flat, n_classes, rng))
    specs.append(LayerSpec("dense", {"din": flat, "dout": n_classes, "bias": True}))
    return Network(layers, specs)
