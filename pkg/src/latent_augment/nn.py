"""Dense MLPs with explicit backprop, losses, and Adam, all in float64."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

ACTIVATIONS = ("identity", "relu", "silu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: str, x: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``x``."""
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activations
    masks: list = field(default_factory=list)  # dropout masks (or None)


class Mlp:
    """Stack of affine layers, each followed by its activation."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.d_out != b.d_in:
                raise ShapeError(f"layer dims do not chain: {a.d_out} -> {b.d_in}")
        self.layers = layers

    @classmethod
    def init(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "Mlp":
        """He-uniform weights for relu/silu layers, LeCun-uniform otherwise; zero biases."""
        if len(dims) < 2:
            raise ShapeError("need at least input and output dims")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = output_activation if i == len(dims) - 2 else hidden_activation
            gain = 6.0 if act in ("relu", "silu") else 3.0
            bound = np.sqrt(gain / d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
            layers.append(Layer(w, np.zeros(d_out), act))
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def _check_input(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.layers[0].d_in:
            raise ShapeError(f"expected (n, {self.layers[0].d_in}) input, got {batch.shape}")
        return batch

    def forward(self, batch: np.ndarray) -> np.ndarray:
        h = self._check_input(batch)
        for layer in self.layers:
            h = activate(layer.activation, h @ layer.weight + layer.bias)
        return h

    def forward_cached(
        self,
        batch: np.ndarray,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, ForwardCache]:
        """Forward pass keeping what backward needs. Dropout hits hidden outputs only."""
        h = self._check_input(batch)
        cache = ForwardCache()
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            cache.inputs.append(h)
            z = h @ layer.weight + layer.bias
            cache.pre.append(z)
            h = activate(layer.activation, z)
            mask = None
            if dropout > 0.0 and i < last:
                if rng is None:
                    raise ValueError("dropout needs an rng")
                mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h = h * mask
            cache.masks.append(mask)
        return h, cache

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients for ``params()`` (same order) and for the input batch."""
        upstream = np.asarray(upstream, dtype=np.float64)
        out_shape = cache.pre[-1].shape
        if upstream.shape != out_shape:
            raise ShapeError(f"upstream gradient {upstream.shape} != output {out_shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        g = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if cache.masks[i] is not None:
                g = g * cache.masks[i]
            if layer.activation != "identity":
                g = g * activate_grad(layer.activation, cache.pre[i])
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
        return grads, g


def mlp_forward(net: Mlp, batch: np.ndarray) -> np.ndarray:
    return net.forward(batch)


def mlp_backward(net: Mlp, batch: np.ndarray, upstream_grad: np.ndarray):
    _, cache = net.forward_cached(batch)
    return net.backward(cache, upstream_grad)


# ------------------------------------------------------------------ losses

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def softmax_cross_entropy(
    logits: np.ndarray, labels, weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean (or explicitly weighted) cross entropy and its gradient w.r.t. logits.

    With ``weights=None`` every row gets weight ``1/n``; otherwise the loss is
    ``sum_i weights[i] * nll_i`` and weights are used as given.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    loss, grad, _ = kernels.softmax_xent(logits, labels, np.asarray(weights, dtype=np.float64))
    return loss, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {np.shape(g)} / {m.shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(
            p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            m.reshape(-1), v.reshape(-1),
            state.lr, state.beta1, state.beta2, state.eps, bc1, bc2,
        )
    return params, state


# --------------------------------------------------------- gradient oracle

def finite_difference(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
