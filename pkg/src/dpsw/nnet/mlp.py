"""Feed-forward networks on top of :mod:`dpsw.nnet.autodiff`.

Weight matrices are stored ``(out_dim, in_dim)`` so that column j of the
first layer belongs to input feature j.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ShapeError
from . import autodiff as ad

ACTIVATIONS = ("elu", "sigmoid", "identity")


def _elu_np(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_NUMERIC = {"elu": _elu_np, "sigmoid": _sigmoid_np, "identity": lambda x: x}
_GRAPH = {"elu": ad.elu, "sigmoid": ad.sigmoid, "identity": ad.identity}


@dataclass
class MLP:
    weights: list
    biases: list
    activations: list
    name: str = "mlp"

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} expects {self.weights[k].shape[1]} inputs, "
                                 f"previous layer gives {self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def first_layer(self):
        return self.weights[0].data

    def parameters(self):
        """Named leaf Tensors, e.g. ``{"gamma.W1": ..., "gamma.b1": ...}``."""
        out = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"{self.name}.W{k}"] = W
            out[f"{self.name}.b{k}"] = b
        return out

    def set_trainable(self, flag):
        for t in self.parameters().values():
            t.requires_grad = flag

    def forward_t(self, x):
        """Graph-building forward pass; ``x`` is a Tensor or array (batch, in_dim)."""
        h = ad.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (batch, {self.in_dim}) input, got {h.shape}")
        for W, b, act in zip(self.weights, self.biases, self.activations):
            h = _GRAPH[act](h @ W.T + b)
        return h

    __call__ = forward_t


def mlp_forward(m, x):
    """Numeric forward pass without building a graph."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != m.in_dim:
        raise ShapeError(f"{m.name}: expected (batch, {m.in_dim}) input, got {h.shape}")
    for W, b, act in zip(m.weights, m.biases, m.activations):
        h = _NUMERIC[act](h @ W.data.T + b.data)
    return h


def init_params(shapes, seed, activations=None, name="mlp"):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    ``shapes`` lists layer widths ``[in, hidden..., out]``. ``seed`` may be an
    int or a ``numpy.random.Generator`` (consumed in layer order).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(shapes) < 2 or any(int(s) < 1 for s in shapes):
        raise ShapeError(f"invalid layer widths {shapes}")
    n_layers = len(shapes) - 1
    activations = list(activations or ["elu"] * n_layers)
    weights, biases = [], []
    for fan_in, fan_out in zip(shapes[:-1], shapes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(ad.Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True))
        biases.append(ad.Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True))
    return MLP(weights, biases, activations, name)


def weight_penalty(mlps):
    """Sum of squared weight-matrix entries (biases excluded), as a graph node."""
    total = ad.Tensor(0.0)
    for m in mlps:
        for W in m.weights:
            total = total + ad.square(W).sum()
    return total


def weight_penalty_np(mlps):
    return float(sum(np.sum(W.data**2) for m in mlps for W in m.weights))
