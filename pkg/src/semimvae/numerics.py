"""Dense layers with hand-written backward passes and log-domain helpers.

Everything is float64 and batch-first: a matrix of shape ``(batch, features)``
holds one sample per row.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError, StateError

ACTIVATIONS = ("tanh", "softplus", "identity")
_SOFTPLUS_CUTOFF = 30.0


def as_matrix(x) -> np.ndarray:
    """Return ``x`` as a 2-D float64 array, promoting a vector to one row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with shape {a.shape}")
    return a


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(np.exp(np.minimum(x, _SOFTPLUS_CUTOFF)))
    # log(1 + e^x) == x to double precision once x > 30
    return np.where(x > _SOFTPLUS_CUTOFF, x, out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(kind: str, x):
    """Apply an elementwise activation."""
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "identity":
        return np.asarray(x, dtype=np.float64)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind: str, pre, post=None):
    """Local derivative of an activation.

    ``pre`` is the input that was fed forward; ``post`` the cached output,
    used by tanh to avoid recomputing it.
    """
    if kind == "tanh":
        if post is None:
            post = np.tanh(pre)
        return 1.0 - post * post
    if kind == "softplus":
        return sigmoid(pre)
    if kind == "identity":
        return np.ones_like(pre, dtype=np.float64)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def log_sum_exp(values, axis=None):
    """Numerically stable ``log(sum(exp(values)))``.

    With ``axis=None`` the input must be a non-empty vector and a float is
    returned; otherwise the reduction runs along ``axis``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty input")
    if axis is None:
        v = v.ravel()
        m = v.max()
        if not np.isfinite(m):
            return float(m)
        return float(m + np.log(np.sum(np.exp(v - m))))
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(values, axis=-1):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_softmax of an empty input")
    return v - np.expand_dims(log_sum_exp(v, axis=axis), axis)


def softmax(values, axis=-1):
    """Softmax with the max subtracted first, as in log-sum-exp."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty input")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


class LinearLayer:
    """Affine map ``y = x W^T + b`` with gradient accumulators.

    ``weight`` has shape ``(out_dim, in_dim)``.
    """

    def __init__(self, weight, bias):
        weight = np.array(weight, dtype=np.float64, ndmin=2)
        bias = np.array(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"bias length {bias.shape[0]} does not match weight rows {weight.shape[0]}"
            )
        self.weight = weight
        self.bias = bias
        self.weight_grad = np.zeros_like(weight)
        self.bias_grad = np.zeros_like(bias)
        self._input = None

    @classmethod
    def xavier(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"layer expects {self.in_dim} input columns, got {x.shape[1]}")
        self._input = x
        return x @ self.weight.T + self.bias

    def backward(self, output_grad) -> np.ndarray:
        if self._input is None:
            raise StateError("backward called before forward")
        g = as_matrix(output_grad)
        if g.shape != (self._input.shape[0], self.out_dim):
            raise ShapeError(
                f"output grad shape {g.shape} does not match forward output "
                f"{(self._input.shape[0], self.out_dim)}"
            )
        self.weight_grad += g.T @ self._input
        self.bias_grad += g.sum(axis=0)
        self._input = None
        return g @ self.weight

    def zero_grad(self) -> None:
        self.weight_grad[...] = 0.0
        self.bias_grad[...] = 0.0


def linear_forward(layer: LinearLayer, x) -> np.ndarray:
    return layer.forward(x)


def linear_backward(layer: LinearLayer, output_grad) -> np.ndarray:
    return layer.backward(output_grad)


class Mlp:
    """A stack of linear layers, each followed by its own activation."""

    def __init__(self, layers: list[LinearLayer], activations: list[str]):
        if len(layers) != len(activations):
            raise ConfigError("need one activation per layer")
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for kind in activations:
            if kind not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {kind!r}")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.activations = list(activations)
        self._cache: list[tuple[np.ndarray, np.ndarray]] | None = None

    @classmethod
    def build(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden: str = "tanh",
        output: str = "identity",
    ) -> "Mlp":
        """Xavier-initialised network with layer widths ``sizes``."""
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"invalid layer sizes {sizes}")
        layers = [LinearLayer.xavier(i, o, rng) for i, o in zip(sizes, sizes[1:])]
        acts = [hidden] * (len(layers) - 1) + [output]
        return cls(layers, acts)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x) -> np.ndarray:
        h = as_matrix(x)
        cache = []
        for layer, kind in zip(self.layers, self.activations):
            pre = layer.forward(h)
            h = activation(kind, pre)
            cache.append((pre, h))
        self._cache = cache
        return h

    def predict(self, x) -> np.ndarray:
        """Forward pass that leaves layer caches untouched."""
        h = as_matrix(x)
        for layer, kind in zip(self.layers, self.activations):
            if h.shape[1] != layer.in_dim:
                raise ShapeError(f"layer expects {layer.in_dim} input columns, got {h.shape[1]}")
            h = activation(kind, h @ layer.weight.T + layer.bias)
        return h

    def backward(self, output_grad) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        g = as_matrix(output_grad)
        for layer, kind, (pre, post) in zip(
            reversed(self.layers), reversed(self.activations), reversed(self._cache)
        ):
            if kind != "identity":
                g = g * activation_grad(kind, pre, post)
            g = layer.backward(g)
        self._cache = None
        return g

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """Yield ``(suffix, param, grad)`` triples in declared order."""
        for k, layer in enumerate(self.layers):
            yield f"layer{k}.weight", layer.weight, layer.weight_grad
            yield f"layer{k}.bias", layer.bias, layer.bias_grad
