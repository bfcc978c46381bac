"""Small numpy neural-network substrate: dense layers, embeddings, losses, SGD.

Everything is float64. Layers are plain dataclasses holding arrays; the
forward/backward helpers are pure functions so a frozen model can be shared
across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
LOG_CLAMP = 1e-12
FORMAT_VERSION = 1


class NumericalError(ValueError):
    """Raised when a loss or parameter goes non-finite."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.default_rng(seed)


def init_params(shape, scheme: str = "uniform_scaled", seed=None, fans=None) -> np.ndarray:
    """Deterministic parameter initialisation.

    ``uniform_scaled`` draws from U(-sqrt(6/(in+out)), +sqrt(6/(in+out))) where
    ``shape`` is (out, in); a 1-D shape uses its length for both fans.  ``fans``
    overrides the (in, out) pair taken from the shape.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme != "uniform_scaled":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = _rng(seed)
    fan_out = shape[0]
    fan_in = shape[1] if len(shape) > 1 else shape[0]
    if fans is not None:
        fan_in, fan_out = fans
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return relu(z)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, a, activation):
    if activation == "relu":
        return (z > 0).astype(float)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: W{self.weights.shape}, b{self.bias.shape}"
            )

    @classmethod
    def create(cls, in_dim: int, out_dim: int, activation: str, seed) -> "DenseLayer":
        return cls(
            init_params((out_dim, in_dim), "uniform_scaled", seed),
            np.zeros(out_dim),
            activation,
        )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseCache:
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray


def dense_forward_cached(layer: DenseLayer, x) -> tuple[np.ndarray, DenseCache]:
    """activation(W x + b) for a vector or a (batch, in) matrix, plus the backward cache."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"expected input dim {layer.in_dim}, got {x.shape[-1]}")
    z = x @ layer.weights.T + layer.bias
    a = _activate(z, layer.activation)
    return a, DenseCache(x, z, a)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return dense_forward_cached(layer, x)[0]


def dense_backward(layer: DenseLayer, cache: DenseCache, grad_out):
    """Return (grad wrt input, grad wrt weights, grad wrt bias); batch rows are summed."""
    dz = np.asarray(grad_out, dtype=float) * _activation_grad(
        cache.z, cache.a, layer.activation
    )
    if dz.ndim == 1:
        grad_w = np.outer(dz, cache.x)
        grad_b = dz
    else:
        grad_w = dz.T @ cache.x
        grad_b = dz.sum(axis=0)
    return dz @ layer.weights, grad_w, grad_b


@dataclass
class EmbeddingTable:
    """Row-indexed vectors; row ``oov_row`` serves every unknown id."""

    vectors: np.ndarray
    index: dict = field(default_factory=dict)
    oov_row: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2:
            raise ValueError("embedding vectors must be a matrix")
        if not 0 <= self.oov_row < self.vectors.shape[0]:
            raise ValueError("oov_row out of range")

    @classmethod
    def create(cls, ids, dim: int, seed) -> "EmbeddingTable":
        """Row 0 is OOV; known ids get rows 1..len(ids) in sorted order."""
        index = {key: i + 1 for i, key in enumerate(sorted(set(ids)))}
        # a lookup feeds one row forward, so scale by the row width, not the vocabulary
        vectors = init_params((len(index) + 1, dim), "uniform_scaled", seed, fans=(dim, dim))
        return cls(vectors, index, 0)

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, key) -> int:
        return self.index.get(key, self.oov_row)

    def rows(self, keys) -> np.ndarray:
        return np.fromiter((self.row(k) for k in keys), dtype=np.intp)

    def lookup(self, key) -> np.ndarray:
        return self.vectors[self.row(key)]


def softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.shape[-1] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(target, predicted) -> float:
    """-sum(t * log p) with p clamped at 1e-12."""
    target = np.asarray(target, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if target.shape != predicted.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {predicted.shape}")
    return float(-np.sum(target * np.log(np.maximum(predicted, LOG_CLAMP))))


def pool(vectors, mode: str = "average", dim: int | None = None) -> np.ndarray:
    """Elementwise max or mean of a list of equal-length vectors.

    An empty list pools to the zero vector of length ``dim``.
    """
    if mode not in ("max", "average"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if len(vectors) == 0:
        if dim is None:
            raise ValueError("dim is required to pool an empty list")
        return np.zeros(dim)
    lengths = {len(v) for v in vectors}
    if len(lengths) != 1:
        raise ValueError(f"mixed vector dims in pool: {sorted(lengths)}")
    if dim is not None and lengths != {dim}:
        raise ValueError(f"expected dim {dim}, got {lengths.pop()}")
    stacked = np.asarray(vectors, dtype=float)
    return stacked.max(axis=0) if mode == "max" else stacked.mean(axis=0)


def pool_backward(vectors, mode: str, grad) -> np.ndarray:
    """Gradient of :func:`pool` wrt each input row; shape (len(vectors), dim)."""
    stacked = np.asarray(vectors, dtype=float)
    if len(stacked) == 0:
        return np.zeros((0, len(grad)))
    if mode == "average":
        return np.tile(np.asarray(grad) / len(stacked), (len(stacked), 1))
    out = np.zeros_like(stacked)
    winners = stacked.argmax(axis=0)
    out[winners, np.arange(stacked.shape[1])] = grad
    return out


Params = Mapping[str, np.ndarray]


def sgd_step(params: Params, grads: Params, eta: float) -> Params:
    """In-place ``p -= eta * g`` for every named parameter."""
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    if set(params) != set(grads):
        raise ValueError("gradient names do not match parameter names")
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        p -= eta * g
    return params


def zero_grads(params: Params) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in params.items()}


def check_finite(value, what: str = "value"):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {what}")
    return value


def gradient_errors(
    params: Params,
    loss_fn: Callable[[], tuple[float, Params]],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed=0,
) -> dict[str, float]:
    """Per-parameter relative error between analytic and central-difference gradients.

    ``loss_fn`` closes over the model and sample, reads ``params`` (mutated in
    place here) and returns ``(loss, grads)``.  The error for one parameter is
    ``max|a - n| / max(1e-8, max|a| + max|n|)`` over the checked coordinates.
    ``max_coords`` caps the number of randomly chosen coordinates per parameter.
    """
    loss, analytic = loss_fn()
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss at the check point")
    rng = _rng(seed)
    errors = {}
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = np.asarray(analytic[name]).reshape(-1)[coords]
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + epsilon
            up = loss_fn()[0]
            flat[c] = orig - epsilon
            down = loss_fn()[0]
            flat[c] = orig
            numeric[j] = (up - down) / (2 * epsilon)
        if not np.all(np.isfinite(numeric)):
            raise NumericalError(f"non-finite loss while perturbing {name}")
        if len(coords) == 0:
            errors[name] = 0.0
            continue
        scale = max(1e-8, np.abs(a).max() + np.abs(numeric).max())
        errors[name] = float(np.abs(a - numeric).max() / scale)
    return errors


def finite_difference_check(model, loss_fn, sample, epsilon: float = 1e-5, **kwargs) -> float:
    """Worst relative gradient error over all of ``model.params()``.

    ``loss_fn(model, sample)`` must return ``(loss, grads)`` with grads keyed
    like ``model.params()``.
    """
    errors = gradient_errors(
        model.params(), lambda: loss_fn(model, sample), epsilon, **kwargs
    )
    return max(errors.values(), default=0.0)


def tables_to_json(tables: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Serialise named matrices to the versioned JSON document (sorted keys)."""
    doc = {"format_version": FORMAT_VERSION, "tables": {}}
    for name, arr in tables.items():
        arr = np.asarray(arr, dtype=float)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        doc["tables"][name] = {
            "rows": int(mat.shape[0]),
            "cols": int(mat.shape[1]),
            "data": [float(v) for v in mat.reshape(-1)],
        }
    if meta is not None:
        doc["meta"] = meta
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def tables_from_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    tables = {}
    for name, t in doc["tables"].items():
        data = np.asarray(t["data"], dtype=float)
        if data.size != t["rows"] * t["cols"]:
            raise ValueError(f"table {name}: data length does not match rows*cols")
        tables[name] = data.reshape(t["rows"], t["cols"])
    return tables, doc.get("meta", {})
