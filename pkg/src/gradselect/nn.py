"""Dense softmax-MLP with exact batch and per-sample gradients.

Parameters live in one flat float64 vector. A partition names contiguous
segments of that vector (one weight and one bias segment per affine map)
so that valuation code can slice gradients layer by layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class Segment(NamedTuple):
    name: str
    offset: int
    length: int


def check_partition(partition: Sequence[Segment], n: int) -> tuple[Segment, ...]:
    partition = tuple(Segment(*seg) for seg in partition)
    names = [seg.name for seg in partition]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate layer names in partition: {names}")
    pos = 0
    for seg in partition:
        if seg.offset != pos or seg.length <= 0:
            raise ValueError(
                f"partition segment {seg.name!r} at offset {seg.offset} "
                f"(length {seg.length}) is not contiguous from {pos}"
            )
        pos += seg.length
    if pos != n:
        raise ValueError(f"partition covers {pos} entries, expected {n}")
    return partition


def merge_segments(partition: Sequence[Segment], i: int) -> tuple[Segment, ...]:
    """Return a coarser partition with segments ``i`` and ``i + 1`` merged."""
    a, b = partition[i], partition[i + 1]
    merged = Segment(f"{a.name}+{b.name}", a.offset, a.length + b.length)
    return tuple(partition[:i]) + (merged,) + tuple(partition[i + 2:])


def random_partition(n: int, n_segments: int, rng: np.random.Generator) -> tuple[Segment, ...]:
    """Split ``range(n)`` into ``n_segments`` random contiguous pieces."""
    if not 1 <= n_segments <= n:
        raise ValueError(f"cannot split {n} entries into {n_segments} segments")
    cuts = np.sort(rng.choice(np.arange(1, n), size=n_segments - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [n]])
    return tuple(
        Segment(f"seg{i}", int(lo), int(hi - lo))
        for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]))
    )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the classifier; fully determines the parameter layout."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    num_classes: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def partition(self) -> tuple[Segment, ...]:
        segs = []
        pos = 0
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes):
            segs.append(Segment(f"layer{i}.weight", pos, fan_in * fan_out))
            pos += fan_in * fan_out
            segs.append(Segment(f"layer{i}.bias", pos, fan_out))
            pos += fan_out
        return tuple(segs)

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)


@dataclass
class ParamVector:
    values: np.ndarray
    partition: tuple[Segment, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        self.partition = check_partition(self.partition, self.values.size)

    def __len__(self):
        return self.values.size

    @property
    def layer_names(self) -> list[str]:
        return [seg.name for seg in self.partition]

    def layer(self, name: str) -> np.ndarray:
        for seg in self.partition:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.length]
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.partition)


@dataclass
class GradVector:
    """Gradient aligned with a ParamVector.

    ``sample_id`` is None for a full-batch gradient, otherwise the id of the
    single sample whose loss was differentiated.
    """

    values: np.ndarray
    partition: tuple[Segment, ...]
    sample_id: int | None = None

    @property
    def scope(self) -> str:
        return "full_batch" if self.sample_id is None else "single_sample"


@dataclass
class DeltaTheta:
    """Predicted parameter update for the coming epoch."""

    values: np.ndarray
    partition: tuple[Segment, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.partition:
            self.partition = (Segment("all", 0, self.values.size),)
        self.partition = check_partition(self.partition, self.values.size)


def init_params(spec: ModelSpec) -> ParamVector:
    """He-style uniform fan-in initialisation, zero biases."""
    rng = np.random.default_rng(spec.seed)
    values = np.zeros(spec.n_params)
    for (fan_in, fan_out), seg in zip(spec.layer_shapes, spec.partition[::2]):
        bound = np.sqrt(6.0 / fan_in)
        values[seg.offset:seg.offset + seg.length] = rng.uniform(-bound, bound, fan_in * fan_out)
    return ParamVector(values, spec.partition)


def unpack(params: ParamVector, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per affine map; ``W`` has shape (fan_in, fan_out)."""
    if len(params) != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {len(params)}")
    out = []
    v = params.values
    pos = 0
    for fan_in, fan_out in spec.layer_shapes:
        W = v[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = v[pos:pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def _check_batch(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"batch must have shape (m, {spec.input_dim}), got {X.shape}")
    return X


def _check_labels(spec: ModelSpec, y, m: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {y.shape}")
    if m and (not np.issubdtype(y.dtype, np.integer)):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if m and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return y.astype(np.int64, copy=False)


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, a):
    # expressed through the post-activation value
    return (a > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def _forward_cache(params, spec, X):
    layers = unpack(params, spec)
    acts = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = _act(spec.activation, z)
            acts.append(h)
        else:
            return layers, acts, z


def forward(params: ParamVector, spec: ModelSpec, X) -> np.ndarray:
    """Raw class scores (logits), shape (m, num_classes)."""
    X = _check_batch(spec, X)
    if X.shape[0] == 0:
        return np.zeros((0, spec.num_classes))
    return _forward_cache(params, spec, X)[2]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def loss(params: ParamVector, spec: ModelSpec, X, y) -> float:
    X = _check_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    return float(cross_entropy(forward(params, spec, X), y).mean())


def loss_and_batch_grad(params: ParamVector, spec: ModelSpec, X, y) -> tuple[float, GradVector]:
    """Mean cross-entropy over the batch and its gradient w.r.t. all parameters.

    Weight decay is not part of this gradient; the optimizer adds it.
    """
    X = _check_batch(spec, X)
    m = X.shape[0]
    if m == 0:
        raise ValueError("batch must contain at least one sample")
    y = _check_labels(spec, y, m)
    layers, acts, logits = _forward_cache(params, spec, X)
    value = float(cross_entropy(logits, y).mean())

    delta = softmax(logits)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    grad = np.empty(spec.n_params)
    segs = spec.partition
    for i in range(len(layers) - 1, -1, -1):
        w_seg, b_seg = segs[2 * i], segs[2 * i + 1]
        grad[w_seg.offset:w_seg.offset + w_seg.length] = (acts[i].T @ delta).ravel()
        grad[b_seg.offset:b_seg.offset + b_seg.length] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0].T) * _act_grad(spec.activation, acts[i])
    return value, GradVector(grad, params.partition)


def per_sample_grads(
    params: ParamVector,
    spec: ModelSpec,
    X,
    y,
    sample_ids: Sequence[int] | None = None,
    chunk_size: int = 1024,
) -> Iterator[GradVector]:
    """Yield the gradient of each sample's own loss, in input order.

    Forward passes are batched per chunk; each backward pass runs on a single
    sample, so at most one gradient vector is alive per yielded item.
    """
    X = _check_batch(spec, X)
    m = X.shape[0]
    if m == 0:
        raise ValueError("batch must contain at least one sample")
    y = _check_labels(spec, y, m)
    ids = np.arange(m) if sample_ids is None else np.asarray(sample_ids)
    segs = spec.partition
    n_layers = len(spec.layer_shapes)
    for start in range(0, m, chunk_size):
        stop = min(start + chunk_size, m)
        layers, acts, logits = _forward_cache(params, spec, X[start:stop])
        probs = softmax(logits)
        for r in range(stop - start):
            g = np.empty(spec.n_params)
            delta = probs[r].copy()
            delta[y[start + r]] -= 1.0
            for i in range(n_layers - 1, -1, -1):
                w_seg, b_seg = segs[2 * i], segs[2 * i + 1]
                g[w_seg.offset:w_seg.offset + w_seg.length] = np.outer(acts[i][r], delta).ravel()
                g[b_seg.offset:b_seg.offset + b_seg.length] = delta
                if i:
                    delta = (layers[i][0] @ delta) * _act_grad(spec.activation, acts[i][r])
            yield GradVector(g, params.partition, int(ids[start + r]))
