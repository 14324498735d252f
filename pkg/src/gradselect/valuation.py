"""Per-sample value scores: Data SI (total and layerwise), GradNorm, and
their output-gradient approximations."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .nn import (
    DeltaTheta,
    GradVector,
    ModelSpec,
    ParamVector,
    Segment,
    _check_batch,
    _check_labels,
    forward,
    loss_and_batch_grad,
    per_sample_grads,
    softmax,
)

EXACT = "exact"
APPROX = "approx"


def _segment_bounds(partition: Sequence[Segment]):
    offsets = np.array([seg.offset for seg in partition])
    lengths = np.array([seg.length for seg in partition], dtype=np.float64)
    return offsets, lengths


def data_si_from_grad(
    grad, delta: DeltaTheta, partition: Sequence[Segment] | None = None
) -> tuple[np.ndarray, float]:
    """Layerwise (per-parameter mean) and total Data SI of one sample's gradient.

    ``total = -g . delta`` is computed on the flat vectors and therefore does
    not depend on the partition used for the layerwise split.
    """
    g = grad.values if isinstance(grad, GradVector) else np.asarray(grad, dtype=np.float64)
    if g.shape != delta.values.shape:
        raise ValueError(
            f"gradient has {g.size} entries but delta has {delta.values.size}"
        )
    partition = delta.partition if partition is None else partition
    offsets, lengths = _segment_bounds(partition)
    per_layer = -np.add.reduceat(g * delta.values, offsets) / lengths
    total = -float(np.dot(g, delta.values))
    return per_layer, total


def data_si(params: ParamVector, spec: ModelSpec, x, y, delta: DeltaTheta) -> tuple[np.ndarray, float]:
    """Data SI of a single sample ``(x, y)`` under the predicted update ``delta``."""
    if delta.values.size != len(params):
        raise ValueError("delta is not aligned with the parameters")
    (g,) = per_sample_grads(params, spec, np.atleast_2d(x), np.atleast_1d(y))
    return data_si_from_grad(g, delta)


def grad_norm(params: ParamVector, spec: ModelSpec, x, y) -> float:
    """Squared Euclidean norm of one sample's loss gradient."""
    (g,) = per_sample_grads(params, spec, np.atleast_2d(x), np.atleast_1d(y))
    return float(np.dot(g.values, g.values))


def vsgd_identity_check(params: ParamVector, spec: ModelSpec, X, y, learning_rate: float):
    """Both sides of the vanilla-SGD identity for full-set Data SI.

    ``lhs`` is the mean per-sample Data SI under ``delta = -lr * mean_grad``;
    ``rhs`` is ``lr * ||mean_grad||^2``.
    """
    _, batch = loss_and_batch_grad(params, spec, X, y)
    delta = DeltaTheta(-learning_rate * batch.values, params.partition)
    totals = [data_si_from_grad(g, delta)[1] for g in per_sample_grads(params, spec, X, y)]
    lhs = float(np.mean(totals))
    rhs = float(learning_rate * np.dot(batch.values, batch.values))
    return lhs, rhs


def approx_valuation(logits, y, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Scores from the output layer only.

    With ``r = softmax(logits) - onehot(y)`` (the loss gradient w.r.t. the
    logits) and the output step estimated as ``beta * (onehot - p)``:
    approximate Data SI is ``beta * ||r||^2`` and approximate GradNorm is
    ``||r||^2``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    m, C = logits.shape
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {y.shape}")
    if m and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    r = softmax(logits) if m else np.zeros((0, C))
    r[np.arange(m), y] -= 1.0
    out_grad_norm = np.einsum("ij,ij->i", r, r)
    step = beta * -r
    out_data_si = -np.einsum("ij,ij->i", r, step)
    return out_data_si, out_grad_norm


@dataclass
class ValuationRecord:
    sample_id: int
    data_si_per_layer: np.ndarray
    data_si_total: float
    grad_norm: float
    approx_grad_norm: float | None = None


@dataclass
class ValuationTable:
    """Column-oriented scores for one epoch, rows in dataset order.

    In approximate mode there is a single output-level feature column and
    ``grad_norm``/``data_si_total`` hold the approximations.
    """

    epoch: int
    sample_ids: np.ndarray
    grad_norm: np.ndarray
    data_si_total: np.ndarray
    data_si_layers: np.ndarray
    layer_names: tuple[str, ...]
    approx_grad_norm: np.ndarray | None = None
    mode: str = EXACT

    def __len__(self):
        return self.sample_ids.size

    @property
    def mean_grad_norm(self) -> float:
        return float(np.mean(self.grad_norm))

    def records(self) -> Iterator[ValuationRecord]:
        for j in range(len(self)):
            yield ValuationRecord(
                int(self.sample_ids[j]),
                self.data_si_layers[j],
                float(self.data_si_total[j]),
                float(self.grad_norm[j]),
                None if self.approx_grad_norm is None else float(self.approx_grad_norm[j]),
            )


def build_valuation_table(
    params: ParamVector,
    spec: ModelSpec,
    X,
    y,
    delta: DeltaTheta | None = None,
    mode: str = EXACT,
    beta: float = 1.0,
    sample_ids=None,
    epoch: int = 0,
) -> ValuationTable:
    """Score every sample of ``(X, y)``.

    ``exact`` runs one backward pass per sample; without ``delta`` the Data SI
    columns are NaN. ``approx`` needs a forward pass only.
    """
    X = _check_batch(spec, X)
    m = X.shape[0]
    if m == 0:
        raise ValueError("cannot value an empty dataset")
    y = _check_labels(spec, y, m)
    ids = np.arange(m) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    logits = forward(params, spec, X)
    approx_dsi, approx_gn = approx_valuation(logits, y, beta)

    if mode == APPROX:
        return ValuationTable(
            epoch=epoch,
            sample_ids=ids,
            grad_norm=approx_gn,
            data_si_total=approx_dsi,
            data_si_layers=approx_dsi[:, None].copy(),
            layer_names=("output",),
            approx_grad_norm=approx_gn,
            mode=APPROX,
        )
    if mode != EXACT:
        raise ValueError(f"mode must be {EXACT!r} or {APPROX!r}, got {mode!r}")

    partition = params.partition if delta is None else delta.partition
    if delta is not None and delta.values.size != len(params):
        raise ValueError("delta is not aligned with the parameters")
    gn = np.empty(m)
    totals = np.full(m, np.nan)
    layers = np.full((m, len(partition)), np.nan)
    for j, g in enumerate(per_sample_grads(params, spec, X, y)):
        gn[j] = np.dot(g.values, g.values)
        if delta is not None:
            layers[j], totals[j] = data_si_from_grad(g, delta)
    return ValuationTable(
        epoch=epoch,
        sample_ids=ids,
        grad_norm=gn,
        data_si_total=totals,
        data_si_layers=layers,
        layer_names=tuple(seg.name for seg in partition),
        approx_grad_norm=approx_gn,
        mode=EXACT,
    )


def fmt(x) -> str:
    """Decimal text with 17 significant digits (round-trips float64)."""
    return format(float(x), ".17g")


def write_valuation_csv(table: ValuationTable, path, cluster_ids=None) -> None:
    n_layers = table.data_si_layers.shape[1]
    header = ["sample_id", "grad_norm", "data_si_total"]
    header += [f"data_si_layer_{i}" for i in range(n_layers)]
    header.append("approx_grad_norm")
    if cluster_ids is not None:
        header.append("cluster_id")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j in range(len(table)):
            row = [int(table.sample_ids[j]), fmt(table.grad_norm[j]), fmt(table.data_si_total[j])]
            row += [fmt(v) for v in table.data_si_layers[j]]
            row.append("" if table.approx_grad_norm is None else fmt(table.approx_grad_norm[j]))
            if cluster_ids is not None:
                row.append(int(cluster_ids[j]))
            w.writerow(row)
