"""Per-epoch subset selection rules and the learning-rate compensation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .clustering import ClusterResult, kmeans, largest_cluster_mask
from .valuation import ValuationTable

logger = logging.getLogger(__name__)

DATA_SI = "datasi"
GRADNORM = "gradnorm"
UNIFORM = "uniform"
MARGIN = "margin"
CONFIDENCE = "confidence"
FULL = "full"
METHODS = (DATA_SI, GRADNORM, UNIFORM, MARGIN, CONFIDENCE, FULL)
BASELINES = (UNIFORM, MARGIN, CONFIDENCE)


@dataclass
class SelectionConfig:
    method: str = FULL
    k: int = 10
    tau: float = 0.5
    t_low: float = 0.1
    t_up: float = 40.0
    fixed_fraction: float = 1.0
    approx: bool = False
    adjust_lr: bool = True
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 < self.t_low < self.t_up:
            raise ValueError("thresholds must satisfy 0 < t_low < t_up")
        if not 0.0 < self.fixed_fraction <= 1.0:
            raise ValueError("fixed_fraction must lie in (0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class SelectionOutcome:
    epoch: int
    method: str
    mask: np.ndarray
    selected_fraction: float
    lr_used: float
    lr_restored: float
    clusters: ClusterResult | None = None

    @property
    def n_selected(self) -> int:
        return int(np.count_nonzero(self.mask))


def adjust_lr(lr: float, alpha: float) -> float:
    """Scale the rate by the selected portion ``alpha`` of the training set."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"selected portion must lie in (0, 1], got {alpha}")
    return alpha * lr


def restore_lr(lr: float, alpha: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"selected portion must lie in (0, 1], got {alpha}")
    return lr / alpha


def _outcome(epoch, method, mask, lr, scale, adjust, clusters=None):
    mask = np.asarray(mask, dtype=bool)
    fraction = np.count_nonzero(mask) / mask.size
    if adjust and scale < 1.0:
        used = adjust_lr(lr, scale)
        restored = restore_lr(used, scale)
    else:
        used = restored = lr
    return SelectionOutcome(epoch, method, mask, fraction, used, restored, clusters)


def full_outcome(m: int, lr: float, epoch: int = 0, method: str = FULL) -> SelectionOutcome:
    return _outcome(epoch, method, np.ones(m, dtype=bool), lr, 1.0, False)


def threshold_mask(grad_norms, t_low: float, t_up: float) -> np.ndarray:
    """Samples whose GradNorm lies strictly between ``t_low*mu`` and ``t_up*mu``."""
    g = np.asarray(grad_norms, dtype=np.float64)
    mu = g.mean()
    return (g > t_low * mu) & (g < t_up * mu)


def select_data_si(
    table: ValuationTable,
    cfg: SelectionConfig,
    lr: float,
    epoch: int = 0,
    clusterer: Callable[..., ClusterResult] = kmeans,
) -> SelectionOutcome:
    """Cluster layerwise Data SI features; drop the largest cluster if it holds
    more than ``tau`` of the samples."""
    m = len(table)
    if m < cfg.k:
        logger.warning("epoch %d: %d samples < k=%d, training on the full set", epoch, m, cfg.k)
        return full_outcome(m, lr, epoch, DATA_SI)
    clusters = clusterer(table.data_si_layers, cfg.k, seed=cfg.seed + epoch)
    alpha = clusters.largest_fraction
    if alpha > cfg.tau and alpha < 1.0:
        mask = largest_cluster_mask(clusters)
        return _outcome(epoch, DATA_SI, mask, lr, 1.0 - alpha, cfg.adjust_lr, clusters)
    return _outcome(epoch, DATA_SI, np.ones(m, dtype=bool), lr, 1.0, False, clusters)


def select_gradnorm(table: ValuationTable, cfg: SelectionConfig, lr: float, epoch: int = 0) -> SelectionOutcome:
    """Keep samples with GradNorm inside ``(t_low*mu, t_up*mu)``."""
    mask = threshold_mask(table.grad_norm, cfg.t_low, cfg.t_up)
    if not mask.any():
        logger.warning("epoch %d: empty GradNorm selection, training on the full set", epoch)
        return full_outcome(len(table), lr, epoch, GRADNORM)
    return _outcome(epoch, GRADNORM, mask, lr, mask.mean(), cfg.adjust_lr)


def select_baseline(proba, cfg: SelectionConfig, lr: float, epoch: int = 0) -> SelectionOutcome:
    """Fixed-size selection from class probabilities (one row per sample).

    ``uniform`` samples without replacement, ``margin`` keeps the smallest
    top-1 minus top-2 gaps, ``confidence`` the smallest top-1 probabilities.
    """
    proba = np.asarray(proba, dtype=np.float64)
    m = proba.shape[0]
    n_keep = min(m, math.ceil(cfg.fixed_fraction * m - 1e-9))
    mask = np.zeros(m, dtype=bool)
    if cfg.method == UNIFORM:
        rng = np.random.default_rng([cfg.seed, epoch])
        mask[rng.choice(m, size=n_keep, replace=False)] = True
    elif cfg.method in (MARGIN, CONFIDENCE):
        top = -np.sort(-proba, axis=1)
        score = top[:, 0] - top[:, 1] if cfg.method == MARGIN else top[:, 0]
        mask[np.argsort(score, kind="stable")[:n_keep]] = True
    else:
        raise ValueError(f"{cfg.method!r} is not a baseline method")
    return _outcome(epoch, cfg.method, mask, lr, cfg.fixed_fraction, cfg.adjust_lr)
