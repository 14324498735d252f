"""Frequency-based coreset construction from per-epoch GradNorm traces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .selection import threshold_mask
from .valuation import ValuationTable


@dataclass
class FrequencyCounter:
    """How often each sample fell inside the GradNorm thresholds.

    Per-epoch masks are kept so trailing epochs can be dropped afterwards.
    """

    sample_ids: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, m: int, sample_ids=None) -> "FrequencyCounter":
        ids = np.arange(m) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        if ids.size != m:
            raise ValueError("sample_ids length does not match m")
        return cls(ids)

    def __len__(self):
        return self.sample_ids.size

    @property
    def epochs_recorded(self) -> int:
        return len(self.masks)

    @property
    def counts(self) -> np.ndarray:
        if not self.masks:
            return np.zeros(len(self), dtype=np.int64)
        return np.sum(self.masks, axis=0, dtype=np.int64)

    def truncated(self, exclude_last_epochs: int) -> "FrequencyCounter":
        if exclude_last_epochs < 0:
            raise ValueError("exclude_last_epochs must be >= 0")
        keep = max(0, self.epochs_recorded - exclude_last_epochs)
        return FrequencyCounter(self.sample_ids, list(self.masks[:keep]))


def record_epoch(counter: FrequencyCounter, table: ValuationTable, t_low: float, t_up: float) -> FrequencyCounter:
    if len(table) != len(counter):
        raise ValueError(f"table has {len(table)} samples, counter has {len(counter)}")
    counter.masks.append(threshold_mask(table.grad_norm, t_low, t_up))
    return counter


@dataclass
class Coreset:
    indices: np.ndarray  # sorted sample ids
    budget: int
    frequency_threshold: int
    seed: int = 0
    epochs: int = 0

    def __len__(self):
        return self.indices.size


def build_coreset(
    counter: FrequencyCounter,
    n_min: int,
    budget: int,
    seed: int = 0,
    exclude_last_epochs: int = 0,
) -> Coreset:
    """Samples counted in at least ``n_min`` epochs, uniformly subsampled down to
    ``budget`` when there are more. Never padded."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    if n_min < 0:
        raise ValueError("frequency threshold must be >= 0")
    used = counter.truncated(exclude_last_epochs)
    pos = np.flatnonzero(used.counts >= n_min)
    if pos.size > budget:
        rng = np.random.default_rng(seed)
        pos = np.sort(rng.choice(pos, size=budget, replace=False))
    return Coreset(np.sort(counter.sample_ids[pos]), budget, n_min, seed, used.epochs_recorded)


def easy_hard_report(counter: FrequencyCounter, low_cut: int, high_cut: int) -> tuple[np.ndarray, np.ndarray]:
    """Ids selected in at most ``low_cut`` epochs (easy) and at least ``high_cut`` (hard)."""
    if low_cut > high_cut:
        raise ValueError("low_cut must not exceed high_cut")
    c = counter.counts
    return counter.sample_ids[c <= low_cut], counter.sample_ids[c >= high_cut]


def write_coreset(coreset: Coreset, path) -> None:
    with open(path, "w") as fh:
        fh.write(
            f"# N={coreset.frequency_threshold} budget={coreset.budget} "
            f"seed={coreset.seed} epochs={coreset.epochs}\n"
        )
        for i in coreset.indices:
            fh.write(f"{int(i)}\n")


def read_coreset(path) -> Coreset:
    meta = {}
    ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    meta[key] = int(val)
                continue
            try:
                ids.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected a sample id, got {line!r}") from None
    return Coreset(
        np.array(sorted(ids), dtype=np.int64),
        meta.get("budget", len(ids)),
        meta.get("N", 0),
        meta.get("seed", 0),
        meta.get("epochs", 0),
    )


def write_frequencies(counter: FrequencyCounter, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "count"])
        for sid, c in zip(counter.sample_ids, counter.counts):
            w.writerow([int(sid), int(c)])
