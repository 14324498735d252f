"""Experiment configuration: INI file with one section per concern."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class DataConfig:
    source: str = "blobs"  # blobs | moons | csv | idx
    path: str = ""
    label_column: str = "label"
    images: str = ""
    labels: str = ""
    limit: int = 0
    m: int = 1000
    d: int = 10
    classes: int = 5
    spread: float = 1.0
    center_box: float = 2.5
    noise: float = 0.1
    corrupt_count: int = 0
    corrupt_fraction: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = (16, 24)
    decay_factor: float = 0.1
    early_stop_patience: int = 5
    warmup_epochs: int = 2
    split: tuple[float, ...] = (0.7, 0.2, 0.1)
    batch_size: int = 32
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    seed: int = 0


@dataclass
class SelectConfig:
    method: str = "gradnorm"
    k: int = 10
    tau: float = 0.5
    t_low: float = 0.1
    t_up: float = 40.0
    fixed_fraction: float = 1.0
    approx: bool = False
    beta: float = 1.0
    adjust_lr: bool = True
    two_pass: bool = False


@dataclass
class CoresetConfig:
    n_min: int = 4
    budget: float = 0.3
    exclude_last: str = "best"
    path: str = ""


@dataclass
class CalibrateConfig:
    target_share: float = 0.9
    post_warmup_epochs: int = 3


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectConfig = field(default_factory=SelectConfig)
    coreset: CoresetConfig = field(default_factory=CoresetConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    save_valuations: bool = False

    SECTIONS = ("data", "train", "selection", "coreset", "calibrate")

    def validate(self) -> list[str]:
        """All configuration problems, collected before any compute."""
        errs = []
        t, s, d, c = self.train, self.selection, self.data, self.coreset
        if t.epochs < 1:
            errs.append("train.epochs must be >= 1")
        if any(e >= t.epochs for e in t.milestones):
            errs.append("train.milestones must be < train.epochs")
        if len(t.split) != 3 or abs(sum(t.split) - 1.0) > 1e-9 or min(t.split) < 0:
            errs.append("train.split must be three non-negative ratios summing to 1")
        if t.lr <= 0:
            errs.append("train.lr must be positive")
        if not 0 <= t.momentum < 1:
            errs.append("train.momentum must lie in [0, 1)")
        if t.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if t.activation not in ("relu", "tanh"):
            errs.append("train.activation must be relu or tanh")
        if s.method not in ("datasi", "gradnorm", "uniform", "margin", "confidence", "full"):
            errs.append(f"selection.method {s.method!r} is unknown")
        if not 0 < s.t_low < s.t_up:
            errs.append("selection thresholds must satisfy 0 < t_low < t_up")
        if not 0 < s.tau < 1:
            errs.append("selection.tau must lie in (0, 1)")
        if not 0 < s.fixed_fraction <= 1:
            errs.append("selection.fixed_fraction must lie in (0, 1]")
        if s.k < 1:
            errs.append("selection.k must be >= 1")
        if d.source not in ("blobs", "moons", "csv", "idx"):
            errs.append(f"data.source {d.source!r} is unknown")
        if d.source == "csv" and not d.path:
            errs.append("data.path is required for csv data")
        if d.source == "idx" and not (d.images and d.labels):
            errs.append("data.images and data.labels are required for idx data")
        if d.corrupt_count and d.corrupt_fraction:
            errs.append("give only one of data.corrupt_count and data.corrupt_fraction")
        if c.budget <= 0:
            errs.append("coreset.budget must be positive")
        if c.n_min < 0:
            errs.append("coreset.n_min must be >= 0")
        if c.exclude_last != "best":
            try:
                if int(c.exclude_last) < 0:
                    raise ValueError
            except ValueError:
                errs.append("coreset.exclude_last must be 'best' or a non-negative integer")
        if not 0 < self.calibrate.target_share <= 1:
            errs.append("calibrate.target_share must lie in (0, 1]")
        return errs


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
    return type(default)(raw.strip())


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key != "save_valuations":
                    raise ValueError(f"unknown key [experiment] {key}")
                cfg.save_valuations = _coerce(raw, False)
            continue
        if section not in ExperimentConfig.SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ValueError(f"unknown key [{section}] {key}")
            try:
                setattr(obj, key, _coerce(raw, getattr(obj, key)))
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from None
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Write the fully resolved configuration; loading it back reproduces ``cfg``."""
    parser = configparser.ConfigParser()
    for section in ExperimentConfig.SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _render(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    parser["experiment"] = {"save_valuations": _render(cfg.save_valuations)}
    with open(Path(path), "w") as fh:
        parser.write(fh)
