"""Experiment pipelines: full-set, adaptive selection, coreset, valuation dumps,
and t_up calibration. Every pipeline writes CSV/JSON artifacts to a directory."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import kmeans
from .config import ExperimentConfig, dump_config
from .coreset import Coreset, FrequencyCounter, build_coreset, easy_hard_report, read_coreset, write_coreset, write_frequencies
from .data import Dataset, corrupt_labels, gen_blobs, gen_moons, load_csv, load_idx, split_dataset
from .estimators import FrequencyCoreset, best_epoch_exclusion, SubsetSGDClassifier, balanced_accuracy
from .selection import threshold_mask
from .valuation import fmt, write_valuation_csv

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    corrupted_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "blobs":
        return gen_blobs(d.m, d.d, d.classes, d.spread, d.seed, (-d.center_box, d.center_box))
    if d.source == "moons":
        return gen_moons(d.m, d.noise, d.seed)
    if d.source == "csv":
        ds = load_csv(d.path, d.label_column)
    else:
        ds = load_idx(d.images, d.labels, d.limit or None)
    if d.limit and len(ds) > d.limit:
        ds = ds.subset(np.arange(d.limit))
    return ds


def make_splits(cfg: ExperimentConfig, dataset: Dataset | None = None) -> Splits:
    """Seeded split; label corruption, when configured, touches the training split only."""
    ds = load_dataset(cfg) if dataset is None else dataset
    train, val, test = split_dataset(ds, cfg.train.split, cfg.train.seed)
    corrupted = np.zeros(0, dtype=np.int64)
    d = cfg.data
    if d.corrupt_count or d.corrupt_fraction:
        kw = {"count": d.corrupt_count} if d.corrupt_count else {"fraction": d.corrupt_fraction}
        train, corrupted = corrupt_labels(train, seed=cfg.train.seed, **kw)
    return Splits(train, val, test, corrupted)


def make_estimator(cfg: ExperimentConfig, **overrides) -> SubsetSGDClassifier:
    t, s = cfg.train, cfg.selection
    params = dict(
        method=s.method, hidden_dims=t.hidden_dims, activation=t.activation, epochs=t.epochs,
        learning_rate=t.lr, momentum=t.momentum, weight_decay=t.weight_decay,
        milestones=t.milestones, decay_factor=t.decay_factor, batch_size=t.batch_size,
        early_stop_patience=t.early_stop_patience, warmup_epochs=t.warmup_epochs,
        k=s.k, tau=s.tau, t_low=s.t_low, t_up=s.t_up, fixed_fraction=s.fixed_fraction,
        approx=s.approx, beta=s.beta, adjust_lr=s.adjust_lr, random_state=t.seed,
    )
    params.update(overrides)
    return SubsetSGDClassifier(**params)


def fit_on(est: SubsetSGDClassifier, splits: Splits, train: Dataset | None = None) -> SubsetSGDClassifier:
    tr = splits.train if train is None else train
    if est.n_classes is None:
        est.set_params(n_classes=splits.train.num_classes)
    return est.fit(
        tr.features, tr.labels, eval_set=(splits.val.features, splits.val.labels), sample_ids=tr.ids
    )


def summarize(est: SubsetSGDClassifier, splits: Splits, label: str) -> dict:
    pred = est.predict(splits.test.features)
    out = {
        "run": label,
        "method": est.method,
        "epochs_run": est.epochs_run_,
        "best_epoch": est.best_epoch_,
        "val_accuracy": est.best_val_accuracy_,
        "tot": est.total_data_used_,
        "a_e": est.average_data_per_epoch_,
        "train_size": int(len(splits.train)),
    }
    if len(splits.test):
        out["test_accuracy"] = float(np.mean(pred == splits.test.labels))
        out["test_balanced_accuracy"] = balanced_accuracy(splits.test.labels, pred)
    return out


# ---------------------------------------------------------------- writers


def write_metrics(est: SubsetSGDClassifier, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_accuracy", "balanced_accuracy",
                    "selected_fraction", "cumulative_data_used", "lr"])
        for h in est.history_:
            w.writerow([h.epoch, fmt(h.train_loss), fmt(h.val_accuracy), fmt(h.balanced_accuracy),
                        fmt(h.selected_fraction), fmt(h.cumulative_data_used), fmt(h.lr)])


def write_trace(est: SubsetSGDClassifier, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "method", "selected_fraction", "lr_used", "val_accuracy"])
        for o, h in zip(est.trace_, est.history_):
            w.writerow([o.epoch, o.method, fmt(o.selected_fraction), fmt(o.lr_used), fmt(h.val_accuracy)])


def write_run(est: SubsetSGDClassifier, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(est, out / "metrics.csv")
    write_trace(est, out / "selection_trace.csv")


def write_valuations(est: SubsetSGDClassifier, out: Path, k: int) -> None:
    for table in est.tables_:
        clusters = None
        feats = table.data_si_layers
        if len(table) >= k and np.all(np.isfinite(feats)):
            clusters = kmeans(feats, k, seed=est.random_state + table.epoch).assignments
        write_valuation_csv(table, out / f"valuation_epoch_{table.epoch}.csv", clusters)


def write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- pipelines


def run_training(cfg: ExperimentConfig, out, method: str | None = None, splits: Splits | None = None) -> dict:
    """Full-set or adaptive run. With ``selection.two_pass`` the baselines are
    run afterwards at the adaptive run's A/E rounded up to the next tenth."""
    out = Path(out)
    splits = make_splits(cfg) if splits is None else splits
    method = cfg.selection.method if method is None else method
    est = make_estimator(cfg, method=method, keep_tables=cfg.save_valuations)
    fit_on(est, splits)
    write_run(est, out)
    if cfg.save_valuations:
        write_valuations(est, out, cfg.selection.k)
    summary = summarize(est, splits, method)
    if cfg.selection.two_pass and method in ("datasi", "gradnorm"):
        fraction = min(1.0, math.ceil(round(est.average_data_per_epoch_ * 10, 9)) / 10)
        summary["baseline_fraction"] = fraction
        summary["baselines"] = {}
        for name in ("uniform", "margin", "confidence"):
            b = make_estimator(cfg, method=name, fixed_fraction=fraction)
            fit_on(b, splits)
            write_run(b, out / f"baseline_{name}")
            summary["baselines"][name] = summarize(b, splits, name)
    write_summary(summary, out / "summary.json")
    return summary


def coreset_budget(cfg: ExperimentConfig, m: int) -> int:
    b = cfg.coreset.budget
    return max(1, int(round(b * m))) if b <= 1.0 else int(b)


def build_coreset_run(cfg: ExperimentConfig, out, splits: Splits | None = None) -> tuple[Coreset, dict]:
    """Record GradNorm bands during a full-set run and build the coreset."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg) if splits is None else splits
    exclude = cfg.coreset.exclude_last
    selector = FrequencyCoreset(
        n_min=cfg.coreset.n_min,
        budget=coreset_budget(cfg, len(splits.train)),
        exclude_last=exclude if exclude == "best" else int(exclude),
        estimator=make_estimator(cfg, method="full"),
        random_state=cfg.train.seed,
    )
    tr = splits.train
    selector.fit(tr.features, tr.labels, eval_set=(splits.val.features, splits.val.labels), sample_ids=tr.ids)
    write_run(selector.source_, out)
    write_coreset(selector.coreset_, out / "coreset.txt")
    write_frequencies(selector.counter_, out / "frequencies.csv")
    epochs = selector.counter_.epochs_recorded
    easy, hard = easy_hard_report(selector.counter_, 1, max(1, epochs - 1))
    summary = {
        "run": "coreset_build",
        "coreset_size": len(selector.coreset_),
        "budget": selector.coreset_.budget,
        "n_min": cfg.coreset.n_min,
        "epochs_recorded": epochs,
        "epochs_counted": selector.coreset_.epochs,
        "excluded_epochs": selector.excluded_epochs_,
        "easy_count": int(easy.size),
        "hard_count": int(hard.size),
        "source": summarize(selector.source_, splits, "full"),
    }
    write_summary(summary, out / "summary.json")
    return selector.coreset_, summary


def retrain_on_coreset(
    coreset: Coreset, cfg: ExperimentConfig, splits: Splits, adjust_lr: bool = True, label: str = "coreset"
) -> tuple[SubsetSGDClassifier, dict]:
    """Fresh full-method training on the coreset samples; with ``adjust_lr``
    the base rate is scaled by ``|coreset| / |train|`` throughout."""
    if len(coreset) == 0:
        raise ValueError("coreset is empty")
    sub = splits.train.select_ids(coreset.indices)
    alpha = len(sub) / len(splits.train)
    lr = cfg.train.lr * alpha if adjust_lr else cfg.train.lr
    est = make_estimator(cfg, method="full", learning_rate=lr)
    fit_on(est, splits, sub)
    summary = summarize(est, splits, label)
    summary.update(coreset_size=len(sub), portion=alpha, lr=lr)
    return est, summary


def uniform_coreset(splits: Splits, size: int, seed: int) -> Coreset:
    rng = np.random.default_rng([seed, 7])
    ids = np.sort(rng.choice(splits.train.ids, size=size, replace=False))
    return Coreset(ids, size, 0, seed)


def tune_t_low(cfg: ExperimentConfig, splits: Splits, grid=(0.1, 0.03, 0.01)) -> tuple[float, dict]:
    """Grid search of the coreset lower threshold on validation accuracy.

    One full-set source run is shared by every candidate; each candidate's
    coreset is retrained with the usual learning-rate adjustment. Ties go to
    the earlier grid entry.
    """
    src = make_estimator(cfg, method="full", keep_tables=True)
    fit_on(src, splits)
    budget = coreset_budget(cfg, len(splits.train))
    n_min, t_up = cfg.coreset.n_min, cfg.selection.t_up
    scores = {}
    for t_low in grid:
        counter = FrequencyCounter(splits.train.ids)
        for table in src.tables_:
            counter.masks.append(threshold_mask(table.grad_norm, t_low, t_up))
        exclude = cfg.coreset.exclude_last
        exclude = (best_epoch_exclusion(counter.epochs_recorded, src.best_epoch_, n_min)
                   if exclude == "best" else int(exclude))
        coreset = build_coreset(counter, n_min, budget, cfg.train.seed, exclude)
        if len(coreset) == 0:
            scores[t_low] = float("-inf")
            continue
        est, _ = retrain_on_coreset(coreset, cfg, splits)
        scores[t_low] = est.best_val_accuracy_
    best = max(grid, key=lambda t: (scores[t], -grid.index(t)))
    return best, scores


def retrain_coreset_run(cfg: ExperimentConfig, out, coreset: Coreset | None = None, splits: Splits | None = None) -> dict:
    """Retrain on a coreset plus equal-size uniform baselines with and without
    the learning-rate adjustment."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg) if splits is None else splits
    if coreset is None:
        if not cfg.coreset.path:
            raise ConfigError("coreset.path (or --coreset) is required for retraining")
        coreset = read_coreset(cfg.coreset.path)
    est, main = retrain_on_coreset(coreset, cfg, splits)
    write_run(est, out)
    uni = uniform_coreset(splits, len(coreset), cfg.train.seed)
    baselines = {}
    for adjust in (True, False):
        label = "uniform_adjusted" if adjust else "uniform"
        b, s = retrain_on_coreset(uni, cfg, splits, adjust_lr=adjust, label=label)
        write_run(b, out / f"baseline_{label}")
        baselines[label] = s
    summary = {"run": "coreset_retrain", "coreset": main, "baselines": baselines}
    write_summary(summary, out / "summary.json")
    return summary


def value_run(cfg: ExperimentConfig, out, splits: Splits | None = None) -> dict:
    """Full-set training that dumps every epoch's valuation table."""
    cfg.save_valuations = True
    return run_training(cfg, out, method="full", splits=splits)


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationReport:
    rows: list[tuple[int, int, float, float, float]]  # epoch, sample_id, grad_norm, mu, ratio
    per_epoch_t_up: dict[int, float]
    calibrated_t_up: float | None
    share_at_calibrated: dict[int, float]
    share_at_default: dict[int, float]
    default_t_up: float
    target_share: float
    clean_share_above: dict[int, float] = field(default_factory=dict)


def _epoch_t_up(ratios_corrupt: np.ndarray, ratios_all: np.ndarray, target_share: float) -> float:
    # widest-margin cut that leaves at least target_share of corrupted ratios above it
    need = math.ceil(target_share * ratios_corrupt.size - 1e-9)
    r_need = np.sort(ratios_corrupt)[::-1][need - 1]
    below = ratios_all[ratios_all < r_need]
    return float((r_need + below.max()) / 2 if below.size else r_need / 2)


def calibrate_t_up(cfg: ExperimentConfig, splits: Splits | None = None) -> CalibrationReport:
    """GradNorm / mean-GradNorm ratios of the corrupted samples after warmup and
    the largest ``t_up`` that filters ``target_share`` of them in every epoch."""
    splits = make_splits(cfg) if splits is None else splits
    t_default = cfg.selection.t_up
    target = cfg.calibrate.target_share
    corrupted = np.asarray(splits.corrupted_ids)
    if corrupted.size == 0:
        return CalibrationReport([], {}, None, {}, {}, t_default, target)
    warm = cfg.train.warmup_epochs
    est = make_estimator(
        cfg, method="full", keep_tables=True, early_stop_patience=0,
        epochs=warm + cfg.calibrate.post_warmup_epochs,
    )
    fit_on(est, splits)
    rows, per_epoch, default_share = [], {}, {}
    ratios_by_epoch, clean_by_epoch = {}, {}
    for table in est.tables_[warm:]:
        mu = table.mean_grad_norm
        ratios = table.grad_norm / mu
        is_bad = np.isin(table.sample_ids, corrupted)
        for sid, g, r in zip(table.sample_ids[is_bad], table.grad_norm[is_bad], ratios[is_bad]):
            rows.append((table.epoch, int(sid), float(g), mu, float(r)))
        ratios_by_epoch[table.epoch] = ratios[is_bad]
        clean_by_epoch[table.epoch] = ratios[~is_bad]
        per_epoch[table.epoch] = _epoch_t_up(ratios[is_bad], ratios, target)
        default_share[table.epoch] = float(np.mean(ratios[is_bad] > t_default))
    t_up = min(per_epoch.values())
    calibrated_share = {e: float(np.mean(r > t_up)) for e, r in ratios_by_epoch.items()}
    clean_share = {e: float(np.mean(r > t_up)) for e, r in clean_by_epoch.items()}
    return CalibrationReport(
        rows, per_epoch, t_up, calibrated_share, default_share, t_default, target, clean_share
    )


def calibrate_run(cfg: ExperimentConfig, out, splits: Splits | None = None) -> CalibrationReport:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rep = calibrate_t_up(cfg, splits)
    with open(out / "calibration.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "sample_id", "grad_norm", "mean_grad_norm", "ratio"])
        for e, sid, g, mu, r in rep.rows:
            w.writerow([e, sid, fmt(g), fmt(mu), fmt(r)])
    write_summary({
        "run": "calibrate_t_up",
        "calibrated_t_up": rep.calibrated_t_up,
        "target_share": rep.target_share,
        "default_t_up": rep.default_t_up,
        "per_epoch_t_up": {str(k): v for k, v in rep.per_epoch_t_up.items()},
        "share_at_calibrated": {str(k): v for k, v in rep.share_at_calibrated.items()},
        "share_at_default": {str(k): v for k, v in rep.share_at_default.items()},
        "clean_share_above_calibrated": {str(k): v for k, v in rep.clean_share_above.items()},
    }, out / "summary.json")
    return rep


def run_experiment(cfg: ExperimentConfig, out, mode: str = "adaptive") -> dict:
    """Validate ``cfg``, echo it to ``out/config.ini`` and run one pipeline."""
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if mode == "value":
        cfg.save_valuations = True
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    if mode == "full":
        return run_training(cfg, out, method="full")
    if mode == "adaptive":
        return run_training(cfg, out)
    if mode == "coreset":
        splits = make_splits(cfg)
        coreset, built = build_coreset_run(cfg, out / "build", splits)
        retrained = retrain_coreset_run(cfg, out / "retrain", coreset, splits)
        summary = {"run": "coreset", "build": built, "retrain": retrained}
        write_summary(summary, out / "summary.json")
        return summary
    if mode == "coreset_build":
        return build_coreset_run(cfg, out)[1]
    if mode == "coreset_retrain":
        return retrain_coreset_run(cfg, out)
    if mode == "value":
        return value_run(cfg, out)
    if mode == "calibrate":
        rep = calibrate_run(cfg, out)
        return {"calibrated_t_up": rep.calibrated_t_up}
    raise ConfigError(f"unknown mode {mode!r}")
