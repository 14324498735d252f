"""scikit-learn style estimators built on the valuation and selection rules."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import selection as sel
from .coreset import Coreset, FrequencyCounter, build_coreset, record_epoch
from .nn import ModelSpec, forward, init_params, softmax
from .optim import EarlyStopping, OptimState, predict_delta_theta, train_epoch
from .valuation import APPROX, EXACT, build_valuation_table

logger = logging.getLogger(__name__)


def balanced_accuracy(y_true, y_pred) -> float:
    """Unweighted mean of per-class recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    balanced_accuracy: float
    selected_fraction: float
    cumulative_data_used: float
    lr: float


class SubsetSGDClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained with per-epoch adaptive subset selection.

    Every epoch (after ``warmup_epochs`` full-set epochs) the training set is
    scored, a subset is chosen by ``method``, the learning rate is scaled by
    the selected portion for that epoch, then restored before the
    multi-step schedule advances.

    Parameters
    ----------
    method : {'full', 'datasi', 'gradnorm', 'uniform', 'margin', 'confidence'}
    hidden_dims : tuple of int, default=(64,)
    activation : {'relu', 'tanh'}
    epochs, learning_rate, momentum, weight_decay, milestones, decay_factor
        SGD and schedule settings.
    batch_size : int, default=32
    early_stop_patience : int, default=5
        0 disables early stopping. The best-validation parameters are kept.
    warmup_epochs : int, default=2
    k, tau : Data SI clustering settings.
    t_low, t_up : GradNorm band, as multiples of the mean GradNorm.
    fixed_fraction : float
        Portion kept by the baseline selectors.
    approx : bool
        Score from output-layer gradients only.
    adjust_lr : bool
        Scale the learning rate by the selected portion.
    record_gradnorm : bool
        Record the GradNorm band membership of every sample every epoch in
        ``counter_`` (used for coresets).
    keep_tables : bool
        Keep every epoch's ValuationTable in ``tables_``.
    n_classes : int or None
        Fix the number of classes; labels must then be in ``[0, n_classes)``.
    random_state : int
        Seeds initialisation, shuffling and the randomised selectors.

    Attributes
    ----------
    history_ : list of EpochMetrics
    trace_ : list of SelectionOutcome
    counter_ : FrequencyCounter or None
    best_epoch_ : int
    """

    def __init__(
        self,
        method="full",
        hidden_dims=(64,),
        activation="relu",
        epochs=32,
        learning_rate=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        milestones=(16, 24),
        decay_factor=0.1,
        batch_size=32,
        early_stop_patience=5,
        warmup_epochs=2,
        k=10,
        tau=0.5,
        t_low=0.1,
        t_up=40.0,
        fixed_fraction=1.0,
        approx=False,
        beta=1.0,
        adjust_lr=True,
        record_gradnorm=False,
        keep_tables=False,
        n_classes=None,
        random_state=0,
    ):
        self.method = method
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.milestones = milestones
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.early_stop_patience = early_stop_patience
        self.warmup_epochs = warmup_epochs
        self.k = k
        self.tau = tau
        self.t_low = t_low
        self.t_up = t_up
        self.fixed_fraction = fixed_fraction
        self.approx = approx
        self.beta = beta
        self.adjust_lr = adjust_lr
        self.record_gradnorm = record_gradnorm
        self.keep_tables = keep_tables
        self.n_classes = n_classes
        self.random_state = random_state

    def _selection_config(self) -> sel.SelectionConfig:
        return sel.SelectionConfig(
            method=self.method, k=self.k, tau=self.tau, t_low=self.t_low, t_up=self.t_up,
            fixed_fraction=self.fixed_fraction, approx=self.approx, adjust_lr=self.adjust_lr,
            beta=self.beta, seed=self.random_state,
        )

    def _encode(self, y):
        if self.n_classes is None:
            self.classes_, y_enc = np.unique(y, return_inverse=True)
            return y_enc.astype(np.int64)
        y = np.asarray(y).astype(np.int64)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        self.classes_ = np.arange(self.n_classes)
        return y

    def fit(self, X, y, eval_set=None, sample_ids=None):
        """Train on ``(X, y)``.

        ``eval_set=(X_val, y_val)`` drives early stopping and the reported
        validation metrics; without it the training set is monitored.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = self._selection_config()
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs and batch_size must be >= 1, warmup_epochs >= 0")
        y = self._encode(y)
        if eval_set is None:
            X_val, y_val = X, y
        else:
            X_val = check_array(eval_set[0], dtype=np.float64)
            y_val = np.searchsorted(self.classes_, np.asarray(eval_set[1]))
        m = X.shape[0]
        ids = np.arange(m) if sample_ids is None else np.asarray(sample_ids)

        spec = ModelSpec(X.shape[1], tuple(self.hidden_dims), len(self.classes_), self.activation, self.random_state)
        params = init_params(spec)
        opt = OptimState(
            self.learning_rate, self.momentum, self.weight_decay, tuple(self.milestones), self.decay_factor
        )
        stopper = EarlyStopping(self.early_stop_patience)
        rng = np.random.default_rng([self.random_state, 1])
        mode = APPROX if self.approx else EXACT

        self.spec_ = spec
        self.history_, self.trace_, self.tables_ = [], [], []
        self.counter_ = FrequencyCounter.zeros(m, ids) if self.record_gradnorm else None
        best = params.copy()
        used = 0.0

        for epoch in range(self.epochs):
            active = epoch >= self.warmup_epochs and cfg.method != sel.FULL
            table = None
            if self.record_gradnorm or self.keep_tables or (active and cfg.method in (sel.DATA_SI, sel.GRADNORM)):
                delta = None
                if mode == EXACT and (cfg.method == sel.DATA_SI or self.keep_tables):
                    delta = predict_delta_theta(params, spec, X, y, opt)
                table = build_valuation_table(params, spec, X, y, delta, mode, self.beta, ids, epoch)
                if self.record_gradnorm:
                    record_epoch(self.counter_, table, self.t_low, self.t_up)
                if self.keep_tables:
                    self.tables_.append(table)

            lr = opt.learning_rate
            if not active:
                outcome = sel.full_outcome(m, lr, epoch, cfg.method)
            elif cfg.method == sel.DATA_SI:
                outcome = sel.select_data_si(table, cfg, lr, epoch)
            elif cfg.method == sel.GRADNORM:
                outcome = sel.select_gradnorm(table, cfg, lr, epoch)
            else:
                proba = softmax(forward(params, spec, X))
                outcome = sel.select_baseline(proba, cfg, lr, epoch)

            opt.learning_rate = outcome.lr_used
            train_loss = train_epoch(
                params, spec, X[outcome.mask], y[outcome.mask], opt, self.batch_size, rng
            )
            opt.learning_rate = outcome.lr_restored
            opt.step_scheduler()

            pred = forward(params, spec, X_val).argmax(axis=1)
            val_acc = float(np.mean(pred == y_val))
            used += outcome.selected_fraction
            self.history_.append(EpochMetrics(
                epoch, train_loss, val_acc, balanced_accuracy(y_val, pred),
                outcome.selected_fraction, used, outcome.lr_used,
            ))
            self.trace_.append(outcome)
            if stopper.update(val_acc, epoch):
                best = params.copy()
            if stopper.should_stop:
                logger.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
                break

        self.params_ = best
        self.best_epoch_ = stopper.best_epoch
        self.best_val_accuracy_ = stopper.best_score
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def epochs_run_(self) -> int:
        return len(self.history_)

    @property
    def total_data_used_(self) -> float:
        """Cumulative data used, in multiples of the training set (Tot)."""
        return self.history_[-1].cumulative_data_used

    @property
    def average_data_per_epoch_(self) -> float:
        """Tot / epochs run (A/E)."""
        return self.total_data_used_ / self.epochs_run_

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return forward(self.params_, self.spec_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


def best_epoch_exclusion(epochs_recorded: int, best_epoch: int, n_min: int) -> int:
    """Trailing epochs to drop so counting stops at the best-validation epoch.

    Recordings are taken at the start of each epoch, so epochs up to and
    including ``best_epoch`` are kept, but never fewer than ``n_min``.
    """
    exclude = epochs_recorded - (best_epoch + 1)
    return max(0, min(exclude, epochs_recorded - n_min))


class FrequencyCoreset(TransformerMixin, BaseEstimator):
    """Offline coreset: train a source model on the full set while recording
    GradNorm band membership, keep samples counted in at least
    ``n_min`` epochs, and subsample to ``budget``.

    Parameters
    ----------
    n_min : int, default=4
    budget : float or int, default=0.3
        A float in (0, 1] is a fraction of the training set.
    exclude_last : 'best' or int, default='best'
        Trailing epochs left out of the counts. ``'best'`` drops the epochs
        after the best-validation epoch while keeping at least ``n_min``.
    estimator : SubsetSGDClassifier or None
        Source model settings; its method is forced to ``'full'``.
    random_state : int, default=0
    """

    def __init__(self, n_min=4, budget=0.3, exclude_last="best", estimator=None, random_state=0):
        self.n_min = n_min
        self.budget = budget
        self.exclude_last = exclude_last
        self.estimator = estimator
        self.random_state = random_state

    def _budget(self, m: int) -> int:
        if isinstance(self.budget, float) and self.budget <= 1.0:
            return max(1, int(round(self.budget * m)))
        return int(self.budget)

    def fit(self, X, y, eval_set=None, sample_ids=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        src = SubsetSGDClassifier() if self.estimator is None else self.estimator
        src = src.__class__(**{**src.get_params(), "method": "full", "record_gradnorm": True})
        src.fit(X, y, eval_set=eval_set, sample_ids=sample_ids)
        counter = src.counter_
        if self.exclude_last == "best":
            exclude = best_epoch_exclusion(counter.epochs_recorded, src.best_epoch_, self.n_min)
        else:
            exclude = int(self.exclude_last)
        self.source_ = src
        self.counter_ = counter
        self.excluded_epochs_ = exclude
        self.coreset_: Coreset = build_coreset(
            counter, self.n_min, self._budget(X.shape[0]), self.random_state, exclude
        )
        ids = counter.sample_ids
        self.support_ = np.isin(ids, self.coreset_.indices)
        self.indices_ = np.flatnonzero(self.support_)
        self.n_features_in_ = X.shape[1]
        return self

    def get_support(self, indices=False):
        check_is_fitted(self, "support_")
        return self.indices_ if indices else self.support_

    def transform(self, X):
        """Rows of the training matrix that belong to the coreset."""
        check_is_fitted(self, "support_")
        X = check_array(X)
        if X.shape[0] != self.support_.size:
            raise ValueError("transform expects the matrix the coreset was fitted on")
        return X[self.support_]
