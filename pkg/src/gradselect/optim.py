"""SGD with momentum and decoupled weight decay, multi-step schedule, early stopping."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .nn import DeltaTheta, GradVector, ModelSpec, ParamVector, loss_and_batch_grad


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    velocity: np.ndarray | None = None
    epochs_completed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        self.milestones = tuple(sorted(int(e) for e in self.milestones))

    def ensure_velocity(self, n: int) -> np.ndarray:
        if self.velocity is None:
            self.velocity = np.zeros(n)
        elif self.velocity.size != n:
            raise ValueError(f"velocity has {self.velocity.size} entries, expected {n}")
        return self.velocity

    def step_scheduler(self) -> float:
        """Mark one epoch done; decay the rate if a milestone was reached."""
        self.epochs_completed += 1
        if self.epochs_completed in self.milestones:
            self.learning_rate *= self.decay_factor
        return self.learning_rate

    def copy(self) -> "OptimState":
        return copy.deepcopy(self)


def scheduled_lr(initial_lr: float, epoch: int, milestones, decay_factor: float) -> float:
    """Closed form of the multi-step schedule after ``epoch`` completed epochs."""
    return initial_lr * decay_factor ** sum(1 for e in milestones if e <= epoch)


def sgd_step(params: ParamVector, grad: GradVector, opt: OptimState) -> tuple[ParamVector, OptimState]:
    """One in-place update: ``v = mu*v + g + wd*theta``; ``theta -= lr*v``."""
    if grad.sample_id is not None:
        raise ValueError("sgd_step expects a full-batch gradient")
    if grad.values.size != len(params):
        raise ValueError("gradient and parameters are not aligned")
    v = opt.ensure_velocity(len(params))
    v *= opt.momentum
    v += grad.values
    if opt.weight_decay:
        v += opt.weight_decay * params.values
    params.values -= opt.learning_rate * v
    return params, opt


def predict_delta_theta(params: ParamVector, spec: ModelSpec, X, y, opt: OptimState) -> DeltaTheta:
    """Update the optimizer would apply for the full-set mean gradient.

    Works on clones; ``params`` and ``opt`` are left untouched.
    """
    if np.asarray(X).shape[0] == 0:
        raise ValueError("cannot predict an update from an empty dataset")
    _, grad = loss_and_batch_grad(params, spec, X, y)
    moved, _ = sgd_step(params.copy(), grad, opt.copy())
    return DeltaTheta(moved.values - params.values, params.partition)


def train_epoch(
    params: ParamVector,
    spec: ModelSpec,
    X: np.ndarray,
    y: np.ndarray,
    opt: OptimState,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Shuffled minibatch pass over ``(X, y)``. Returns the mean batch loss."""
    m = X.shape[0]
    if m == 0:
        return float("nan")
    order = rng.permutation(m)
    losses = []
    for start in range(0, m, batch_size):
        idx = order[start:start + batch_size]
        value, grad = loss_and_batch_grad(params, spec, X[idx], y[idx])
        sgd_step(params, grad, opt)
        losses.append(value)
    return float(np.mean(losses))


@dataclass
class EarlyStopping:
    """Stop once the monitored score has not improved for ``patience`` epochs."""

    patience: int = 5
    best_score: float = -np.inf
    best_epoch: int = -1
    wait: int = field(default=0)

    def update(self, score: float, epoch: int) -> bool:
        """Record ``score``; return True if it is a new best."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience > 0 and self.wait >= self.patience
