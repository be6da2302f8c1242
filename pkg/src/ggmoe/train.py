"""Losses, AdamW, global-norm clipping and the early-stopped training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluate import score
from .model import ModelConfig, ModelInput, forward, predict
from .numerics import DomainError, Rng

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    patience: int = 16
    max_epochs: int = 1000
    clip_norm: float = 1.0
    seed: int = 0
    eval_mc_samples: int = 10

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise DomainError("patience, batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0 or not self.clip_norm > 0:
            raise DomainError("bad optimizer settings")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainReport:
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_score: float | None = None
    train_loss: list = field(default_factory=list)
    val_score: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"   # ok | diverged

    def to_dict(self):
        return asdict(self)


def loss_mse(pred, target):
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise DomainError("empty batch")
    if ad.value(pred).shape != target.shape:
        raise DomainError(f"shape mismatch {ad.value(pred).shape} vs {target.shape}")
    r = pred - target
    return ad.mean(r * r)


def loss_ce(prob, target):
    """Mean negative log probability of the target class (probabilities floored at 1e-12)."""
    target = np.asarray(target)
    n, c = ad.value(prob).shape
    if n == 0:
        raise DomainError("empty batch")
    if np.any(target < 0) or np.any(target >= c):
        raise DomainError(f"class index outside [0, {c})")
    p = ad.getitem(prob, (np.arange(n), target.astype(np.int64)))
    return -ad.mean(ad.log(ad.maximum(p, PROB_FLOOR)))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global(grads: dict, clip_norm: float) -> dict:
    if not clip_norm > 0:
        raise DomainError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def decay_mask(name: str, shape) -> np.ndarray | float:
    """1 where decoupled weight decay applies: weight matrices, minus the gate bias row."""
    if name.endswith(".b"):
        return 0.0
    if name == "gate.W":
        m = np.ones(shape)
        m[-1] = 0.0
        return m
    return 1.0


def adamw_step(params: dict, grads: dict, opt: OptimizerState, cfg: TrainConfig):
    """One AdamW update. Returns ``(new_params, opt)``; ``opt`` is updated in place."""
    opt.step += 1
    t = opt.step
    lr, wd = cfg.learning_rate, cfg.weight_decay
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    new = {}
    for k, p in params.items():
        g = grads[k]
        m, v = opt.m[k], opt.v[k]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        q = p
        if wd:
            q = p - lr * wd * decay_mask(k, p.shape) * p
        new[k] = q - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return new, opt


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch's score; returns True if it improved on the best."""
        self.epoch += 1
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def batch_loss(config: ModelConfig, params, inp: ModelInput, y, rng: Rng):
    pred, _ = forward(config, params, inp, train=True, rng=rng)
    return loss_mse(pred, y) if config.task == "regression" else loss_ce(pred, y)


def val_score(config, params, inp, y, task, rng, mc_samples=10, target_stats=None):
    pred = predict(config, params, inp, rng, mc_samples).pred
    if target_stats is not None:
        pred = pred * target_stats[1] + target_stats[0]
    return score(pred, y, task)


def fit(config: ModelConfig, params: dict, train_inp: ModelInput, y_train, val_inp: ModelInput, y_val,
        cfg: TrainConfig, *, target_stats=None, scorer=None):
    """Train with shuffled mini-batches and patience-based early stopping.

    ``target_stats = (mean, std)`` means ``y_train`` is standardized and model
    outputs are mapped back before scoring ``y_val`` (given in original units).
    ``scorer(params, epoch)`` replaces the validation score, for scripted runs.
    Returns the parameters of the best validation epoch and a ``TrainReport``.
    """
    if len(train_inp) == 0 or len(val_inp) == 0:
        raise DomainError("train and val splits must be non-empty")
    task = config.task
    rng = Rng(cfg.seed)
    opt = OptimizerState.zeros_like(params)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    best = {k: p.copy() for k, p in params.items()}
    y_train = np.asarray(y_train)
    n = len(train_inp)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.derive(1, epoch).permutation(n)
        losses = []
        diverged = False
        for step, s in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[s:s + cfg.batch_size]
            step_rng = rng.derive(2, epoch, step)
            loss, grads = ad.grad(
                lambda p: batch_loss(config, p, train_inp.take(idx), y_train[idx], step_rng), params)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                diverged = True
                break
            grads = clip_global(grads, cfg.clip_norm)
            params, opt = adamw_step(params, grads, opt, cfg)
            losses.append(loss)
        if diverged:
            log.warning("non-finite loss at epoch %d; returning best snapshot", epoch)
            report.status = "diverged"
            break
        report.train_loss.append(float(np.mean(losses)))
        if scorer is not None:
            v = float(scorer(params, epoch))
        else:
            v = val_score(config, params, val_inp, y_val, task, rng.derive(3),
                          cfg.eval_mc_samples, target_stats)
        if not math.isfinite(v):
            report.status = "diverged"
            report.val_score.append(None)
            report.epochs_run = epoch
            break
        report.val_score.append(v)
        report.epochs_run = epoch
        if stopper.update(v):
            best = {k: p.copy() for k, p in params.items()}
        if stopper.should_stop:
            break
    report.best_epoch = stopper.best_epoch
    report.best_val_score = stopper.best if stopper.best_epoch else None
    report.wall_time = time.perf_counter() - t0
    return best, report
