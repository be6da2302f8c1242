"""Metrics, seed aggregation, significance-aware ranking and timing."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import DomainError

log = logging.getLogger(__name__)

N_SEEDS = 15
N_TIMING_REPEATS = 15


def score(pred, target, task: str) -> float:
    """Accuracy (argmax of class probabilities) or negative RMSE; higher is better."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if target.size == 0:
        raise DomainError("empty input")
    if task == "regression":
        if pred.shape != target.shape:
            raise DomainError(f"shape mismatch {pred.shape} vs {target.shape}")
        return -math.sqrt(float(np.mean((pred - target) ** 2)))
    if pred.ndim != 2 or pred.shape[0] != target.shape[0]:
        raise DomainError(f"expected [n, C] probabilities, got {pred.shape}")
    return float(np.mean(np.argmax(pred, axis=1) == target))


@dataclass
class ScoreSummary:
    model_id: str
    scores: list
    mean: float = 0.0
    std: float = 0.0
    failed_seeds: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, model_id, scores, failed_seeds=(), ddof: int = 0) -> "ScoreSummary":
        a = np.asarray(scores, dtype=np.float64)
        if a.size == 0:
            return cls(model_id, [], math.nan, math.nan, list(failed_seeds))
        std = float(a.std(ddof=ddof)) if a.size > ddof else 0.0
        return cls(model_id, [float(s) for s in a], float(a.mean()), std, list(failed_seeds))

    def to_dict(self):
        return {"model_id": self.model_id, "scores": self.scores, "mean": self.mean,
                "std": self.std, "failed_seeds": self.failed_seeds}

    @classmethod
    def from_dict(cls, d):
        return cls(d["model_id"], list(d["scores"]), d["mean"], d["std"], list(d.get("failed_seeds", [])))


@dataclass
class RankTable:
    entries: list  # [(model_id, rank, mean, std)] in descending-mean order

    def ranks(self) -> dict:
        return {m: r for m, r, _, _ in self.entries}

    def to_dict(self):
        return {"ranks": [{"model_id": m, "rank": r, "mean": mu, "std": sd}
                          for m, r, mu, sd in self.entries]}

    def to_text(self) -> str:
        w = max([len("model")] + [len(m) for m, *_ in self.entries])
        lines = [f"{'rank':>4}  {'model':<{w}}  {'mean':>12}  {'std':>12}"]
        for m, r, mu, sd in self.entries:
            lines.append(f"{r:>4}  {m:<{w}}  {mu:>12.6f}  {sd:>12.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "rank", "mean", "std"])
        for m, r, mu, sd in self.entries:
            w.writerow([m, r, repr(mu), repr(sd)])
        return buf.getvalue()


def rank_models(summaries) -> RankTable:
    """Give every unranked model within one std of the current leader the leader's rank.

    Models are sorted by mean (descending, ties by model id). The first
    unranked model i takes the current rank together with every unranked model
    whose mean is >= mean_i - std_i; then the rank increments.
    """
    if not summaries:
        raise DomainError("need at least one summary")
    order = sorted(summaries, key=lambda s: (-s.mean, s.model_id))
    rank = {}
    current = 1
    for lead in order:
        if lead.model_id in rank:
            continue
        bar = lead.mean - lead.std
        for s in order:
            if s.model_id not in rank and s.mean >= bar:
                rank[s.model_id] = current
        current += 1
    return RankTable([(s.model_id, rank[s.model_id], s.mean, s.std) for s in order])


def aggregate_seeds(run_fn, n_seeds: int = N_SEEDS, base_seed: int = 0, model_id: str = "model",
                    ddof: int = 0) -> ScoreSummary:
    """Run ``run_fn(seed) -> score`` for seeds base..base+n-1; failing seeds are excluded."""
    if n_seeds < 1:
        raise DomainError("n_seeds must be >= 1")
    scores, failed = [], []
    for seed in range(base_seed, base_seed + n_seeds):
        try:
            s = float(run_fn(seed))
        except (ArithmeticError, ValueError, FloatingPointError) as e:
            log.warning("seed %d failed: %s", seed, e)
            failed.append(seed)
            continue
        if not math.isfinite(s):
            failed.append(seed)
            continue
        scores.append(s)
    if failed:
        log.warning("%s: %d of %d seeds failed", model_id, len(failed), n_seeds)
    return ScoreSummary.from_scores(model_id, scores, failed, ddof)


@dataclass
class Timing:
    phase: str
    times_ms: list

    @property
    def mean_ms(self):
        return float(np.mean(self.times_ms))

    @property
    def std_ms(self):
        return float(np.std(self.times_ms))

    def to_dict(self):
        return {"phase": self.phase, "mean_ms": self.mean_ms, "std_ms": self.std_ms,
                "repeats": len(self.times_ms), "times_ms": self.times_ms}


def time_run(phase: str, fn, repeats: int | None = None) -> Timing:
    """Wall time of ``fn()`` in ms; inference is repeated 15 times by default, training once."""
    if phase not in ("train", "inference"):
        raise DomainError(f"unknown phase {phase!r}")
    if repeats is None:
        repeats = N_TIMING_REPEATS if phase == "inference" else 1
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return Timing(phase, times)


def dumps(obj) -> str:
    """Deterministic JSON (sorted keys, full float precision)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
