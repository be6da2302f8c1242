"""Seeded random search over the MLP / MoE / GG MoE hyperparameter spaces."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetBundle
from .experiment import Dims, prepare, train_model
from .model import EmbeddingConfig, ModelConfig, count_params
from .numerics import DomainError, Rng
from .train import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntUniform:
    lo: int
    hi: int
    step: int = 1

    def __post_init__(self):
        if self.lo > self.hi or self.step <= 0:
            raise DomainError(f"bad IntUniform {self}")

    @property
    def grid(self):
        return range(self.lo, self.hi + 1, self.step)

    def sample(self, rng):
        return int(self.lo + self.step * rng.integers(0, (self.hi - self.lo) // self.step + 1))

    def contains(self, x):
        return x in self.grid


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise DomainError(f"bad Uniform {self}")

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))

    def contains(self, x):
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise DomainError(f"bad LogUniform {self}")

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))

    def contains(self, x):
        # exp(log(hi)) may overshoot hi by one ulp
        return self.lo * (1 - 1e-12) <= x <= self.hi * (1 + 1e-12)


@dataclass(frozen=True)
class ZeroOr:
    """Point mass at 0 with probability 1/2, otherwise ``inner``."""
    inner: object

    def sample(self, rng):
        if rng.random() < 0.5:
            return 0.0
        return self.inner.sample(rng)

    def contains(self, x):
        return x == 0 or self.inner.contains(x)


@dataclass(frozen=True)
class SearchSpace:
    family: str
    with_embedding: bool
    dists: dict


def default_space(family: str, with_embedding: bool = False) -> SearchSpace:
    if family not in ("mlp", "moe", "ggmoe"):
        raise DomainError(f"unknown family {family!r}")
    d = {"n_blocks": IntUniform(1, 5 if with_embedding else 6, 1),
         "dropout": ZeroOr(Uniform(0.0, 0.5)),
         "weight_decay": ZeroOr(LogUniform(1e-4, 0.1))}
    if family == "mlp":
        d["d_block"] = IntUniform(64, 1024, 16)
        # plain uniform for the MLP learning rate, log-uniform for MoE families
        d["learning_rate"] = Uniform(3e-5, 1e-3)
    else:
        d["d_block"] = IntUniform(128, 1280, 64)
        d["d_block_per_expert"] = IntUniform(32, 64, 32)
        d["learning_rate"] = LogUniform(3e-4, 1e-2)
    if family == "ggmoe":
        d["tau"] = Uniform(0.5, 3.0)
    if with_embedding:
        d["d_embedding"] = IntUniform(8, 32, 4)
        d["n_bins"] = IntUniform(2, 128, 1)
    return SearchSpace(family, with_embedding, d)



# Epoch cap used together with ``desk_space`` so a budget-20 search fits a laptop core.
DESK_MAX_EPOCHS = 100


def desk_space(family: str, with_embedding: bool = False) -> SearchSpace:
    """Narrowed space for small synthetic data: at most 3 blocks and narrower widths.

    Every other distribution is unchanged from :func:`default_space`.
    """
    sp = default_space(family, with_embedding)
    d = dict(sp.dists)
    d["n_blocks"] = IntUniform(1, 3, 1)
    d["d_block"] = IntUniform(64, 256, 16) if family == "mlp" else IntUniform(128, 512, 64)
    return SearchSpace(family, with_embedding, d)

@dataclass(frozen=True)
class TrialSpec:
    family: str
    with_embedding: bool
    values: dict

    def model_config(self, dims: Dims) -> ModelConfig:
        v = self.values
        emb = EmbeddingConfig(v["d_embedding"], v["n_bins"]) if self.with_embedding else None
        return ModelConfig(family=self.family, n_blocks=v["n_blocks"], d_block=v["d_block"],
                           input_dim=dims.input_dim, n_out=dims.n_out, task=dims.task,
                           dropout=v["dropout"], d_block_per_expert=v.get("d_block_per_expert"),
                           tau=v.get("tau"), embedding=emb, n_numeric=dims.n_numeric)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(learning_rate=self.values["learning_rate"],
                           weight_decay=self.values["weight_decay"], seed=seed, **overrides)

    @property
    def n_bins(self):
        return self.values["n_bins"] if self.with_embedding else None

    def to_dict(self):
        return {"family": self.family, "with_embedding": self.with_embedding,
                "values": dict(sorted(self.values.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], d["with_embedding"], dict(d["values"]))


@dataclass
class TrialResult:
    index: int
    spec: TrialSpec
    seed: int
    score: float | None = None
    status: str = "ok"        # ok | diverged | failed
    n_params: int | None = None
    epochs: int | None = None
    wall_time: float = 0.0
    error: str | None = None

    def log_record(self) -> dict:
        """Deterministic part of the result (wall time goes to a separate file)."""
        return {"trial": self.index, "spec": self.spec.to_dict(), "seed": self.seed,
                "score": self.score, "status": self.status, "n_params": self.n_params,
                "epochs": self.epochs, "error": self.error}


@dataclass
class SearchResult:
    best: TrialResult | None
    results: list = field(default_factory=list)


def sample(space: SearchSpace, rng: Rng) -> TrialSpec:
    # fixed key order keeps the draw sequence independent of dict construction
    values = {k: space.dists[k].sample(rng) for k in sorted(space.dists)}
    return TrialSpec(space.family, space.with_embedding, values)


def in_space(space: SearchSpace, spec: TrialSpec) -> bool:
    return (set(spec.values) == set(space.dists)
            and all(space.dists[k].contains(v) for k, v in spec.values.items()))


def plan(space: SearchSpace, budget: int, seed: int):
    """The reproducible ``(spec, trial_seed)`` sequence for a search."""
    rng = Rng(seed, 0x7e57)
    out = []
    for i in range(budget):
        out.append((sample(space, rng.derive(0, i)), int(rng.derive(1, i).integers(0, 2 ** 31 - 1))))
    return out


_PREP_CACHE: dict = {}


def _prepared(bundle, n_bins):
    key = (id(bundle), n_bins)
    if key not in _PREP_CACHE:
        if len(_PREP_CACHE) > 64:
            _PREP_CACHE.clear()
        _PREP_CACHE[key] = (bundle, prepare(bundle, n_bins))
    return _PREP_CACHE[key][1]


def run_trial(bundle: DatasetBundle, index: int, spec: TrialSpec, seed: int,
              train_overrides: dict | None = None, scorer=None) -> TrialResult:
    res = TrialResult(index, spec, seed)
    t0 = time.perf_counter()
    try:
        prep = _prepared(bundle, spec.n_bins)
        config = spec.model_config(prep.dims)
        res.n_params = count_params(config)
        if scorer is not None:
            res.score = float(scorer(spec))
        else:
            _, report = train_model(prep, config, spec.train_config(seed, **(train_overrides or {})))
            res.score = report.best_val_score
            res.epochs = report.epochs_run
            if report.status != "ok":
                res.status = report.status
        if res.score is None or not math.isfinite(res.score):
            res.status, res.score = "failed", None
    except (ArithmeticError, ValueError) as e:
        log.warning("trial %d failed: %s", index, e)
        res.status, res.score, res.error = "failed", None, str(e)
    res.wall_time = time.perf_counter() - t0
    return res


def _run_trial_star(args):
    return run_trial(*args)


def _read_log(path: Path) -> dict:
    done = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["trial"]] = rec
    return done


def run_search(bundle: DatasetBundle, family: str, with_embedding: bool = False, budget: int = 100,
               seed: int = 0, *, train_overrides: dict | None = None, scorer=None, workers: int = 1,
               log_path=None, resume: bool = False, space: SearchSpace | None = None) -> SearchResult:
    """Sample ``budget`` trials, fit each on train, score on val; best = highest val score.

    Ties go to the earliest trial. Failed trials are kept in the results but
    never chosen while any trial succeeded. With ``log_path`` every result is
    written as one JSON line in trial order; ``resume`` replays matching records
    from an existing log instead of rerunning them.
    """
    if budget < 1:
        raise DomainError("budget must be >= 1")
    space = space or default_space(family, with_embedding)
    trials = plan(space, budget, seed)
    replay = _read_log(Path(log_path)) if (log_path and resume) else {}
    results: list = [None] * budget
    todo = []
    for i, (spec, tseed) in enumerate(trials):
        rec = replay.get(i)
        if rec is not None and rec["spec"] == spec.to_dict() and rec["seed"] == tseed:
            results[i] = TrialResult(i, spec, tseed, rec["score"], rec["status"], rec["n_params"],
                                     rec["epochs"], 0.0, rec.get("error"))
        else:
            todo.append((bundle, i, spec, tseed, train_overrides, scorer))
    if workers > 1 and len(todo) > 1 and scorer is None:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for r in ex.map(_run_trial_star, todo):
                results[r.index] = r
    else:
        for args in todo:
            r = run_trial(*args)
            results[r.index] = r
            log.info("trial %d: score=%s status=%s", r.index, r.score, r.status)
    if log_path:
        write_trial_log(log_path, results)
    ok = [r for r in results if r.status != "failed" and r.score is not None]
    best = None
    for r in ok:
        if best is None or r.score > best.score:
            best = r
    return SearchResult(best, results)


def write_trial_log(path, results):
    path = Path(path)
    lines = "".join(json.dumps(r.log_record(), sort_keys=True) + "\n" for r in results)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(lines)
    tmp.replace(path)
    timings = "".join(json.dumps({"trial": r.index, "wall_time": r.wall_time}) + "\n" for r in results)
    tpath = path.with_name(path.stem + ".timing.jsonl")
    tpath.write_text(timings)


def tune_and_test(bundle: DatasetBundle, family: str, with_embedding: bool = False, *,
                  budget: int = 20, seed: int = 0, space: SearchSpace | None = None,
                  train_overrides: dict | None = None, mc_samples: int = 10):
    """Search, refit the winning spec with its trial seed and score it on test.

    Returns ``(search_result, test_score)``; the refit reproduces the winning
    trial exactly because training is a pure function of (spec, seed, data).
    """
    from .experiment import score_split
    res = run_search(bundle, family, with_embedding, budget, seed, space=space,
                     train_overrides=train_overrides)
    if res.best is None:
        raise ArithmeticError(f"all {budget} trials failed for {family}")
    best = res.best
    prep = _prepared(bundle, best.spec.n_bins)
    config = best.spec.model_config(prep.dims)
    params, _ = train_model(prep, config, best.spec.train_config(best.seed, **(train_overrides or {})))
    return res, score_split(prep, config, params, "test", mc_samples=mc_samples, seed=best.seed)
