"""Command-line front end: data -> preprocess -> tune -> train -> evaluate -> rank.

Settings come from, in increasing priority: ``RunConfig`` defaults, a JSON
file given with ``--config`` (keys are the RunConfig field names), and
command-line flags. Every command writes ``run-<command>.json`` with the
effective settings into the output directory.

Layout of an output directory::

    tune/<key>/trials.jsonl   one record per trial (deterministic)
    tune/<key>/best.json      winning TrialSpec + its seed
    models/<key>/seed<s>.ckpt checkpoints written by ``train``
    summaries.json            per-model test scores over seeds
    ranks.{json,txt,csv}      significance-aware ranking
    timings.{json,txt}        wall-clock measurements (not deterministic)

Exit codes: 0 success, 2 input/validation error, 3 missing artifact,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import MissingValueError, SchemaError
from .evaluate import (RankTable, ScoreSummary, Timing, aggregate_seeds, dumps, rank_models, score,
                       time_run)
from .experiment import predict_split, prepare, score_split, train_model
from .model import FAMILIES, count_params, load_checkpoint, save_checkpoint
from .numerics import DomainError
from .tune import DESK_MAX_EPOCHS, TrialSpec, default_space, desk_space, run_search

log = logging.getLogger("ggmoe")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("tune", "train", "evaluate", "benchmark", "rank", "count-params", "time", "synth")
DISPLAY = {"mlp": "MLP", "moe": "MoE", "ggmoe": "GGMoE"}


class MissingArtifact(Exception):
    pass


class NumericFailure(Exception):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    families: list = field(default_factory=lambda: list(FAMILIES))
    embedding: bool = False
    mode: str = "benchmark"
    n_seeds: int = 15
    base_seed: int = 0
    budget: int = 100
    mc_samples: int = 10
    mc_sweep: list = field(default_factory=list)   # extra GG MoE sample counts to score and time
    out: str = "runs"
    workers: int = 1
    space: str = "default"                         # default | desk
    max_epochs: int | None = None                  # None keeps the trainer default
    # synthetic dataset generation (``synth`` command only)
    synth_kind: str = "linear-regression"
    synth_n: int = 5000
    synth_features: int = 8
    synth_noise: float = 0.1
    synth_separation: float = 4.0

    def validate(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad or not self.families:
            raise DomainError(f"unknown families {bad}; choose from {list(FAMILIES)}")
        if self.mc_samples < 1 or any(int(m) < 1 for m in self.mc_sweep):
            raise DomainError("mc_samples must be >= 1")
        if self.n_seeds < 1 or self.budget < 1 or self.workers < 1:
            raise DomainError("n_seeds, budget and workers must be >= 1")
        if self.space not in ("default", "desk"):
            raise DomainError(f"unknown space {self.space!r}")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise DomainError("max_epochs must be >= 1")
        if self.mode not in ("rank", "synth"):
            if self.manifest is None:
                raise DomainError("a dataset manifest is required (--manifest)")
            if not Path(self.manifest).is_file():
                raise DomainError(f"manifest {self.manifest} does not exist")
        return self

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DomainError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise DomainError("config file must hold a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise DomainError(f"unknown config field(s) {unknown}")
        return cls(**doc)

    @property
    def train_overrides(self) -> dict:
        return {} if self.max_epochs is None else {"max_epochs": self.max_epochs}


# -- helpers ------------------------------------------------------------------

def write_atomic(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def model_key(family: str, embedding: bool) -> str:
    return family + ("-emb" if embedding else "")


def model_id(family: str, embedding: bool, mc: int | None = None) -> str:
    name = ("E+" if embedding else "") + DISPLAY[family]
    return name if mc is None else f"{name}[mc={mc}]"


def _load_bundle(rc: RunConfig):
    return data_mod.load(rc.manifest)


def _best_path(rc: RunConfig, family: str) -> Path:
    return Path(rc.out) / "tune" / model_key(family, rc.embedding) / "best.json"


def load_best(rc: RunConfig, family: str):
    path = _best_path(rc, family)
    if not path.is_file():
        raise MissingArtifact(f"no tuned config for family {family!r} "
                              f"({'with' if rc.embedding else 'without'} embedding): {path} missing; "
                              "run `tune` first")
    doc = json.loads(path.read_text())
    return TrialSpec.from_dict(doc["spec"])


def _seeds(rc: RunConfig):
    return range(rc.base_seed, rc.base_seed + rc.n_seeds)


def _mc_values(rc: RunConfig, family: str):
    if family != "ggmoe":
        return [None]
    return [rc.mc_samples] + sorted({int(m) for m in rc.mc_sweep} - {rc.mc_samples})


def _fit_spec(prep, spec: TrialSpec, seed: int, rc: RunConfig):
    config = spec.model_config(prep.dims)
    params, report = train_model(prep, config, spec.train_config(seed, **rc.train_overrides))
    if report.best_val_score is None or not np.isfinite(report.best_val_score):
        raise NumericFailure(f"{config.name} seed {seed}: training produced no finite validation score")
    return config, params, report


def timing_table(timings: dict) -> str:
    rows = [("model", "phase", "median_ms", "mean_ms", "std_ms", "n")]
    for mid in sorted(timings):
        for phase in sorted(timings[mid]):
            t = timings[mid][phase]
            a = np.asarray(t["times_ms"])
            rows.append((mid, phase, f"{np.median(a):.3f}", f"{a.mean():.3f}", f"{a.std():.3f}", str(a.size)))
    return _table(rows)


def _table(rows) -> str:
    w = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        out.append("  ".join(c.ljust(w[i]) if i == 0 else c.rjust(w[i]) for i, c in enumerate(r)))
    return "\n".join(out) + "\n"


def write_ranks(out: Path, table: RankTable):
    write_atomic(out / "ranks.json", dumps(table.to_dict()))
    write_atomic(out / "ranks.txt", table.to_text())
    write_atomic(out / "ranks.csv", table.to_csv())


# -- commands -----------------------------------------------------------------

def cmd_synth(rc: RunConfig):
    bundle = data_mod.synth(rc.synth_kind, rc.synth_n, rc.synth_features, rc.synth_noise,
                            seed=rc.base_seed, separation=rc.synth_separation)
    path = data_mod.save(bundle, rc.out)
    print(path)


def cmd_tune(rc: RunConfig):
    bundle = _load_bundle(rc)
    out = Path(rc.out)
    failed_all = []
    for fam in rc.families:
        key = model_key(fam, rc.embedding)
        space = (desk_space if rc.space == "desk" else default_space)(fam, rc.embedding)
        log_path = out / "tune" / key / "trials.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        res = run_search(bundle, fam, rc.embedding, rc.budget, rc.base_seed, space=space,
                         train_overrides=rc.train_overrides, workers=rc.workers, log_path=log_path)
        if res.best is None:
            failed_all.append(fam)
            continue
        best = {"spec": res.best.spec.to_dict(), "seed": res.best.seed, "trial": res.best.index,
                "val_score": res.best.score, "n_params": res.best.n_params}
        write_atomic(out / "tune" / key / "best.json", dumps(best))
        print(f"{model_id(fam, rc.embedding)}: best trial {res.best.index} val={res.best.score:.6f}")
    if failed_all:
        raise NumericFailure(f"all trials failed for {failed_all}; trial logs kept under {out / 'tune'}")


def cmd_train(rc: RunConfig):
    bundle = _load_bundle(rc)
    specs = {fam: load_best(rc, fam) for fam in rc.families}
    for fam, spec in specs.items():
        prep = prepare(bundle, spec.n_bins)
        d = Path(rc.out) / "models" / model_key(fam, rc.embedding)
        d.mkdir(parents=True, exist_ok=True)
        for seed in _seeds(rc):
            config, params, report = _fit_spec(prep, spec, seed, rc)
            save_checkpoint(d / f"seed{seed}.ckpt", config, params, seed,
                            extra={"spec": spec.to_dict(), "max_epochs": rc.max_epochs})
            rec = {"seed": seed, "epochs_run": report.epochs_run, "best_epoch": report.best_epoch,
                   "best_val_score": report.best_val_score, "status": report.status}
            write_atomic(d / f"seed{seed}.json", dumps(rec))
            print(f"{config.name} seed {seed}: val={report.best_val_score:.6f} epochs={report.epochs_run}")


def cmd_evaluate(rc: RunConfig):
    bundle = _load_bundle(rc)
    preps = {}
    summaries = []
    for fam in rc.families:
        d = Path(rc.out) / "models" / model_key(fam, rc.embedding)
        for mc in _mc_values(rc, fam):
            def run(seed, d=d, mc=mc):
                path = d / f"seed{seed}.ckpt"
                if not path.is_file():
                    raise MissingArtifact(f"no checkpoint for family {fam!r} seed {seed}: {path}; run `train` first")
                config, params, _ = load_checkpoint(path)
                nb = config.embedding.n_bins if config.embedding else None
                if nb not in preps:
                    preps[nb] = prepare(bundle, nb)
                return score_split(preps[nb], config, params, "test", mc or 1, seed)
            summaries.append(_aggregate(run, rc, model_id(fam, rc.embedding, None if mc == rc.mc_samples else mc)))
    _finish_summaries(rc, summaries)


def _aggregate(run, rc, mid) -> ScoreSummary:
    s = aggregate_seeds(run, rc.n_seeds, rc.base_seed, mid)
    if not s.scores:
        raise NumericFailure(f"{mid}: every seed failed")
    return s


def _finish_summaries(rc, summaries):
    out = Path(rc.out)
    write_atomic(out / "summaries.json", dumps({"summaries": [s.to_dict() for s in summaries]}))
    table = rank_models(summaries)
    write_ranks(out, table)
    sys.stdout.write(table.to_text())


def cmd_benchmark(rc: RunConfig):
    bundle = _load_bundle(rc)
    specs = {fam: load_best(rc, fam) for fam in rc.families}
    summaries, timings = [], {}
    for fam, spec in specs.items():
        prep = prepare(bundle, spec.n_bins)
        mcs = _mc_values(rc, fam)
        scores = {mc: [] for mc in mcs}
        failed = []
        t_train, t_inf = [], {mc: [] for mc in mcs}
        for seed in _seeds(rc):
            try:
                holder = {}
                t_train.append(time_run("train", lambda: holder.update(
                    fit=_fit_spec(prep, spec, seed, rc))).times_ms[0])
                config, params, _ = holder["fit"]
                for mc in mcs:
                    pred = {}
                    t = time_run("inference", lambda: pred.update(
                        p=predict_split(prep, config, params, "test", mc or 1, seed)), repeats=1)
                    t_inf[mc].append(t.times_ms[0])
                    scores[mc].append(score(pred["p"], prep.y_test, prep.dims.task))
            except (NumericFailure, ArithmeticError, FloatingPointError) as e:
                log.warning("%s seed %d failed: %s", fam, seed, e)
                failed.append(seed)
        for mc in mcs:
            mid = model_id(fam, rc.embedding, None if mc == rc.mc_samples else mc)
            if not scores[mc]:
                raise NumericFailure(f"{mid}: every seed failed")
            summaries.append(ScoreSummary.from_scores(mid, scores[mc], failed))
            timings[mid] = {"inference": Timing("inference", t_inf[mc]).to_dict()}
            if mc == mcs[0]:
                timings[mid]["train"] = Timing("train", t_train).to_dict()
    out = Path(rc.out)
    write_atomic(out / "timings.json", dumps(timings))
    write_atomic(out / "timings.txt", timing_table(timings))
    _finish_summaries(rc, summaries)


def cmd_rank(rc: RunConfig, summaries_path=None):
    path = Path(summaries_path) if summaries_path else Path(rc.out) / "summaries.json"
    if not path.is_file():
        raise MissingArtifact(f"no summaries file at {path}; run `evaluate` or `benchmark` first")
    try:
        doc = json.loads(path.read_text())
        summaries = [ScoreSummary.from_dict(d) for d in doc["summaries"]]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DomainError(f"malformed summaries file {path}: {e}") from e
    table = rank_models(summaries)
    write_ranks(Path(rc.out), table)
    sys.stdout.write(table.to_text())


def cmd_count_params(rc: RunConfig):
    """Parameter counts of tuned configs.

    Every ``tune/<key>/best.json`` below ``--out`` counts, so pointing ``--out``
    at a directory of per-dataset runs gives median/mean/std across datasets.
    """
    bundle = _load_bundle(rc)
    root = Path(rc.out)
    rows = [("model", "median", "mean", "std", "n")]
    result = {}
    for fam in rc.families:
        key = model_key(fam, rc.embedding)
        files = sorted(root.rglob(f"tune/{key}/best.json"))
        if not files:
            raise MissingArtifact(f"no tuned config for family {fam!r} under {root}")
        counts = []
        for f in files:
            spec = TrialSpec.from_dict(json.loads(f.read_text())["spec"])
            prep = prepare(bundle, spec.n_bins)
            counts.append(count_params(spec.model_config(prep.dims)))
        a = np.asarray(counts, dtype=np.float64)
        mid = model_id(fam, rc.embedding)
        result[mid] = {"counts": counts, "median": float(np.median(a)), "mean": float(a.mean()),
                       "std": float(a.std())}
        rows.append((mid, f"{np.median(a):.0f}", f"{a.mean():.1f}", f"{a.std():.1f}", str(a.size)))
    write_atomic(root / "params.json", dumps(result))
    write_atomic(root / "params.txt", _table(rows))
    sys.stdout.write(_table(rows))


def cmd_time(rc: RunConfig):
    """Train once per seed, then time 15 repeated test-set predictions per MC setting."""
    bundle = _load_bundle(rc)
    specs = {fam: load_best(rc, fam) for fam in rc.families}
    timings = {}
    for fam, spec in specs.items():
        prep = prepare(bundle, spec.n_bins)
        holder = {}
        t_train = time_run("train", lambda: holder.update(fit=_fit_spec(prep, spec, rc.base_seed, rc)))
        config, params, _ = holder["fit"]
        for i, mc in enumerate(_mc_values(rc, fam)):
            mid = model_id(fam, rc.embedding, None if mc == rc.mc_samples else mc)
            t_inf = time_run("inference", lambda: predict_split(prep, config, params, "test", mc or 1, rc.base_seed))
            timings[mid] = {"inference": t_inf.to_dict()}
            if i == 0:
                timings[mid]["train"] = t_train.to_dict()
    out = Path(rc.out)
    write_atomic(out / "timings.json", dumps(timings))
    write_atomic(out / "timings.txt", timing_table(timings))
    sys.stdout.write(timing_table(timings))


COMMANDS = {"tune": cmd_tune, "train": cmd_train, "evaluate": cmd_evaluate, "benchmark": cmd_benchmark,
            "rank": cmd_rank, "count-params": cmd_count_params, "time": cmd_time, "synth": cmd_synth}


# -- argument parsing ------------------------------------------------------------

def _options() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset flags out of the namespace so config-file values survive
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", dest="base_seed", type=int, help="base seed for tuning, training and splits")
    p.add_argument("--workers", type=int, help="parallel trial workers")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="dataset manifest (JSON)")
    p.add_argument("--family", dest="families", action="append", choices=FAMILIES,
                   help="model family; repeat for several (default: all)")
    p.add_argument("--embedding", action="store_true", help="use piecewise-linear embeddings")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--budget", type=int, help="number of tuning trials")
    p.add_argument("--mc-samples", dest="mc_samples", type=int, help="GG MoE inference samples (default 10)")
    p.add_argument("--mc-sweep", dest="mc_sweep", type=int, nargs="+",
                   help="additional GG MoE sample counts, e.g. 1 5 100")
    p.add_argument("--space", choices=("default", "desk"))
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--summaries", help="summaries file for `rank` (default: <out>/summaries.json)")
    p.add_argument("--kind", dest="synth_kind", help="synthetic dataset kind for `synth`")
    p.add_argument("--n", dest="synth_n", type=int)
    p.add_argument("--features", dest="synth_features", type=int)
    p.add_argument("--noise", dest="synth_noise", type=float)
    p.add_argument("--separation", dest="synth_separation", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    opts = _options()
    parser = argparse.ArgumentParser(prog="ggmoe", parents=[opts],
                                     description="Tune, train, evaluate and rank MLP / MoE / GG MoE models.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"tune": "random search per family; writes trial logs and best configs",
             "train": "train tuned configs for each seed and save checkpoints",
             "evaluate": "score saved checkpoints on the test split",
             "benchmark": "train + test every tuned family over seeds, then rank",
             "rank": "rank models from a summaries file",
             "count-params": "parameter counts of tuned configs",
             "time": "train and inference wall-clock timings",
             "synth": "write a synthetic dataset (CSV + manifest) to --out"}
    for name, h in helps.items():
        sub.add_parser(name, parents=[opts], help=h, argument_default=argparse.SUPPRESS)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    ns = vars(args).copy()
    command = ns.pop("command")
    ns.pop("verbose", None)
    ns.pop("summaries", None)
    cfg_path = ns.pop("config", None)
    rc = RunConfig.from_json(cfg_path) if cfg_path else RunConfig()
    for k, v in ns.items():
        setattr(rc, k, v)
    rc.mode = command
    if rc.space == "desk" and rc.max_epochs is None:
        rc.max_epochs = DESK_MAX_EPOCHS
    return rc.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        Path(rc.out).mkdir(parents=True, exist_ok=True)
        write_atomic(Path(rc.out) / f"run-{rc.mode}.json", dumps(asdict(rc)))
        if rc.mode == "rank":
            cmd_rank(rc, getattr(args, "summaries", None))
        else:
            COMMANDS[rc.mode](rc)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, ArithmeticError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, MissingValueError, DomainError, ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
