import json
import math

import numpy as np
import pytest
from scipy import stats

from ggmoe.data import synth
from ggmoe.numerics import DomainError, Rng
from ggmoe.tune import (IntUniform, LogUniform, TrialSpec, Uniform, ZeroOr, default_space, desk_space,
                        in_space, plan, run_search, sample)

FAMILIES = ["mlp", "moe", "ggmoe"]


@pytest.fixture(scope="module")
def tiny():
    return synth("linear-regression", 120, 3, 0.1, seed=0)


def test_default_space_bounds():
    gg = default_space("ggmoe").dists
    assert gg["tau"] == Uniform(0.5, 3.0)
    assert gg["d_block"] == IntUniform(128, 1280, 64)
    assert gg["d_block_per_expert"] == IntUniform(32, 64, 32)
    emb = default_space("mlp", True).dists
    assert emb["n_bins"] == IntUniform(2, 128, 1)
    assert emb["d_embedding"] == IntUniform(8, 32, 4)
    assert emb["n_blocks"].hi == 5 and default_space("mlp").dists["n_blocks"].hi == 6
    assert default_space("mlp").dists["d_block"] == IntUniform(64, 1024, 16)


def test_unknown_family():
    with pytest.raises(DomainError):
        default_space("gbdt")


def test_moe_width_grid():
    d = default_space("moe").dists["d_block"]
    rng = Rng(0)
    draws = {d.sample(rng) for _ in range(10 ** 4)}
    assert draws <= set(range(128, 1281, 64))
    assert len(draws) == len(range(128, 1281, 64))


def test_dropout_zero_branch_is_half():
    d = default_space("mlp").dists["dropout"]
    rng = Rng(1)
    zeros = sum(d.sample(rng) == 0 for _ in range(10 ** 4))
    assert abs(zeros / 10 ** 4 - 0.5) < 0.02


def test_log_uniform_learning_rate():
    d = default_space("moe").dists["learning_rate"]
    rng = Rng(2)
    logs = np.log([d.sample(rng) for _ in range(5000)])
    lo, hi = math.log(3e-4), math.log(1e-2)
    assert stats.kstest((logs - lo) / (hi - lo), "uniform").pvalue > 0.01


def test_mlp_learning_rate_is_plain_uniform():
    d = default_space("mlp").dists["learning_rate"]
    rng = Rng(3)
    x = np.array([d.sample(rng) for _ in range(5000)])
    assert stats.kstest((x - 3e-5) / (1e-3 - 3e-5), "uniform").pvalue > 0.01


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("embedding", [False, True])
def test_samples_in_space(family, embedding):
    space = default_space(family, embedding)
    rng = Rng(4)
    for _ in range(500):
        assert in_space(space, sample(space, rng))


def test_in_space_rejects_off_grid():
    space = default_space("moe")
    spec = sample(space, Rng(0))
    assert not in_space(space, TrialSpec("moe", False, {**spec.values, "d_block": 130}))
    assert not in_space(space, TrialSpec("moe", False, {**spec.values, "dropout": 0.7}))


@pytest.mark.parametrize("make", [
    lambda: IntUniform(5, 1),
    lambda: IntUniform(1, 5, 0),
    lambda: LogUniform(0.0, 1.0),
    lambda: Uniform(2.0, 1.0),
])
def test_distribution_validation(make):
    with pytest.raises(DomainError):
        make()


def test_zero_or_contains():
    z = ZeroOr(LogUniform(1e-4, 0.1))
    assert z.contains(0.0) and z.contains(1e-3) and not z.contains(0.5)


def test_desk_space_is_narrower():
    for fam in FAMILIES:
        d, full = desk_space(fam).dists, default_space(fam).dists
        assert d["n_blocks"].hi <= full["n_blocks"].hi
        assert set(d) == set(full)
        assert set(d["d_block"].grid) <= set(full["d_block"].grid)


def test_plan_is_reproducible():
    space = default_space("ggmoe", True)
    a = [(s.to_dict(), seed) for s, seed in plan(space, 5, 11)]
    b = [(s.to_dict(), seed) for s, seed in plan(space, 5, 11)]
    assert a == b
    # prefixes agree, so a larger budget extends a smaller one
    assert [(s.to_dict(), seed) for s, seed in plan(space, 7, 11)][:5] == a
    assert a != [(s.to_dict(), seed) for s, seed in plan(space, 5, 12)]


def test_spec_roundtrip_and_config(tiny):
    from ggmoe.experiment import prepare
    spec = sample(default_space("ggmoe", True), Rng(5))
    assert TrialSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    prep = prepare(tiny, spec.n_bins)
    c = spec.model_config(prep.dims)
    assert c.tau == spec.values["tau"] and c.embedding.n_bins == spec.values["n_bins"]
    t = spec.train_config(3, max_epochs=7)
    assert t.seed == 3 and t.max_epochs == 7 and t.learning_rate == spec.values["learning_rate"]


def test_budget_one_picks_the_trial(tiny):
    res = run_search(tiny, "moe", budget=1, scorer=lambda spec: -1.0)
    assert res.best is res.results[0]


def test_plug_in_scorer_favours_small_width(tiny):
    res = run_search(tiny, "moe", budget=30, seed=2, scorer=lambda spec: -spec.values["d_block"])
    assert res.best.spec.values["d_block"] == min(r.spec.values["d_block"] for r in res.results)


def test_ties_go_to_earliest_and_failures_never_win(tiny):
    def scorer(spec):
        return float("nan") if spec.values["n_blocks"] == 1 else 0.0
    res = run_search(tiny, "mlp", budget=10, seed=3, scorer=scorer)
    ok = [r for r in res.results if r.status == "ok"]
    assert res.best is ok[0]
    assert all(r.score is None for r in res.results if r.status == "failed")


def test_search_log_deterministic_and_resumable(tiny, tmp_path):
    kw = dict(budget=3, seed=1, space=desk_space("ggmoe"), train_overrides={"max_epochs": 2})
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    r1 = run_search(tiny, "ggmoe", log_path=p1, **kw)
    run_search(tiny, "ggmoe", log_path=p2, **kw)
    assert p1.read_bytes() == p2.read_bytes()
    assert len(p1.read_text().splitlines()) == 3
    assert (tmp_path / "a.timing.jsonl").exists()
    # resume replays every logged trial instead of training again
    r3 = run_search(tiny, "ggmoe", log_path=p1, resume=True, **kw)
    assert [r.score for r in r3.results] == [r.score for r in r1.results]
    assert all(r.wall_time == 0.0 for r in r3.results)


def test_parallel_workers_match_serial(tiny):
    kw = dict(budget=2, seed=4, space=desk_space("mlp"), train_overrides={"max_epochs": 2})
    a = run_search(tiny, "mlp", workers=1, **kw)
    b = run_search(tiny, "mlp", workers=2, **kw)
    assert [r.log_record() for r in a.results] == [r.log_record() for r in b.results]
