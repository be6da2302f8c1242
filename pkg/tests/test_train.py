import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ggmoe import autodiff as ad
from ggmoe.model import ModelConfig, ModelInput, init
from ggmoe.numerics import DomainError, Rng
from ggmoe.train import (EarlyStopping, OptimizerState, TrainConfig, adamw_step, clip_global,
                         decay_mask, fit, global_norm, loss_ce, loss_mse)


def val(x):
    return float(ad.value(x))


@pytest.mark.parametrize("pred, target, expected", [
    ([1.0, 2.0], [1.0, 2.0], 0.0),
    ([0.0, 0.0], [1.0, 3.0], 5.0),
    ([10.0, 10.0], [11.0, 13.0], 5.0),
])
def test_mse(pred, target, expected):
    assert val(loss_mse(np.array(pred), np.array(target))) == pytest.approx(expected, abs=1e-15)


def test_mse_rejects_empty_and_mismatch():
    with pytest.raises(DomainError):
        loss_mse(np.zeros(0), np.zeros(0))
    with pytest.raises(DomainError):
        loss_mse(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("prob, target, expected", [
    (np.full((1, 4), 0.25), [2], math.log(4)),
    ([[0.0, 1.0, 0.0]], [1], 0.0),
    ([[0.5, 0.25, 0.25]], [1], math.log(4)),
])
def test_cross_entropy(prob, target, expected):
    assert val(loss_ce(np.array(prob), np.array(target))) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_floor_and_domain():
    assert val(loss_ce(np.array([[1.0, 0.0]]), np.array([1]))) == pytest.approx(-math.log(1e-12))
    with pytest.raises(DomainError):
        loss_ce(np.array([[0.5, 0.5]]), np.array([2]))


def test_clip_keeps_small_gradients():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global(g, 1.0)["a"] is g["a"]


def test_clip_halves_norm_two():
    g = {"a": np.array([1.2, 0.0]), "b": np.array([[0.0, 1.6]])}
    out = clip_global(g, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.0], atol=1e-15)
    np.testing.assert_allclose(out["b"], [[0.0, 0.8]], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, (3, 2), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3))
def test_clip_bound_property(a, b, c):
    out = clip_global({"a": a, "b": b}, c)
    assert global_norm(out) <= c + 1e-12 * max(1.0, c)


def test_adamw_zero_gradient_no_decay_is_identity():
    p = {"w.W": np.array([1.0, -2.0])}
    new, _ = adamw_step(p, {"w.W": np.zeros(2)}, OptimizerState.zeros_like(p), TrainConfig())
    assert np.array_equal(new["w.W"], p["w.W"])


def test_adamw_first_step_hand_trace():
    p = {"theta.W": np.array([0.0])}
    new, opt = adamw_step(p, {"theta.W": np.array([1.0])}, OptimizerState.zeros_like(p),
                          TrainConfig(learning_rate=0.1))
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert new["theta.W"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert opt.step == 1


def test_adamw_decoupled_decay():
    p = {"block0.W": np.full((1, 2, 2), 2.0), "block0.b": np.full((1, 1, 2), 2.0),
         "gate.W": np.full((3, 2), 2.0)}
    zeros = {k: np.zeros_like(v) for k, v in p.items()}
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1)
    opt = OptimizerState.zeros_like(p)
    for _ in range(3):
        p, opt = adamw_step(p, zeros, opt, cfg)
    f = (1 - 0.01 * 0.1) ** 3
    np.testing.assert_allclose(p["block0.W"], 2.0 * f, rtol=1e-15)
    assert np.all(p["block0.b"] == 2.0)
    np.testing.assert_allclose(p["gate.W"][:-1], 2.0 * f, rtol=1e-15)
    assert np.all(p["gate.W"][-1] == 2.0)


def test_decay_mask():
    assert decay_mask("head.b", (1, 1, 1)) == 0.0
    assert decay_mask("emb.W", (2, 3, 4)) == 1.0
    m = decay_mask("gate.W", (4, 2))
    assert np.all(m[:-1] == 1) and np.all(m[-1] == 0)


def test_early_stopping_trace():
    es = EarlyStopping(16)
    trace = [1, 2, 3] + [3] * 16 + [99]
    stopped = None
    for epoch, v in enumerate(trace, start=1):
        es.update(v)
        if es.should_stop:
            stopped = epoch
            break
    assert stopped == 19 and es.best_epoch == 3 and es.best == 3


@pytest.mark.parametrize("patience", [1, 2, 5, 16])
def test_early_stopping_counts_only_consecutive(patience):
    es = EarlyStopping(patience)
    es.update(1.0)
    for _ in range(patience - 1):
        es.update(0.5)
    assert not es.should_stop
    es.update(2.0)
    assert es.bad_epochs == 0


def _toy(task="regression", n=64, seed=0):
    rng = Rng(seed)
    X = rng.normal(size=(n, 3))
    if task == "regression":
        y = X @ np.array([1.0, -0.5, 0.2])
    else:
        y = (X[:, 0] > 0).astype(np.int64)
    return ModelInput(X[: n // 2]), y[: n // 2], ModelInput(X[n // 2:]), y[n // 2:]


def test_fit_scripted_scores_stop_on_patience():
    c = ModelConfig("mlp", 1, 4, 3)
    tr, ytr, va, yva = _toy()
    scores = [1, 2, 3] + [3] * 40
    best, rep = fit(c, init(c, Rng(0)), tr, ytr, va, yva, TrainConfig(batch_size=8),
                    scorer=lambda p, e: scores[e - 1])
    assert rep.epochs_run == 19 and rep.best_epoch == 3 and rep.best_val_score == 3


def test_fit_restores_best_snapshot():
    c = ModelConfig("mlp", 1, 4, 3)
    tr, ytr, va, yva = _toy()
    seen = {}

    def scorer(p, epoch):
        seen[epoch] = {k: v.copy() for k, v in p.items()}
        return [0.0, 5.0, 1.0, 1.0][epoch - 1] if epoch <= 4 else 0.0

    best, rep = fit(c, init(c, Rng(0)), tr, ytr, va, yva, TrainConfig(patience=3, batch_size=8),
                    scorer=scorer)
    assert rep.best_epoch == 2
    assert all(np.array_equal(best[k], seen[2][k]) for k in best)


def test_fit_one_epoch():
    c = ModelConfig("mlp", 1, 4, 3)
    _, rep = fit(c, init(c, Rng(0)), *_toy(), TrainConfig(max_epochs=1))
    assert rep.epochs_run == 1 and len(rep.train_loss) == 1


@pytest.mark.parametrize("family, task", [("mlp", "regression"), ("moe", "classification"),
                                          ("ggmoe", "regression"), ("ggmoe", "classification")])
def test_fit_is_deterministic_and_learns(family, task):
    kw = {} if family == "mlp" else {"d_block_per_expert": 4}
    if family == "ggmoe":
        kw["tau"] = 1.0
    n_out = 1 if task == "regression" else 2
    c = ModelConfig(family, 2, 8, 3, n_out, task, dropout=0.1, **kw)
    data = _toy(task, n=200, seed=3)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=16, max_epochs=15, seed=4)
    p1, r1 = fit(c, init(c, Rng(1)), *data, cfg)
    p2, r2 = fit(c, init(c, Rng(1)), *data, cfg)
    assert r1.train_loss == r2.train_loss and r1.val_score == r2.val_score
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert r1.train_loss[-1] < r1.train_loss[0]


def test_fit_divergence_returns_best_snapshot():
    c = ModelConfig("mlp", 1, 4, 3)
    tr, ytr, va, yva = _toy()
    ytr = ytr.copy()
    ytr[0] = 1e200  # squared residual overflows to inf
    p0 = init(c, Rng(0))
    with np.errstate(over="ignore"):
        best, rep = fit(c, p0, tr, ytr, va, yva, TrainConfig(batch_size=8))
    assert rep.status == "diverged" and rep.best_val_score is None
    assert all(np.array_equal(best[k], p0[k]) for k in best)


def test_train_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(DomainError):
        TrainConfig(patience=0)
