"""Glue: dataset bundle -> model inputs -> trained model -> test score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import preprocess
from .data import DatasetBundle, Split
from .evaluate import score
from .model import ModelConfig, ModelInput, init, predict
from .numerics import Rng
from .train import TrainConfig, fit


@dataclass(frozen=True)
class Dims:
    input_dim: int
    n_numeric: int
    n_out: int
    task: str  # regression | classification


@dataclass
class Prepared:
    state: preprocess.PreprocessorState
    dims: Dims
    train: ModelInput
    val: ModelInput
    test: ModelInput
    y_train: np.ndarray         # original units
    y_fit: np.ndarray           # training targets as seen by the loss
    y_val: np.ndarray
    y_test: np.ndarray
    target_stats: tuple | None  # (mean, std) of training targets for regression


def _inputs(state, split: Split, embedding: bool) -> ModelInput:
    if embedding:
        return ModelInput(preprocess.transform_other(state, split.columns),
                          preprocess.transform_ple(state, split.columns))
    return ModelInput(preprocess.transform_dense(state, split.columns))


def prepare(bundle: DatasetBundle, n_bins: int | None = None) -> Prepared:
    """Fit preprocessing on the training split and transform all three splits.

    ``n_bins`` selects the embedding path (PLE codes for numeric columns).
    """
    s = bundle.schema
    state = preprocess.fit(bundle.train.columns, s.feature_kinds, n_bins)
    emb = n_bins is not None
    task = "classification" if s.is_classification else "regression"
    dims = Dims(state.dense_width(), len(state.numeric_columns), s.n_out, task)
    y_fit = bundle.train.y
    stats = None
    if task == "regression":
        mu = float(np.mean(y_fit))
        sd = float(np.std(y_fit)) or 1.0
        stats = (mu, sd)
        y_fit = (y_fit - mu) / sd
    return Prepared(state, dims,
                    _inputs(state, bundle.train, emb), _inputs(state, bundle.val, emb),
                    _inputs(state, bundle.test, emb),
                    bundle.train.y, np.asarray(y_fit), bundle.val.y, bundle.test.y, stats)


def train_model(prep: Prepared, config: ModelConfig, train_cfg: TrainConfig):
    """Initialise from ``train_cfg.seed`` and fit; returns ``(params, report)``."""
    params = init(config, Rng(train_cfg.seed, 7))
    return fit(config, params, prep.train, prep.y_fit, prep.val, prep.y_val, train_cfg,
               target_stats=prep.target_stats)


def predict_split(prep: Prepared, config, params, split: str = "test", mc_samples: int = 10, seed: int = 0):
    inp = getattr(prep, split)
    pred = predict(config, params, inp, Rng(seed, 11), mc_samples).pred
    if prep.target_stats is not None:
        pred = pred * prep.target_stats[1] + prep.target_stats[0]
    return pred


def score_split(prep: Prepared, config, params, split: str = "test", mc_samples: int = 10, seed: int = 0) -> float:
    pred = predict_split(prep, config, params, split, mc_samples, seed)
    return score(pred, getattr(prep, f"y_{split}"), prep.dims.task)
