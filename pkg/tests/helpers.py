"""Small random configurations and inputs shared by the test modules."""
import numpy as np

from ggmoe import autodiff as ad
from ggmoe.model import EmbeddingConfig, ModelConfig, ModelInput
from ggmoe.numerics import Rng
from ggmoe.train import batch_loss


def random_config(rng: Rng, family: str, embedding: bool = False, task: str | None = None,
                  small: bool = True) -> ModelConfig:
    task = task or ("regression" if rng.random() < 0.5 else "classification")
    n_out = 1 if task == "regression" else int(rng.integers(2, 4))
    n_numeric = int(rng.integers(1, 4))
    input_dim = n_numeric + int(rng.integers(0, 3))
    n_blocks = int(rng.integers(1, 3 if small else 4))
    emb = EmbeddingConfig(int(rng.integers(2, 4)), int(rng.integers(2, 5))) if embedding else None
    dropout = float(rng.uniform(0.0, 0.4)) if rng.random() < 0.5 else 0.0
    if family == "mlp":
        width = int(rng.integers(2, 7 if small else 40))
        return ModelConfig("mlp", n_blocks, width, input_dim, n_out, task, dropout,
                           embedding=emb, n_numeric=n_numeric)
    per = int(rng.integers(2, 5 if small else 33))
    K = int(rng.integers(1 if not small else 2, 4 if small else 9))
    tau = float(rng.uniform(0.5, 3.0)) if family == "ggmoe" else None
    return ModelConfig(family, n_blocks, per * K, input_dim, n_out, task, dropout, d_block_per_expert=per,
                       tau=tau, embedding=emb, n_numeric=n_numeric)


def random_input(config: ModelConfig, rng: Rng, batch: int = 5) -> ModelInput:
    dense = rng.normal(size=(batch, config.dense_input))
    ple = None
    if config.embedding is not None:
        ple = rng.uniform(0, 1, size=(batch, config.n_numeric, config.embedding.n_bins))
    return ModelInput(dense, ple)


def random_target(config: ModelConfig, rng: Rng, batch: int):
    if config.task == "regression":
        return rng.normal(size=batch)
    return rng.integers(0, config.n_out, size=batch)


def loss_fn(config, inp, y, seed=0):
    """Deterministic training loss: dropout masks and gate noise come from a fresh stream per call."""
    def f(p):
        return batch_loss(config, p, inp, y, Rng(seed, 99))
    return f


def perturb(params: dict, rng: Rng, scale: float = 0.5) -> dict:
    # nonzero biases exercise every gradient path
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


def fd_error(config, params, inp, y, seed=0) -> float:
    return ad.fd_check(loss_fn(config, inp, y, seed), params)


def as_array(x):
    return np.asarray(ad.value(x))


# criterion number -> (title, passed, detail); printed by the terminal summary hook
ACCEPTANCE: dict = {}
