"""MLP, softmax-gated MoE and Gumbel-Softmax-gated MoE for tabular inputs.

All three families share one parameter layout: ``K`` experts stored as
stacked arrays with a leading expert axis (an MLP is the ``K = 1`` case with
no gate). Each expert is ``n_blocks`` x (Linear -> ReLU -> Dropout) followed
by its own Linear head. The gate is a bias-augmented linear map to ``K``
logits. With an embedding config, every numeric feature is piecewise-linearly
encoded and mapped through its own Linear -> ReLU before the backbone.

Parameters are plain dicts of float64 arrays:

    emb.W    [F, T, d_embedding]      emb.b   [F, 1, d_embedding]
    block{l}.W [K, d_in, width]       block{l}.b [K, 1, width]
    gate.W   [M' + 1, K]   (last row is the bias)
    head.W   [K, width, n_out]        head.b  [K, 1, n_out]
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .numerics import DimensionError, DomainError, Rng, entropy, sample_gumbel, softmax

FAMILIES = ("mlp", "moe", "ggmoe")
MAX_EXPERTS = 40
PREDICT_CHUNK = 4096


@dataclass(frozen=True)
class EmbeddingConfig:
    d_embedding: int
    n_bins: int


@dataclass(frozen=True)
class ModelConfig:
    family: str
    n_blocks: int
    d_block: int
    input_dim: int               # raw dense width M (numeric + binary + one-hot)
    n_out: int = 1               # 1 for regression, C for classification
    task: str = "regression"     # regression | classification
    dropout: float = 0.0
    d_block_per_expert: int | None = None
    tau: float | None = None
    embedding: EmbeddingConfig | None = None
    n_numeric: int = 0           # leading numeric columns of the raw input

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}")
        if self.n_blocks < 1 or self.d_block < 1 or self.input_dim < 0:
            raise DomainError("n_blocks, d_block must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout {self.dropout} outside [0, 1)")
        if self.task not in ("regression", "classification"):
            raise DomainError(f"unknown task {self.task!r}")
        if self.task == "regression" and self.n_out != 1:
            raise DomainError("regression needs n_out == 1")
        if self.task == "classification" and self.n_out < 2:
            raise DomainError("classification needs n_out >= 2")
        if (self.tau is not None) != (self.family == "ggmoe"):
            raise DomainError("tau is required for ggmoe and only for ggmoe")
        if self.tau is not None and not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.family != "mlp":
            if not self.d_block_per_expert:
                raise DomainError("MoE families need d_block_per_expert")
            if not 1 <= self.num_experts <= MAX_EXPERTS:
                raise DomainError(f"num_experts {self.num_experts} outside 1..{MAX_EXPERTS}")
        if not 0 <= self.n_numeric <= self.input_dim:
            raise DomainError("n_numeric must lie in [0, input_dim]")
        if self.embedding is not None and self.n_numeric == 0:
            raise DomainError("embedding needs at least one numeric feature")

    @property
    def num_experts(self) -> int:
        if self.family == "mlp":
            return 1
        return self.d_block // self.d_block_per_expert

    @property
    def width(self) -> int:
        return self.d_block if self.family == "mlp" else self.d_block_per_expert

    @property
    def backbone_input(self) -> int:
        """Width M' seen by experts and gate."""
        if self.embedding is None:
            return self.input_dim
        return self.n_numeric * self.embedding.d_embedding + self.input_dim - self.n_numeric

    @property
    def dense_input(self) -> int:
        return self.input_dim if self.embedding is None else self.input_dim - self.n_numeric

    @property
    def name(self) -> str:
        base = {"mlp": "MLP", "moe": "MoE", "ggmoe": "GGMoE"}[self.family]
        return ("E+" + base) if self.embedding is not None else base

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("embedding") is not None:
            d["embedding"] = EmbeddingConfig(**d["embedding"])
        return cls(**d)


@dataclass
class ModelInput:
    dense: np.ndarray                  # [B, dense_input]
    ple: np.ndarray | None = None      # [B, n_numeric, n_bins]

    def __len__(self):
        return self.dense.shape[0]

    def take(self, idx) -> "ModelInput":
        return ModelInput(self.dense[idx], None if self.ple is None else self.ple[idx])


@dataclass
class PredictOutput:
    pred: np.ndarray                   # [B] regression, [B, C] class probabilities
    gate: np.ndarray | None = None     # [B, K]
    gate_entropy: np.ndarray | None = field(default=None)


def param_shapes(config: ModelConfig) -> dict:
    K, w, out = config.num_experts, config.width, config.n_out
    shapes = {}
    if config.embedding is not None:
        F, e = config.n_numeric, config.embedding
        shapes["emb.W"] = (F, e.n_bins, e.d_embedding)
        shapes["emb.b"] = (F, 1, e.d_embedding)
    d_in = config.backbone_input
    for l in range(config.n_blocks):
        shapes[f"block{l}.W"] = (K, d_in, w)
        shapes[f"block{l}.b"] = (K, 1, w)
        d_in = w
    if config.family != "mlp":
        shapes["gate.W"] = (config.backbone_input + 1, K)
    shapes["head.W"] = (K, w, out)
    shapes["head.b"] = (K, 1, out)
    return shapes


def count_params(config: ModelConfig, M: int | None = None) -> int:
    """Closed-form number of trainable scalars."""
    M = config.input_dim if M is None else M
    K, w, out = config.num_experts, config.width, config.n_out
    total = 0
    if config.embedding is not None:
        F, d, T = config.n_numeric, config.embedding.d_embedding, config.embedding.n_bins
        total += F * (T * d + d)
        Mp = F * d + M - F
    else:
        Mp = M
    total += K * ((Mp * w + w) + (config.n_blocks - 1) * (w * w + w) + (w * out + out))
    if config.family != "mlp":
        total += K * (Mp + 1)
    return total


def init(config: ModelConfig, rng: Rng) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0] - 1 if name == "gate.W" else shape[-2]
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        W = rng.uniform(-bound, bound, size=shape)
        if name == "gate.W":
            W[-1] = 0.0
        params[name] = W
    return params


def _check_input(config: ModelConfig, inp: ModelInput):
    if inp.dense.ndim != 2 or inp.dense.shape[1] != config.dense_input:
        raise DimensionError(f"dense input shape {inp.dense.shape} does not match width {config.dense_input}")
    if config.embedding is not None:
        want = (inp.dense.shape[0], config.n_numeric, config.embedding.n_bins)
        if inp.ple is None or inp.ple.shape != want:
            got = None if inp.ple is None else inp.ple.shape
            raise DimensionError(f"PLE input shape {got} does not match {want}")


def embed(config: ModelConfig, params: dict, inp: ModelInput):
    """Per-feature Linear -> ReLU over PLE codes, concatenated with the other features."""
    if config.embedding is None:
        raise DomainError("embedding is disabled for this config")
    B = inp.dense.shape[0]
    ple = np.transpose(inp.ple, (1, 0, 2))                       # [F, B, T]
    h = ad.relu(ad.matmul(ple, params["emb.W"]) + params["emb.b"])  # [F, B, d]
    h = ad.reshape(ad.transpose(h, (1, 0, 2)), (B, config.n_numeric * config.embedding.d_embedding))
    return ad.concat([h, inp.dense], axis=1)


def backbone_input(config, params, inp):
    return embed(config, params, inp) if config.embedding is not None else inp.dense


def experts(config, params, x, train=False, rng: Rng | None = None):
    """Raw expert outputs ``[K, B, n_out]``."""
    h = x
    for l in range(config.n_blocks):
        h = ad.relu(ad.matmul(h, params[f"block{l}.W"]) + params[f"block{l}.b"])
        if train and config.dropout > 0:
            keep = 1.0 - config.dropout
            mask = rng.bernoulli(keep, ad.value(h).shape) * (1.0 / keep)
            h = h * mask
    return ad.matmul(h, params["head.W"]) + params["head.b"]


def gate_logits(params, x):
    B = ad.value(x).shape[0]
    return ad.matmul(ad.concat([x, np.ones((B, 1))], axis=1), params["gate.W"])


def mix(config, gate, out):
    """Combine expert outputs ``[K, B, n_out]`` with gate weights ``[B, K]``."""
    K, B = ad.value(out).shape[:2]
    g = ad.reshape(ad.transpose(gate), (K, B, 1))
    if config.task == "regression":
        return ad.sum(g * out, axis=0)[:, 0]
    return ad.sum(g * ad.softmax(out, axis=-1), axis=0)


def forward(config: ModelConfig, params: dict, inp: ModelInput, train: bool = False,
            rng: Rng | None = None, noise=None):
    """Differentiable forward; returns ``(pred, gate)`` (``gate`` is None for MLP).

    In train mode GG MoE draws one Gumbel vector per row from ``rng`` unless
    ``noise`` is given. In eval mode GG MoE uses the noise-free softmax gate;
    use :func:`predict_ggmoe` for the Monte Carlo estimate.
    """
    _check_input(config, inp)
    x = backbone_input(config, params, inp)
    out = experts(config, params, x, train, rng)
    if config.family == "mlp":
        o = out[0]
        pred = o[:, 0] if config.task == "regression" else ad.softmax(o, axis=-1)
        return pred, None
    logits = gate_logits(params, x)
    if config.family == "ggmoe" and (train or noise is not None):
        if noise is None:
            noise = sample_gumbel(rng, ad.value(logits).shape)
        gate = ad.softmax((logits + noise) / config.tau, axis=-1)
    else:
        gate = ad.softmax(logits, axis=-1)
    return mix(config, gate, out), gate


def _output(pred, gate) -> PredictOutput:
    pred = np.array(ad.value(pred))
    if gate is None:
        return PredictOutput(pred)
    g = np.array(ad.value(gate))
    return PredictOutput(pred, g, entropy(g))


def forward_mlp(config, params, inp, train=False, rng=None) -> PredictOutput:
    if config.family != "mlp":
        raise DomainError("forward_mlp needs an mlp config")
    return _output(*forward(config, params, inp, train, rng))


def forward_moe(config, params, inp, train=False, rng=None) -> PredictOutput:
    if config.family == "mlp":
        raise DomainError("forward_moe needs a MoE config")
    return _output(*forward(config, params, inp, train, rng))


def forward_ggmoe_train(config, params, inp, rng=None, noise=None) -> PredictOutput:
    if config.family != "ggmoe":
        raise DomainError("forward_ggmoe_train needs a ggmoe config")
    return _output(*forward(config, params, inp, True, rng, noise))


def _eval_parts(config, params, inp):
    """Expert outputs and gate logits in eval mode, chunked over rows."""
    outs, logits = [], []
    for s in range(0, len(inp), PREDICT_CHUNK):
        part = inp.take(slice(s, s + PREDICT_CHUNK))
        x = backbone_input(config, params, part)
        outs.append(ad.value(experts(config, params, x)))
        if config.family != "mlp":
            logits.append(ad.value(gate_logits(params, x)))
    out = np.concatenate(outs, axis=1)
    return out, (np.concatenate(logits, axis=0) if logits else None)


def _mix_np(config, gate, out):
    w = gate.T[:, :, None]
    if config.task == "regression":
        return np.sum(w * out, axis=0)[:, 0]
    return np.sum(w * softmax(out, axis=-1), axis=0)


def predict_ggmoe(config, params, inp, n_samples: int, rng: Rng, noise=None) -> PredictOutput:
    """Monte Carlo estimate over ``n_samples`` Gumbel-Softmax gate draws.

    Expert outputs and gate logits are computed once; each draw only re-mixes
    them. Draw ``j`` consumes one ``[B, K]`` block from ``rng`` (or
    ``noise[j]``), so N single-draw calls on the same stream see the same noise.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    _check_input(config, inp)
    out, logits = _eval_parts(config, params, inp)
    total = 0.0
    gsum = 0.0
    for j in range(n_samples):
        s = noise[j] if noise is not None else sample_gumbel(rng, logits.shape)
        alpha = softmax((logits + s) / config.tau)
        total = total + _mix_np(config, alpha, out)
        gsum = gsum + alpha
    g = gsum / n_samples
    return PredictOutput(total / n_samples, g, entropy(g))


def predict(config, params, inp, rng: Rng | None = None, mc_samples: int = 10) -> PredictOutput:
    """Inference entry point: eval forward, or the MC estimate for GG MoE."""
    _check_input(config, inp)
    if config.family == "ggmoe":
        return predict_ggmoe(config, params, inp, mc_samples, rng)
    out, logits = _eval_parts(config, params, inp)
    if config.family == "mlp":
        o = out[0]
        return PredictOutput(o[:, 0] if config.task == "regression" else softmax(o))
    g = softmax(logits)
    return PredictOutput(_mix_np(config, g, out), g, entropy(g))


# -- checkpoints -------------------------------------------------------------

def _layout(config: ModelConfig, params: dict):
    """Arrays in checkpoint order: embedding, experts by index, gate, heads by index."""
    parts = []
    if config.embedding is not None:
        parts += [params["emb.W"], params["emb.b"]]
    for k in range(config.num_experts):
        for l in range(config.n_blocks):
            parts += [params[f"block{l}.W"][k], params[f"block{l}.b"][k]]
    if config.family != "mlp":
        parts.append(params["gate.W"])
    for k in range(config.num_experts):
        parts += [params["head.W"][k], params["head.b"][k]]
    return parts


def save_checkpoint(path, config: ModelConfig, params: dict, seed: int | None = None, extra: dict | None = None):
    flat = np.concatenate([np.ravel(p) for p in _layout(config, params)]).astype("<f8")
    header = {"config": config.to_dict(), "seed": seed, "backbone_input": config.backbone_input,
              "n_params": int(flat.size)}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(flat.tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        flat = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    if flat.size != header["n_params"] or flat.size != count_params(config):
        raise ValueError(f"checkpoint payload has {flat.size} values, expected {header['n_params']}")
    params = {k: np.zeros(s) for k, s in param_shapes(config).items()}
    pos = 0
    for target in _layout(config, params):
        target[...] = flat[pos:pos + target.size].reshape(target.shape)
        pos += target.size
    return config, params, header
