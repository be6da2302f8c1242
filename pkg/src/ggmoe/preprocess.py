"""Feature transforms fitted on the training split only.

Binary columns map to {0, 1}, categorical columns are one-hot encoded with a
trailing unknown slot, numeric columns are quantile-normalized to a standard
normal (plain path) or piecewise-linearly encoded over quantile bins
(embedding path).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

CDF_CLIP = 1e-6
MAX_QUANTILES = 1000
_TRUE = {"1", "1.0", "true", "t", "yes", "y"}
_FALSE = {"0", "0.0", "false", "f", "no", "n"}


@dataclass(frozen=True)
class NumericState:
    # strictly increasing reference values and their CDF levels
    quantiles: tuple[float, ...]
    levels: tuple[float, ...]
    edges: tuple[float, ...] = ()
    degenerate: bool = False


@dataclass(frozen=True)
class PreprocessorState:
    kinds: dict                       # column -> 'numeric' | 'categorical' | 'binary'
    numeric: dict = field(default_factory=dict)     # column -> NumericState
    vocab: dict = field(default_factory=dict)       # column -> tuple of categories
    positive: dict = field(default_factory=dict)    # binary column -> value mapped to 1
    n_bins: int | None = None

    @property
    def numeric_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k == "numeric"]

    @property
    def other_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k != "numeric"]

    def other_width(self) -> int:
        w = 0
        for c in self.other_columns:
            w += 1 if self.kinds[c] == "binary" else len(self.vocab[c]) + 1
        return w

    def dense_width(self) -> int:
        return len(self.numeric_columns) + self.other_width()

    def to_json(self) -> str:
        doc = {
            # pairs keep the column order, which fixes the dense layout
            "kinds": [[c, k] for c, k in self.kinds.items()],
            "n_bins": self.n_bins,
            "numeric": {c: {"quantiles": [_r(v) for v in s.quantiles],
                            "levels": [_r(v) for v in s.levels],
                            "edges": [_r(v) for v in s.edges],
                            "degenerate": s.degenerate}
                        for c, s in self.numeric.items()},
            "vocab": {c: list(v) for c, v in self.vocab.items()},
            "positive": self.positive,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PreprocessorState":
        doc = json.loads(text)
        numeric = {c: NumericState(tuple(s["quantiles"]), tuple(s["levels"]),
                                   tuple(s["edges"]), s["degenerate"])
                   for c, s in doc["numeric"].items()}
        return cls(kinds={c: k for c, k in doc["kinds"]}, numeric=numeric,
                   vocab={c: tuple(v) for c, v in doc["vocab"].items()},
                   positive=doc["positive"], n_bins=doc["n_bins"])


def _r(x: float) -> float:
    # 17 significant digits round-trips float64 exactly
    return float(f"{x:.17g}")


def fit_numeric(col, n_bins: int | None = None) -> NumericState:
    col = np.asarray(col, dtype=np.float64)
    if col.size < 2:
        raise ValueError("need at least 2 training rows")
    if np.all(col == col[0]):
        return NumericState((float(col[0]),), (0.5,), (), degenerate=True)
    q = min(MAX_QUANTILES, col.size)
    refs = np.linspace(0.0, 1.0, q)
    qv = np.quantile(col, refs)
    # collapse repeated quantile values onto the mean of their levels
    uniq, inv = np.unique(qv, return_inverse=True)
    levels = np.bincount(inv, weights=refs) / np.bincount(inv)
    edges = ()
    if n_bins is not None:
        if n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        edges = tuple(float(e) for e in np.unique(np.quantile(col, np.linspace(0, 1, n_bins + 1))))
    return NumericState(tuple(map(float, uniq)), tuple(map(float, levels)), edges)


def transform_quantile(state: NumericState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if state.degenerate:
        return np.zeros_like(x)
    cdf = np.interp(x, state.quantiles, state.levels)
    return ndtri(np.clip(cdf, CDF_CLIP, 1.0 - CDF_CLIP))


def encode_ple(edges, x) -> np.ndarray:
    """Piecewise-linear encoding of ``x`` over bins ``edges`` (T+1 values -> T components)."""
    edges = np.asarray(edges, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    lo, hi = edges[:-1], edges[1:]
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    frac = np.clip((x - lo) / safe, 0.0, 1.0)
    return np.where(width > 0, frac, (x >= hi).astype(np.float64))


def transform_onehot(vocab, values) -> np.ndarray:
    values = np.asarray(values, dtype=object).reshape(-1)
    index = {v: i for i, v in enumerate(vocab)}
    out = np.zeros((values.size, len(vocab) + 1))
    for r, v in enumerate(values):
        out[r, index.get(str(v), len(vocab))] = 1.0
    return out


def _fit_binary(values) -> str:
    uniq = sorted({str(v) for v in values})
    if len(uniq) > 2:
        raise ValueError(f"binary column has {len(uniq)} distinct values: {uniq[:5]}")
    for v in uniq:
        if v.strip().lower() in _TRUE:
            return v
    for v in uniq:
        if v.strip().lower() in _FALSE:
            others = [u for u in uniq if u != v]
            return others[0] if others else "\x00"
    return uniq[-1]


def transform_binary(positive: str, values) -> np.ndarray:
    values = np.asarray(values, dtype=object).reshape(-1)
    return np.array([1.0 if str(v) == positive else 0.0 for v in values])


def fit(columns: dict, kinds: dict, n_bins: int | None = None) -> PreprocessorState:
    """Fit on training columns. ``kinds`` maps feature column -> kind."""
    numeric, vocab, positive = {}, {}, {}
    for name, kind in kinds.items():
        col = columns[name]
        if kind == "numeric":
            numeric[name] = fit_numeric(col, n_bins)
        elif kind == "categorical":
            vocab[name] = tuple(sorted({str(v) for v in col}))
        elif kind == "binary":
            positive[name] = _fit_binary(col)
        else:
            raise ValueError(f"unknown column kind {kind!r} for {name!r}")
    return PreprocessorState(dict(kinds), numeric, vocab, positive, n_bins)


def transform_other(state: PreprocessorState, columns: dict) -> np.ndarray:
    parts = []
    for c in state.other_columns:
        if state.kinds[c] == "binary":
            parts.append(transform_binary(state.positive[c], columns[c])[:, None])
        else:
            parts.append(transform_onehot(state.vocab[c], columns[c]))
    n = _n_rows(columns)
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))


def transform_dense(state: PreprocessorState, columns: dict) -> np.ndarray:
    """Quantile-normalized numeric columns followed by binary/one-hot columns."""
    num = [transform_quantile(state.numeric[c], columns[c])[:, None] for c in state.numeric_columns]
    n = _n_rows(columns)
    num = np.concatenate(num, axis=1) if num else np.zeros((n, 0))
    return np.concatenate([num, transform_other(state, columns)], axis=1)


def transform_ple(state: PreprocessorState, columns: dict) -> np.ndarray:
    """PLE encodings as ``[rows, n_numeric, n_bins]``; features with merged bins are zero-padded."""
    if state.n_bins is None:
        raise ValueError("state was fitted without n_bins")
    n = _n_rows(columns)
    out = np.zeros((n, len(state.numeric_columns), state.n_bins))
    for j, c in enumerate(state.numeric_columns):
        s = state.numeric[c]
        if s.degenerate or len(s.edges) < 2:
            continue
        enc = encode_ple(s.edges, columns[c])
        out[:, j, :enc.shape[1]] = enc
    return out


def _n_rows(columns: dict) -> int:
    for v in columns.values():
        return len(v)
    return 0
