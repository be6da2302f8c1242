"""Dense float64 kernels, seeded random streams and Gumbel sampling.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. ``as_tensor`` is
the gate for external input: it converts, checks finiteness and returns a
read-only copy.
"""
from __future__ import annotations

import numpy as np

# Guard for uniform draws feeding -log(-log(u)).
GUMBEL_EPS = 2.0 ** -53


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class Rng:
    """Seeded random stream identified by ``(seed, stream)``.

    Sub-streams are derived with :meth:`derive`; each derived stream gets a
    distinct spawn key so it is independent of its parent and siblings.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] | int = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *stream: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(stream))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, lo, hi=None, size=None):
        return self._gen.integers(lo, hi, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def bernoulli(self, p, size):
        # float32 uniforms are plenty for a keep/drop decision and twice as fast
        return self._gen.random(size, dtype=np.float32) < p


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(rng: Rng, n) -> np.ndarray:
    """Draw Gumbel(0, 1) samples; ``n`` is a count or a shape."""
    if isinstance(n, (int, np.integer)) and n < 1:
        raise DomainError("n must be >= 1")
    return gumbel_from_uniform(rng.random(n))


def gumbel_softmax(logits, tau: float, rng: Rng | None = None, noise=None) -> np.ndarray:
    """Soft Gumbel-Softmax sample ``softmax((logits + s) / tau)``.

    ``noise`` overrides the draw (pass zeros to recover plain softmax).
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        noise = sample_gumbel(rng, logits.shape)
    return softmax((logits + noise) / tau)


def entropy(p, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.sum(terms, axis=axis)


def is_probvec(p, tol: float = 1e-12, axis: int = -1) -> bool:
    p = np.asarray(p)
    return bool(np.all(p >= 0) and np.all(p <= 1)
                and np.all(np.abs(np.sum(p, axis=axis) - 1.0) <= tol))
