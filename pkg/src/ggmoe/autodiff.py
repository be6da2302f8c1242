"""Small reverse-mode tape over numpy arrays.

Only the operations the three model families need are provided. ``Var``
disables numpy's ufunc protocol, so feeding a ``Var`` to any numpy function
outside this op set raises ``TypeError`` while the graph is being built.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class Var:
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._backward = backward
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(out, inputs, grad_fns):
    """Build a Var from ``out``; ``grad_fns[i]`` maps the upstream grad to input i."""
    parents = []
    fns = []
    for x, fn in zip(inputs, grad_fns):
        if isinstance(x, Var):
            parents.append(x)
            fns.append(fn)
    if not parents:
        return Var(out)

    def backward(g):
        return [fn(g) for fn in fns]

    return Var(out, tuple(parents), backward)


def add(a, b):
    av, bv = value(a), value(b)
    return _node(av + bv, (a, b), (lambda g: _unbroadcast(g, av.shape),
                                   lambda g: _unbroadcast(g, bv.shape)))


def neg(a):
    return _node(-value(a), (a,), (lambda g: -g,))


def mul(a, b):
    av, bv = value(a), value(b)
    return _node(av * bv, (a, b), (lambda g: _unbroadcast(g * bv, av.shape),
                                   lambda g: _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        from .numerics import DimensionError
        raise DimensionError(f"cannot multiply shapes {av.shape} and {bv.shape}")
    return _node(av @ bv, (a, b),
                 (lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
                  lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def relu(a):
    out = np.maximum(value(a), 0.0)
    return _node(out, (a,), (lambda g: g * (out > 0),))


def log(a):
    av = value(a)
    return _node(np.log(av), (a,), (lambda g: g / av,))


def maximum(a, floor: float):
    """Elementwise ``max(a, floor)`` against a constant; no gradient where clamped."""
    av = value(a)
    keep = av >= floor
    return _node(np.where(keep, av, floor), (a,), (lambda g: g * keep,))


def softmax(a, axis: int = -1):
    av = value(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _node(s, (a,), (grad,))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(out, (a,), (grad,))


def mean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(av, axes), (a,), (lambda g: np.transpose(g, inv),))


def concat(items, axis: int = -1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    fns = []
    for i in range(len(vals)):
        lo, hi = bounds[i], bounds[i + 1]
        fns.append(lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
    return _node(out, tuple(items), tuple(fns))


def getitem(a, idx):
    av = value(a)

    def grad(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _node(av[idx], (a,), (grad,))


def backward(loss: Var):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``."""
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node._backward(node.grad)):
            p.grad = g if p.grad is None else p.grad + g


def grad(loss_fn: Callable[[dict], Var], params: dict) -> tuple[float, dict]:
    """Return ``(loss, grads)`` for ``loss_fn`` evaluated at ``params``.

    ``loss_fn`` receives a dict of leaf ``Var`` objects with the same keys as
    ``params``. Parameters the loss does not touch get zero gradients.
    """
    leaves = {k: Var(v) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not isinstance(loss, Var):
        raise TypeError("loss_fn must return a Var")
    backward(loss)
    grads = {k: (np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad)
             for k, leaf in leaves.items()}
    return float(loss.value), grads


def fd_gradient(loss_fn: Callable[[dict], object], params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradient of a scalar function of ``params``."""
    if not h > 0:
        raise ValueError("h must be positive")
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        work = {kk: np.array(vv, dtype=np.float64) for kk, vv in params.items()}
        flat = work[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(value(loss_fn(work)))
            flat[i] = orig - h
            fm = float(value(loss_fn(work)))
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def relative_error(g_ad: dict, g_fd: dict) -> float:
    worst = 0.0
    for k in g_ad:
        a, b = np.asarray(g_ad[k]), np.asarray(g_fd[k])
        if a.size == 0:
            continue
        err = np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))
        worst = max(worst, float(err.max()))
    return worst


def fd_check(loss_fn, params: dict, h: float = 1e-5, grads: dict | None = None) -> float:
    """Max relative error between tape gradients (or ``grads``) and central differences.

    ``loss_fn`` must be deterministic: any dropout masks or gate noise have to
    be regenerated identically on every call.
    """
    if grads is None:
        _, grads = grad(loss_fn, params)
    return relative_error(grads, fd_gradient(loss_fn, params, h))
