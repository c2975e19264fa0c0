"""Tape-based reverse-mode differentiation over numpy arrays.

Values are float64 arrays: a vector is 1-D, a batch of vectors is 2-D with
one row per sample, and every vector primitive acts on the last axis.
Weight sharing falls out of adjoint accumulation: a parameter consumed by
many nodes of a tree receives the sum of their contributions.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import NonScalarSeed, ShapeMismatch

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Var:
    __slots__ = ("tape", "id", "value")
    # make ndarray (op) Var dispatch to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Records primitive applications in execution order.

    Each record is ``(output id, input ids, backward fn)``; ``backward`` walks
    the records in exact reverse order.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[tuple[int, tuple[int, ...], BackwardFn]] = []
        self.params: dict[str, int] = {}

    def _new(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.values.append(value)
        return Var(self, len(self.values) - 1, value)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        v = self._new(np.array(value, dtype=np.float64))
        self.params[name] = v.id
        return v

    def params_from(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, Var]:
        return {k: self.param(prefix + k, a) for k, a in arrays.items()}

    def const(self, value) -> Var:
        return self._new(value)

    def record(self, value, inputs: Sequence[Var], backward: BackwardFn) -> Var:
        out = self._new(value)
        self.records.append((out.id, tuple(v.id for v in inputs), backward))
        return out

    def backward(self, seed: Var) -> dict[str, np.ndarray]:
        return backward(self, seed)


def backward(tape: Tape, seed: Var) -> dict[str, np.ndarray]:
    """Gradients of scalar ``seed`` for every parameter on the tape."""
    if seed.value.size != 1:
        raise NonScalarSeed(f"seed must be scalar, got shape {seed.shape}")
    adj: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.value)}
    for out_id, in_ids, fn in reversed(tape.records):
        g = adj.pop(out_id, None)
        if g is None:
            continue
        for i, gi in zip(in_ids, fn(g)):
            if gi is None:
                continue
            if i in adj:
                adj[i] = adj[i] + gi
            else:
                adj[i] = gi
    return {
        name: adj.get(i, np.zeros_like(tape.values[i])).reshape(tape.values[i].shape)
        for name, i in tape.params.items()
    }


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# linear algebra ---------------------------------------------------------

def matvec(W: Var, x: Var) -> Var:
    """``W @ x`` for a vector, or ``x @ W.T`` row-wise for a batch."""
    W, x = (_lift(_tape_of(W, x), v) for v in (W, x))
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1]:
        raise ShapeMismatch(f"matvec: W{Wv.shape} x{xv.shape}")
    # einsum sums each row the same way whatever the batch size, so a tree
    # evaluated alone or inside a level batch gives bit-identical results
    out = np.einsum("...k,jk->...j", xv, Wv)

    def bw(g):
        if xv.ndim == 1:
            gW = np.outer(g, xv)
        else:
            gW = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gW, g @ Wv

    return W.tape.record(out, (W, x), bw)


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    """Elementwise (Hadamard) product with broadcasting."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return t.record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


hadamard = mul


def scale(x: Var, c: float) -> Var:
    return x.tape.record(x.value * c, (x,), lambda g: (g * c,))


def concat(xs: Sequence[Var]) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    lead = xs[0].value.shape[:-1]
    for x in xs:
        if x.value.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: leading shapes differ {[x.shape for x in xs]}")
    sizes = [x.value.shape[-1] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return t.record(
        np.concatenate([x.value for x in xs], axis=-1), xs, lambda g: np.split(g, cuts, axis=-1)
    )


def slice_(x: Var, start: int, stop: int) -> Var:
    n = x.value.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for size {n}")

    def bw(g):
        out = np.zeros_like(x.value)
        out[..., start:stop] = g
        return (out,)

    return x.tape.record(x.value[..., start:stop], (x,), bw)


def gather_rows(sources: Sequence[Var], index: Sequence[tuple[int, int]]) -> Var:
    """Row ``k`` of the result is row ``index[k][1]`` of ``sources[index[k][0]]``."""
    t = _tape_of(*sources)
    src = np.fromiter((s for s, _ in index), dtype=np.int64, count=len(index))
    row = np.fromiter((r for _, r in index), dtype=np.int64, count=len(index))
    width = sources[0].value.shape[-1]
    out = np.empty((len(index), width))
    picks = []
    for s, v in enumerate(sources):
        if v.value.ndim != 2 or v.value.shape[1] != width:
            raise ShapeMismatch("gather_rows: sources must be 2-D with equal width")
        sel = np.nonzero(src == s)[0]
        picks.append((sel, row[sel]))
        out[sel] = v.value[row[sel]]

    def bw(g):
        grads = []
        for (sel, rows), v in zip(picks, sources):
            if len(sel) == 0:
                grads.append(None)
                continue
            gs = np.zeros_like(v.value)
            np.add.at(gs, rows, g[sel])
            grads.append(gs)
        return grads

    return t.record(out, sources, bw)


# nonlinearities ----------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Var) -> Var:
    s = _sigmoid(x.value)
    return x.tape.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x: Var) -> Var:
    xv = x.value
    return x.tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def clip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.value >= lo) & (x.value <= hi)
    return x.tape.record(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def blockwise_softmax(x: Var, n_blocks: int) -> Var:
    """Softmax across ``n_blocks`` equal blocks of the last axis, per component."""
    n = x.value.shape[-1]
    if n % n_blocks:
        raise ShapeMismatch(f"size {n} is not divisible into {n_blocks} blocks")
    shp = x.value.shape
    blocks = x.value.reshape(shp[:-1] + (n_blocks, n // n_blocks))
    e = np.exp(blocks - blocks.max(axis=-2, keepdims=True))
    s = e / e.sum(axis=-2, keepdims=True)

    def bw(g):
        gb = g.reshape(s.shape)
        return ((s * (gb - (gb * s).sum(axis=-2, keepdims=True))).reshape(shp),)

    return x.tape.record(s.reshape(shp), (x,), bw)


ACTIVATIONS = {"relu": relu, "tanh": tanh}


# reductions ----------------------------------------------------------------

def sum_(x: Var) -> Var:
    shp = x.value.shape
    return x.tape.record(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean(x: Var) -> Var:
    shp, n = x.value.shape, x.value.size
    return x.tape.record(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / n, shp).copy(),))


def reshape(x: Var, shape: tuple) -> Var:
    shp = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(shp),))


# verification ----------------------------------------------------------------

def rel_error(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def value_and_grad(fn: Callable[[Tape, dict[str, Var]], Var], params: Mapping[str, np.ndarray]):
    tape = Tape()
    out = fn(tape, tape.params_from(params))
    return float(out.value), backward(tape, out)


def grad_check(
    fn: Callable[[Tape, dict[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    coords: Optional[Mapping[str, Iterable[int]]] = None,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn(tape, vars)`` must build a scalar on a fresh tape. ``coords`` limits
    the finite-difference probe to the given flat indices per array; every
    entry is probed by default.
    """
    _, grads = value_and_grad(fn, params)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f() -> float:
        t = Tape()
        return float(fn(t, t.params_from(work)).value)

    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        g = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, float(rel_error(g[i], fd)))
    return worst
