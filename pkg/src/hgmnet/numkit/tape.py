"""Reverse-mode gradient tape over 2-D float64 arrays.

Every value is a ``Var`` holding a 2-D array (scalars are 1x1, vectors are
1xd rows).  Operations whose inputs include at least one tracked ``Var``
append a node to that variable's ``Tape``; ``Tape.backward`` replays the
nodes in exact reverse order and accumulates gradients additively.

Operations on untracked inputs just compute values, so the same model code
serves inference and finite-difference evaluation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, NumericError

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Var:
    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self._nodes: list[tuple[str, Var, tuple[Var, ...], Backward]] = []
        self.trace: list[str] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def param(self, value, name: str | None = None) -> Var:
        """Register a leaf that receives gradients."""
        return Var(np.array(as_matrix(value), dtype=np.float64), tape=self, name=name)

    def record(self, name: str, out: Var, parents: tuple[Var, ...], backward: Backward) -> None:
        self._nodes.append((name, out, parents, backward))

    def backward(self, out: Var, seed: np.ndarray | None = None) -> None:
        if out.tape is not self:
            raise ValueError("output was not produced on this tape")
        out.grad = np.ones_like(out.value) if seed is None else as_matrix(seed).copy()
        self.trace = []
        for name, node, parents, fn in reversed(self._nodes):
            if node.grad is None:
                continue
            self.trace.append(name)
            grads = fn(node.grad)
            for parent, g in zip(parents, grads):
                if g is None or parent.tape is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g

    def zero_grad(self, params: Iterable[Var]) -> None:
        for p in params:
            p.grad = None


def grad_of(v: Var) -> np.ndarray:
    return np.zeros_like(v.value) if v.grad is None else v.grad


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def stop_gradient(x) -> Var:
    """Same value, cut from the tape."""
    return Var(lift(x).value)


def _emit(name: str, value: np.ndarray, parents: tuple[Var, ...], backward: Backward) -> Var:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = p.tape
    out = Var(value)
    if tape is not None:
        out.tape = tape
        tape.record(name, out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Var:
    a = lift(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Var:
    a = lift(a)
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def square(a) -> Var:
    a = lift(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * av * g,))


# ------------------------------------------------------------- elementwise


def exp(a) -> Var:
    a = lift(a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = lift(a)
    av = a.value
    if np.any(av <= 0):
        raise NumericError("log of a non-positive value")
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    a = lift(a)
    out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Var:
    a = lift(a)
    out = _sigmoid(a.value)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Var:
    a = lift(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = lift(a)
    av = a.value
    d = np.where(av > 0, 1.0, slope)
    return _emit("leaky_relu", av * d, (a,), lambda g: (g * d,))


def elu(a, alpha: float = 1.0) -> Var:
    a = lift(a)
    av = a.value
    em1 = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, alpha * em1)
    d = np.where(av > 0, 1.0, alpha * (em1 + 1.0))
    return _emit("elu", out, (a,), lambda g: (g * d,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -------------------------------------------------------------- reductions


def sum_(a, axis: int | None = None) -> Var:
    """Sum everything (1x1 result) or along one axis, keeping 2-D shape."""
    a = lift(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    else:
        out = a.value.sum(axis=axis, keepdims=True)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Var:
    a = lift(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def softmax_rows(a) -> Var:
    a = lift(a)
    out = softmax_rows_np(a.value)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (a,), back)


def log_softmax_rows(a) -> Var:
    a = lift(a)
    av = a.value
    if av.size == 0:
        raise DimensionError("log_softmax of an empty matrix")
    shifted = av - av.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit("log_softmax_rows", out, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax_rows_np(m: np.ndarray) -> np.ndarray:
    if m.size == 0:
        raise DimensionError("softmax of an empty matrix")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------- structural ops


def concat(parts: Sequence, axis: int = 1) -> Var:
    parts = [lift(p) for p in parts]
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def back(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(values)))
        return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(values)))

    return _emit("concat", out, tuple(parts), back)


def take_rows(a, idx) -> Var:
    """Rows ``a[idx]``; repeated indices accumulate in backward."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("take_rows", a.value[idx], (a,), back)


def take_cols(a, start: int, stop: int) -> Var:
    a = lift(a)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        ga[:, start:stop] = g
        return (ga,)

    return _emit("take_cols", a.value[:, start:stop].copy(), (a,), back)


def scatter_add_rows(a, idx, n: int) -> Var:
    """``out[idx[k]] += a[k]`` into an ``n``-row zero matrix."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n, a.shape[1]))
    np.add.at(out, idx, a.value)
    return _emit("scatter_add_rows", out, (a,), lambda g: (g[idx],))


def segment_softmax(scores, seg, nseg: int) -> Var:
    """Softmax of an (m x 1) column within groups given by ``seg``.

    Entries sharing a segment id are normalized together.  Segments with no
    entries simply do not appear.
    """
    s = lift(scores)
    seg = np.asarray(seg, dtype=np.intp)
    sv = s.value[:, 0]
    mx = np.full(nseg, -np.inf)
    np.maximum.at(mx, seg, sv)
    e = np.exp(sv - mx[seg])
    den = np.zeros(nseg)
    np.add.at(den, seg, e)
    p = (e / den[seg]).reshape(-1, 1)

    def back(g):
        gp = g[:, 0] * p[:, 0]
        tot = np.zeros(nseg)
        np.add.at(tot, seg, gp)
        return ((gp - p[:, 0] * tot[seg]).reshape(-1, 1),)

    return _emit("segment_softmax", p, (s,), back)


def rowdot(a, b) -> Var:
    """Row-wise dot products, (m x d), (m x d) -> (m x 1)."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"rowdot {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = (av * bv).sum(axis=1, keepdims=True)
    return _emit("rowdot", out, (a, b), lambda g: (g * bv, g * av))


def cosine_rows(a, b) -> Var:
    """Row-wise cosine similarity, (m x d) pairs -> (m x 1).

    Rows where either side has zero norm give 0 and zero gradient.
    """
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_rows {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(axis=1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=1, keepdims=True))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def back(g):
        g = np.where(ok, g, 0.0)
        ga = g * (bv / (na_s * nb_s) - cos * av / (na_s * na_s))
        gb = g * (av / (na_s * nb_s) - cos * bv / (nb_s * nb_s))
        return ga, gb

    return _emit("cosine_rows", cos, (a, b), back)


def kl_rows(p, q, eps: float = 1e-9) -> Var:
    """Row-wise KL(p || q) with q floored at ``eps``; q is treated as constant."""
    p = lift(p)
    qv = np.maximum(lift(q).value, eps)
    pv = p.value
    if pv.shape != qv.shape:
        raise DimensionError(f"kl_rows {pv.shape} vs {qv.shape}")
    safe = np.where(pv > 0, pv, 1.0)
    out = (np.where(pv > 0, pv * np.log(safe), 0.0) - pv * np.log(qv)).sum(axis=1, keepdims=True)

    def back(g):
        return (g * (np.log(np.maximum(pv, 1e-300)) + 1.0 - np.log(qv)),)

    return _emit("kl_rows", out, (p,), back)


def check_finite(v: Var, what: str = "value") -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite {what}")
    return v


def normalize_rows(a) -> Var:
    """Rows scaled to unit length; zero rows stay zero with zero gradient."""
    a = lift(a)
    av = a.value
    nrm = np.sqrt((av * av).sum(axis=1, keepdims=True))
    ok = nrm > 0
    safe = np.where(ok, nrm, 1.0)
    u = np.where(ok, av / safe, 0.0)

    def back(g):
        return (np.where(ok, (g - u * (g * u).sum(axis=1, keepdims=True)) / safe, 0.0),)

    return _emit("normalize_rows", u, (a,), back)


def scatter_pairs(v, rows, cols, shape: tuple[int, int]) -> Var:
    """Dense matrix with ``out[rows[k], cols[k]] += v[k]`` from an (m x 1) column."""
    v = lift(v)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = np.zeros(shape)
    np.add.at(out, (rows, cols), v.value[:, 0])
    return _emit("scatter_pairs", out, (v,), lambda g: (g[rows, cols].reshape(-1, 1),))
