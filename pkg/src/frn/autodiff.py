"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery to differentiate episode losses through the
closed-form reconstruction: a ``Var`` wraps an ndarray and records a
backward closure; ``backward`` walks the graph in reverse topological
order. Non-Var operands are treated as constants. Broadcasting in the
elementwise ops is undone on the way back by summing over the
broadcast axes.

The solve node uses the closed-form sensitivity of X = A^-1 B:
grad_B = A^-T g and grad_A = -grad_B X^T, which follows from
d(A^-1) = -A^-1 dA A^-1.
"""

from __future__ import annotations

import numpy as np

from .linalg import spd_solve as _spd_solve_np


class Var:
    """A node in the computation graph: a value plus a backward rule."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; constants are auto-wrapped inside the ops
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that were added or broadcast to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _accumulate(var, g):
    if not isinstance(var, Var):
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


def backward(loss: Var):
    """Populate ``grad`` on every Var reachable from ``loss``.

    ``loss`` must be scalar; its gradient seeds at 1.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops with broadcasting


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(av + bv, parents=(a, b))

    def vjp(g):
        _accumulate(a, _unbroadcast(g, av.shape))
        _accumulate(b, _unbroadcast(g, bv.shape))

    out._vjp = vjp
    return out


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(av - bv, parents=(a, b))

    def vjp(g):
        _accumulate(a, _unbroadcast(g, av.shape))
        _accumulate(b, _unbroadcast(-g, bv.shape))

    out._vjp = vjp
    return out


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(av * bv, parents=(a, b))

    def vjp(g):
        _accumulate(a, _unbroadcast(g * bv, av.shape))
        _accumulate(b, _unbroadcast(g * av, bv.shape))

    out._vjp = vjp
    return out


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(av / bv, parents=(a, b))

    def vjp(g):
        _accumulate(a, _unbroadcast(g / bv, av.shape))
        _accumulate(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    out._vjp = vjp
    return out


def exp(a):
    av = value_of(a)
    out = Var(np.exp(av), parents=(a,))

    def vjp(g):
        _accumulate(a, g * out.value)

    out._vjp = vjp
    return out


def log(a):
    av = value_of(a)
    out = Var(np.log(av), parents=(a,))

    def vjp(g):
        _accumulate(a, g / av)

    out._vjp = vjp
    return out


def sqrt(a):
    av = value_of(a)
    out = Var(np.sqrt(av), parents=(a,))

    def vjp(g):
        _accumulate(a, g / (2.0 * out.value))

    out._vjp = vjp
    return out


def vsum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = Var(av.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, av.shape).copy())

    out._vjp = vjp
    return out


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = Var(av @ bv, parents=(a, b))

    def vjp(g):
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    out._vjp = vjp
    return out


def transpose(a):
    av = value_of(a)
    out = Var(av.T.copy(), parents=(a,))

    def vjp(g):
        _accumulate(a, g.T)

    out._vjp = vjp
    return out


def add_scaled_identity(a, s):
    """A + s * I for square A and scalar s."""
    av, sv = value_of(a), value_of(s)
    out = Var(av + sv * np.eye(av.shape[-1]), parents=(a, s))

    def vjp(g):
        _accumulate(a, g)
        _accumulate(s, np.asarray(np.trace(g)))

    out._vjp = vjp
    return out


def spd_solve(a, b):
    """X = A^-1 B with A symmetric positive-definite."""
    av, bv = value_of(a), value_of(b)
    x = _spd_solve_np(av, bv)
    out = Var(x, parents=(a, b))

    def vjp(g):
        gb = _spd_solve_np(av, g)
        _accumulate(b, gb)
        _accumulate(a, -gb @ x.T)

    out._vjp = vjp
    return out


def concat_rows(parts):
    vals = [value_of(p) for p in parts]
    out = Var(np.vstack(vals), parents=tuple(parts))
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    out._vjp = vjp
    return out


def column_stack(cols):
    """Stack 1-D vectors of equal length into the columns of a matrix."""
    vals = [value_of(c) for c in cols]
    out = Var(np.column_stack(vals), parents=tuple(cols))

    def vjp(g):
        for j, c in enumerate(cols):
            _accumulate(c, g[:, j])

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# fused ops for episode losses


def block_sqnorm(x, rows_per_block: int):
    """Per-block squared Frobenius norm of consecutive row blocks.

    An (m*rows_per_block, d) input yields an (m,) vector whose i-th entry
    is the sum of squares of block i.
    """
    xv = value_of(x)
    m = xv.shape[0] // rows_per_block
    blocks = xv.reshape(m, rows_per_block * xv.shape[1])
    out = Var((blocks * blocks).sum(axis=1), parents=(x,))

    def vjp(g):
        _accumulate(x, (2.0 * blocks * g[:, None]).reshape(xv.shape))

    out._vjp = vjp
    return out


def block_mean_rows(x, rows_per_block: int):
    """Mean over consecutive row blocks: (m*rows, d) -> (m, d)."""
    xv = value_of(x)
    m = xv.shape[0] // rows_per_block
    out_val = xv.reshape(m, rows_per_block, xv.shape[1]).mean(axis=1)
    out = Var(out_val, parents=(x,))

    def vjp(g):
        expanded = np.repeat(g / rows_per_block, rows_per_block, axis=0)
        _accumulate(x, expanded)

    out._vjp = vjp
    return out


def pairwise_sqdist(a, b):
    """(n, d) x (m, d) -> (n, m) matrix of squared Euclidean distances."""
    av, bv = value_of(a), value_of(b)
    diff = av[:, None, :] - bv[None, :, :]
    out = Var((diff * diff).sum(axis=2), parents=(a, b))

    def vjp(g):
        scaled = 2.0 * diff * g[:, :, None]
        _accumulate(a, scaled.sum(axis=1))
        _accumulate(b, -scaled.sum(axis=0))

    out._vjp = vjp
    return out


def row_normalize(x):
    """Rows projected to the unit sphere; zero rows stay zero."""
    xv = value_of(x)
    norms = np.linalg.norm(xv, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    o = xv / safe
    out = Var(o, parents=(x,))

    def vjp(g):
        inner = (g * o).sum(axis=1, keepdims=True)
        gx = (g - o * inner) / safe
        gx[norms[:, 0] == 0.0] = 0.0
        _accumulate(x, gx)

    out._vjp = vjp
    return out


def row_softmax(x):
    xv = value_of(x)
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Var(s, parents=(x,))

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accumulate(x, s * (g - inner))

    out._vjp = vjp
    return out


def cross_entropy_logits(logits, labels):
    """Mean negative log-likelihood from logits; labels are constant ints."""
    lv = value_of(logits)
    labels = np.asarray(labels)
    n_q = lv.shape[0]
    m = lv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lv - m).sum(axis=1))
    value = np.mean(lse - lv[np.arange(n_q), labels])
    out = Var(value, parents=(logits,))
    probs = np.exp(lv - m)
    probs /= probs.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(n_q), labels] -= 1.0
        _accumulate(logits, gl * (g / n_q))

    out._vjp = vjp
    return out
