"""Reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 ndarray and remembers how it was produced; calling
:func:`backward` on a scalar root walks the graph once in reverse topological
order and returns exact gradients for the requested leaves.  Ops are fused at
the granularity this project actually needs (a whole linear layer, a whole
trilinear interpolation, a masked log-sum-exp) so that graphs stay small and
per-op Python overhead does not dominate the numpy kernels.

Only parameters are ever differentiated: sample positions, ray directions and
label masks enter the graph as constants, which keeps every vjp short.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "const",
    "leaf",
    "stop",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "vsum",
    "vmean",
    "square",
    "sqsum",
    "vexp",
    "vlog",
    "softplus",
    "sigmoid",
    "relu",
    "maximum_const",
    "clip_min",
    "linear",
    "matmul",
    "gather_rows",
    "take_along",
    "narrow",
    "reshape",
    "concat",
    "cumsum",
    "one_minus_exp_neg",
    "pairwise_sqdist",
    "logsumexp",
    "softmax",
    "render_combine",
    "trilerp",
]


class Var:
    """Node in the computation graph.

    ``requires`` marks whether any differentiable leaf feeds this node; the
    backward pass prunes everything else.
    """

    __slots__ = ("value", "parents", "vjp", "requires")

    def __init__(self, value, parents=(), vjp=None, requires=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        if requires is None:
            requires = any(p.requires for p in parents)
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    # Operator sugar; right-hand constants are lifted automatically.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires={self.requires})"


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), requires=False)


def const(x) -> Var:
    """Wrap an array as a non-differentiable graph node."""
    return _lift(x)


def leaf(value: np.ndarray, requires: bool = True) -> Var:
    """Create a differentiable leaf, typically a view into a parameter store."""
    return Var(value, requires=requires)


def stop(x: Var) -> Var:
    """Stop-gradient barrier: same value, no history."""
    return Var(x.value, requires=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root: Var, wanted: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
    """Run reverse-mode differentiation from a scalar root.

    Returns a mapping from leaf Var to its gradient.  Gradients accumulate in
    a buffer private to this call, so concurrent backward passes over shared
    parameters are safe.  Leaves that the root does not depend on are reported
    with an explicit zero gradient.
    """
    if root.value.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.value.shape}")

    # Iterative topological order over the requires-grad subgraph.
    order: list[Var] = []
    seen: set[int] = set()
    stack_: list[tuple[Var, bool]] = [(root, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        if node.vjp is None:
            continue  # leaf; keep its accumulated gradient for reporting
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg
            else:
                acc += pg

    if wanted is None:
        return {}
    out: dict[Var, np.ndarray] = {}
    for v in wanted:
        g = grads.get(id(v))
        out[v] = g if g is not None else np.zeros_like(v.value)
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Var, b: Var) -> Var:
    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return Var(a.value + b.value, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return Var(a.value - b.value, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(a.value * b.value, (a, b), vjp)


def div(a: Var, b: Var) -> Var:
    inv = 1.0 / b.value

    def vjp(g):
        return (
            _unbroadcast(g * inv, a.value.shape),
            _unbroadcast(-g * a.value * inv * inv, b.value.shape),
        )

    return Var(a.value * inv, (a, b), vjp)


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def square(a: Var) -> Var:
    return Var(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def vexp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def vlog(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def softplus(a: Var) -> Var:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    x = a.value
    out = np.logaddexp(0.0, x)

    def vjp(g):
        return (g * _sigmoid_np(x),)

    return Var(out, (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    out = _sigmoid_np(a.value)
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Var) -> Var:
    mask = a.value > 0

    def vjp(g):
        return (np.where(mask, g, 0.0),)

    return Var(np.where(mask, a.value, 0.0), (a,), vjp)


def maximum_const(a: Var, c: float) -> Var:
    mask = a.value > c

    def vjp(g):
        return (np.where(mask, g, 0.0),)

    return Var(np.maximum(a.value, c), (a,), vjp)


def clip_min(a: Var, c: float) -> Var:
    return maximum_const(a, c)


def one_minus_exp_neg(a: Var) -> Var:
    """1 - exp(-x), via expm1 for accuracy near zero."""
    e = np.exp(-a.value)
    out = -np.expm1(-a.value)
    return Var(out, (a,), lambda g: (g * e,))


# ---------------------------------------------------------------------------
# Reductions and shape plumbing


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(np.asarray(out, dtype=np.float64), (a,), vjp)


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def sqsum(a: Var, axis: int = -1) -> Var:
    """Sum of squares along one axis (squared Euclidean norm)."""
    out = np.sum(a.value * a.value, axis=axis)

    def vjp(g):
        return (2.0 * a.value * np.expand_dims(g, axis),)

    return Var(out, (a,), vjp)


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def narrow(a: Var, key) -> Var:
    """Static slicing; ``key`` is any basic-index expression."""

    def vjp(g):
        full = np.zeros_like(a.value)
        full[key] = g
        return (full,)

    return Var(a.value[key], (a,), vjp)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate(values, axis=axis), tuple(parts), vjp)


def cumsum(a: Var, axis: int = -1) -> Var:
    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Var(np.cumsum(a.value, axis=axis), (a,), vjp)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Select rows of a 2D (or 1D) array by integer index, with repeats."""

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), vjp)


def take_along(a: Var, idx: np.ndarray) -> Var:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    rows = np.arange(a.value.shape[0])

    def vjp(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g
        return (out,)

    return Var(a.value[rows, idx], (a,), vjp)


# ---------------------------------------------------------------------------
# Fused numeric ops


def linear(x: Var, w: Var, b: Var) -> Var:
    """x @ w + b for 2D x, with the whole layer as one graph node."""
    out = x.value @ w.value
    out += b.value

    def vjp(g):
        gx = g @ w.value.T if x.requires else None
        gw = x.value.T @ g if w.requires else None
        gb = g.sum(axis=0) if b.requires else None
        return (gx, gw, gb)

    return Var(out, (x, w, b), vjp)


def matmul(a: Var, b: Var) -> Var:
    def vjp(g):
        ga = g @ b.value.T if a.requires else None
        gb = a.value.T @ g if b.requires else None
        return (ga, gb)

    return Var(a.value @ b.value, (a, b), vjp)


def pairwise_sqdist(a: Var, b: Var) -> Var:
    """All-pairs squared Euclidean distances: out[i, j] = ||a_i - b_j||^2."""
    aa = np.sum(a.value * a.value, axis=1)
    bb = np.sum(b.value * b.value, axis=1)
    out = aa[:, None] + bb[None, :] - 2.0 * (a.value @ b.value.T)
    np.maximum(out, 0.0, out=out)

    def vjp(g):
        rs = g.sum(axis=1)
        cs = g.sum(axis=0)
        ga = 2.0 * (a.value * rs[:, None] - g @ b.value) if a.requires else None
        gb = 2.0 * (b.value * cs[:, None] - g.T @ a.value) if b.requires else None
        return (ga, gb)

    return Var(out, (a, b), vjp)


def logsumexp(a: Var, axis: int = -1, mask: np.ndarray | None = None) -> Var:
    """Stable log-sum-exp along an axis, optionally over a boolean mask.

    Rows whose mask is entirely False yield -inf; callers are expected to
    filter such rows out beforehand.  The max shift is treated as a constant,
    which leaves the derivative exact.
    """
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m_safe)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m_safe + np.log(s), axis=axis)

    def vjp(g):
        soft = e / s
        return (np.expand_dims(g, axis) * soft,)

    return Var(out, (a,), vjp)


def softmax(a: Var, axis: int = -1) -> Var:
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Var(out, (a,), vjp)


def render_combine(w: Var, f: Var) -> Var:
    """Weighted sum over samples: out[b, c] = sum_s w[b, s] * f[b, s, c]."""
    out = np.einsum("bs,bsc->bc", w.value, f.value, optimize=True)

    def vjp(g):
        gw = np.einsum("bc,bsc->bs", g, f.value, optimize=True) if w.requires else None
        gf = w.value[:, :, None] * g[:, None, :] if f.requires else None
        return (gw, gf)

    return Var(out, (w, f), vjp)


def trilerp(grid: Var, coords: np.ndarray, inside: np.ndarray) -> Var:
    """Trilinear interpolation of a voxel grid at continuous grid coordinates.

    ``grid`` has shape (nx, ny, nz) or (nx, ny, nz, C); ``coords`` is (P, 3)
    in grid units (0 .. n-1 per axis); ``inside`` is a (P,) boolean mask and
    rows outside contribute zero value and zero gradient.  Interpolation runs
    on the raw stored values; activations happen downstream, so a query at a
    vertex reproduces the stored value exactly.
    """
    shape = grid.value.shape
    nx, ny, nz = shape[:3]
    channels = shape[3] if len(shape) == 4 else 0
    c = np.clip(coords, 0.0, np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64))
    i0 = np.minimum(c.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    np.maximum(i0, 0, out=i0)
    t = c - i0
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    wx = np.stack([1.0 - tx, tx], axis=1)
    wy = np.stack([1.0 - ty, ty], axis=1)
    wz = np.stack([1.0 - tz, tz], axis=1)
    # (P, 8) corner weights, corner order (dx, dy, dz) in binary.
    wgt = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    wgt = wgt * inside[:, None]

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = np.array([(dx * ny + dy) * nz + dz for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
    idx = base[:, None] + offs[None, :]

    flat = grid.value.reshape(nx * ny * nz, channels) if channels else grid.value.reshape(-1)
    if channels:
        out = np.einsum("pk,pkc->pc", wgt, flat[idx], optimize=True)
    else:
        out = (wgt * flat[idx]).sum(axis=1)

    def vjp(g):
        gflat = np.zeros_like(flat)
        if channels:
            contrib = wgt[:, :, None] * g[:, None, :]
            np.add.at(gflat, idx.ravel(), contrib.reshape(-1, channels))
        else:
            np.add.at(gflat, idx.ravel(), (wgt * g[:, None]).ravel())
        return (gflat.reshape(shape),)

    return Var(out, (grid,), vjp)
