"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus an optional gradient slot. Every
operation records a vector-Jacobian-product closure; :func:`backward` replays
the graph in reverse topological order with a deterministic (sequential)
accumulation order. All arithmetic is float64.

Conventions that callers rely on:

* ``clip`` uses a one-sided subgradient: the gradient passes through wherever
  ``lo <= x <= hi`` (closed interval) and is zero outside it.
* ``segment_sum`` requires contiguous segments (sorted segment ids) so the
  reduction order is fixed.
* Calling :func:`backward` twice on the same graph raises; the graph is
  released after the first pass.
"""

from __future__ import annotations

import contextlib

import numpy as np


class _GradMode:
    enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracle evals)."""
    prev = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, e):
        return pow_scalar(self, e)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _node(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, e: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(e, Tensor):
        raise TypeError("pow supports scalar exponents only")
    out = a.data ** e

    def vjp(g):
        return (g * e * a.data ** (e - 1.0),)

    return _node(out, (a,), vjp)


# --- matmul ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a (..., n) @ b (n, p)``; ``b`` must be a 2-D weight matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[-1])
            gb = a2.T @ g2
        return ga, gb

    return _node(out, (a, b), vjp)


# --- reductions / shape ------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(ts), vjp)


# --- nonlinearities ----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


def log1p(a) -> Tensor:
    a = as_tensor(a)
    out = np.log1p(a.data)

    def vjp(g):
        return (g / (1.0 + a.data),)

    return _node(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(log sigmoid(x)); stable in both tails
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * _sigmoid(a.data),)

    return _node(out, (a,), vjp)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node(out, (a,), vjp)


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp with pass-through subgradient on the closed interval [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi

    def vjp(g):
        return (g * mask,)

    return _node(out, (a,), vjp)


# --- gather / scatter --------------------------------------------------------

def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; the adjoint scatter-adds duplicates."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis if axis >= 0 else a.ndim + axis
    out = np.take(a.data, idx, axis=ax)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * ax + (idx,), g)
        return (ga,)

    return _node(out, (a,), vjp)


def take_per_row(a, indices) -> Tensor:
    """Per-row gather: ``a (B, N, ...)`` with ``indices (B, K)`` -> (B, K, ...)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _node(out, (a,), vjp)


def segment_sum(a, starts, counts, axis: int = 0) -> Tensor:
    """Sum contiguous runs along ``axis``; run ``k`` spans ``starts[k]`` for
    ``counts[k]`` entries. Runs must tile the axis in order."""
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.intp)
    ax = axis if axis >= 0 else a.ndim + axis
    if starts.size == 0 or counts.sum() != a.shape[ax] or starts[0] != 0:
        raise ValueError("segments must tile the reduced axis")
    out = np.add.reduceat(a.data, starts, axis=ax)

    def vjp(g):
        return (np.repeat(g, counts, axis=ax),)

    return _node(out, (a,), vjp)


def shift_tokens(a, steps: int, axis: int = 1) -> Tensor:
    """Shift forward along ``axis`` by ``steps``, zero-filling the front."""
    a = as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    if steps == 0:
        return _node(a.data.copy(), (a,), lambda g: (g,))
    out = np.zeros_like(a.data)
    head = [slice(None)] * a.ndim
    tail = [slice(None)] * a.ndim
    head[ax] = slice(steps, None)
    tail[ax] = slice(None, -steps)
    out[tuple(head)] = a.data[tuple(tail)]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[tuple(tail)] = g[tuple(head)]
        return (ga,)

    return _node(out, (a,), vjp)


# --- sequential scan ---------------------------------------------------------

def selective_scan(dt, a_diag, b_in, c_out, u) -> Tensor:
    """Input-dependent diagonal state-space scan.

    Shapes: ``dt (B, N, C)``, ``a_diag (C, S)``, ``b_in (B, N, S)``,
    ``c_out (B, N, S)``, ``u (B, N, C)``. Recurrence over positions j::

        h_j = exp(dt_j * a) * h_{j-1} + (dt_j * u_j) x b_j,   h_{-1} = 0
        y_j[c] = sum_s h_j[c, s] * c_j[s]

    Sequential in j (causal), O(N * B * C * S) time. The backward pass
    replays the recurrence in reverse, so only the state history is stored.
    """
    dt, a_diag = as_tensor(dt), as_tensor(a_diag)
    b_in, c_out, u = as_tensor(b_in), as_tensor(c_out), as_tensor(u)
    B, N, C = dt.shape
    S = a_diag.shape[1]
    # the state history is only needed by the backward pass
    keep_hist = _GradMode.enabled and any(
        t.requires_grad for t in (dt, a_diag, b_in, c_out, u))
    hist = np.empty((B, N, C, S)) if keep_hist else np.empty((B, 1, C, S))
    y = np.empty((B, N, C))
    a = a_diag.data
    dtu = dt.data * u.data
    prev = np.zeros((B, C, S))
    buf = np.empty((B, C, S))
    for j in range(N):
        hj = hist[:, j] if keep_hist else hist[:, 0]
        np.multiply(dt.data[:, j, :, None], a, out=buf)
        np.exp(buf, out=buf)
        # hj may alias prev (no-history mode); same-position elementwise is safe
        np.multiply(buf, prev, out=hj)
        hj += dtu[:, j, :, None] * b_in.data[:, j, None, :]
        np.einsum("bcs,bs->bc", hj, c_out.data[:, j], out=y[:, j])
        prev = hj

    def vjp(g):
        g_dt = np.zeros((B, N, C))
        g_a = np.zeros((C, S))
        g_b = np.empty((B, N, S))
        g_c = np.empty((B, N, S))
        g_u = np.empty((B, N, C))
        s_adj = np.zeros((B, C, S))
        for j in range(N - 1, -1, -1):
            s_adj += g[:, j, :, None] * c_out.data[:, j, None, :]
            if c_out.requires_grad:
                np.einsum("bc,bcs->bs", g[:, j], hist[:, j], out=g_c[:, j])
            dtj = dt.data[:, j, :, None]
            abar = np.exp(dtj * a)
            if j > 0:
                g_abar = s_adj * hist[:, j - 1]
                if dt.requires_grad:
                    np.einsum("bcs,bcs,cs->bc", g_abar, abar, a, out=g_dt[:, j])
                if a_diag.requires_grad:
                    g_a += np.einsum("bcs,bcs,bc->cs", g_abar, abar, dt.data[:, j])
            if b_in.requires_grad:
                np.einsum("bcs,bc->bs", s_adj, dtu[:, j], out=g_b[:, j])
            g_du = np.einsum("bcs,bs->bc", s_adj, b_in.data[:, j])
            if dt.requires_grad:
                g_dt[:, j] += g_du * u.data[:, j]
            g_u[:, j] = g_du * dt.data[:, j]
            s_adj *= abar
        return (g_dt if dt.requires_grad else None,
                g_a if a_diag.requires_grad else None,
                g_b if b_in.requires_grad else None,
                g_c if c_out.requires_grad else None,
                g_u if u.requires_grad else None)

    return _node(y, (dt, a_diag, b_in, c_out, u), vjp)


# --- composites --------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then optional affine."""
    mu = mean_(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    out = mul(centered, pow_scalar(add(var, eps), -0.5))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# --- backward ----------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dp into ``.grad`` of every reachable parameter.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any parameter")
    if loss.grad is not None:
        raise RuntimeError("backward called twice on the same graph")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        if node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # adopt fresh arrays; copy anything aliasing the incoming
                # gradient (identity pass-through or a view of it)
                if g is node.grad or g.base is not None:
                    parent.grad = np.array(g, copy=True)
                else:
                    parent.grad = g
            else:
                parent.grad += g
        # release closures so a repeated backward fails loudly
        node._vjp = None
        node._parents = ()
        if node is not loss:
            node.grad = None
