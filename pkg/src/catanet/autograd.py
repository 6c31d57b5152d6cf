"""Tape-based reverse-mode differentiation over the ops primitives.

A forward pass run inside a `Tape` context appends one `Node` per op in
execution order; `backward` walks the tape in reverse, so topological
order is the append order by construction. Outside a tape the same
functions run pure forward (no parents, no backward closures), which is
the inference path.

Group assignment, argmax and EMA center updates happen outside the tape
entirely, so they are hard gradient barriers: attention weights inside
groups stay differentiable while the index sets are constants.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Node:
    """One tape entry: an op output plus what backward needs."""

    __slots__ = ("value", "op", "parents", "backward_fn", "name")

    def __init__(self, value, op="leaf", parents=(), backward_fn=None, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only op record for one forward pass. Single-threaded."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


_ACTIVE: Tape | None = None


def parameter(value, name: str) -> Node:
    """A named leaf that the optimizer updates in place."""
    return Node(ops.as_tensor(value), op="param", name=name)


def constant(value) -> Node:
    """A leaf that participates in the graph but is never trained (buffers, data)."""
    return Node(ops.as_tensor(value), op="const")


def barrier(value) -> Node:
    """A leaf flagged non-differentiable: backward never records a gradient
    for it (token centers, grouping indices)."""
    return Node(ops.as_tensor(value), op="barrier")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _record(value, op, parents, backward_fn) -> Node:
    if _ACTIVE is None:
        return Node(value, op=op)
    node = Node(value, op=op, parents=tuple(parents), backward_fn=backward_fn)
    _ACTIVE.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _record(out, "add", (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _record(out, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def bw(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _record(out, "mul", (a, b), bw)


def scale(a, s: float) -> Node:
    a = as_node(a)
    s = a.value.dtype.type(s)
    out = a.value * s

    def bw(g):
        return (g * s,)

    return _record(out, "scale", (a,), bw)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = ops.matmul(a.value, b.value)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _record(out, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    y = ops.softmax(x.value, axis=axis)

    def bw(g):
        # Jacobian-vector shortcut: y * (g - <g, y>)
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, "softmax", (x,), bw)


def gelu(x) -> Node:
    x = as_node(x)
    out = ops.gelu(x.value)

    def bw(g):
        return (g * ops.gelu_grad(x.value),)

    return _record(out, "gelu", (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    mu = np.mean(xv, axis=-1, keepdims=True)
    var = np.mean((xv - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = (xv - mu) * inv
    out = (xhat * gamma.value + beta.value).astype(xv.dtype, copy=False)

    def bw(g):
        dgamma = _unbroadcast(g * xhat, gamma.value.shape)
        dbeta = _unbroadcast(g, beta.value.shape)
        dxhat = g * gamma.value
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx.astype(xv.dtype, copy=False), dgamma, dbeta

    return _record(out, "layer_norm", (x, gamma, beta), bw)


def masked_fill(x, keep: np.ndarray) -> Node:
    """Where `keep` is False, replace with -inf (for pre-softmax logits)."""
    x = as_node(x)
    out = np.where(keep, x.value, x.value.dtype.type(-np.inf))

    def bw(g):
        return (np.where(keep, g, 0.0).astype(x.value.dtype, copy=False),)

    return _record(out, "masked_fill", (x,), bw)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x, weight, bias=None, pad: int | None = None) -> Node:
    x, weight = as_node(x), as_node(weight)
    bias = as_node(bias) if bias is not None else None
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = ops.conv2d(x.value, weight.value, None if bias is None else bias.value, pad=pad)
    c_out, c_in, k, _ = weight.value.shape
    _, h, w = x.value.shape
    p = k // 2 if pad is None else pad

    def bw(g):
        g2d = g.reshape(c_out, h * w).T
        col = ops._im2col(x.value, k, p)
        dw = (g2d.T @ col).reshape(weight.value.shape)
        dcol = g2d @ weight.value.reshape(c_out, -1)
        dx = ops._col2im(dcol, c_in, h, w, k, p)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    return _record(out, "conv2d", parents, bw)


def depthwise_conv2d(x, weight, bias=None) -> Node:
    x, weight = as_node(x), as_node(weight)
    bias = as_node(bias) if bias is not None else None
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = ops.depthwise_conv2d(x.value, weight.value, None if bias is None else bias.value)
    c, h, w = x.value.shape

    def bw(g):
        xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1)))
        s0, s1, s2 = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp, shape=(c, h, w, 3, 3), strides=(s0, s1, s2, s1, s2)
        )
        dw = np.einsum("chwij,chw->cij", win, g).astype(weight.value.dtype, copy=False)
        dxp = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + h, j : j + w] += g * weight.value[:, i, j][:, None, None]
        dx = dxp[:, 1 : 1 + h, 1 : 1 + w]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    return _record(out, "dwconv2d", parents, bw)


# ---------------------------------------------------------------------------
# structural ops (pure reindexing; backward is the inverse reindex)


def reshape(x, shape) -> Node:
    x = as_node(x)
    out = x.value.reshape(shape)

    def bw(g):
        return (g.reshape(x.value.shape),)

    return _record(out, "reshape", (x,), bw)


def transpose(x, axes) -> Node:
    x = as_node(x)
    axes = tuple(axes)
    out = x.value.transpose(axes)  # view; BLAS consumers handle strides
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, "transpose", (x,), bw)


def contiguous(x) -> Node:
    """Copy into C order; a layout canonicalization point, values unchanged."""
    x = as_node(x)
    out = np.ascontiguousarray(x.value)

    def bw(g):
        return (g,)

    return _record(out, "contiguous", (x,), bw)


def take(x, idx, axis: int = 0) -> Node:
    """Gather along `axis` with integer indices; backward scatter-adds."""
    x = as_node(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(x.value, idx, axis=axis)

    def bw(g):
        dx = np.zeros_like(x.value)
        moved = np.moveaxis(dx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (dx,)

    return _record(out, "take", (x,), bw)


def concat(parts, axis: int = 0) -> Node:
    parts = [as_node(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _record(out, "concat", tuple(parts), bw)


def pixel_shuffle(x, r: int) -> Node:
    x = as_node(x)
    out = ops.pixel_shuffle(x.value, r)

    def bw(g):
        return (ops.pixel_unshuffle(g, r),)

    return _record(out, "pixel_shuffle", (x,), bw)


def bicubic_resize(x, scale: float) -> Node:
    x = as_node(x)
    out = ops.bicubic_resize(x.value, scale)
    _, h, w = x.value.shape
    _, h2, w2 = out.shape

    def bw(g):
        wv = ops.resize_matrix(h, h2).astype(g.dtype)
        wh = ops.resize_matrix(w, w2).astype(g.dtype)
        return (np.einsum("ij,cik,kl->cjl", wv, g, wh),)

    return _record(out, "bicubic", (x,), bw)


# ---------------------------------------------------------------------------
# reductions and losses


def summation(x) -> Node:
    x = as_node(x)
    out = np.asarray(x.value.sum(), dtype=x.value.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.value.shape).astype(x.value.dtype, copy=True),)

    return _record(out, "sum", (x,), bw)


def mean(x) -> Node:
    x = as_node(x)
    n = x.value.size
    out = np.asarray(x.value.mean(), dtype=x.value.dtype)

    def bw(g):
        return (np.broadcast_to(g / n, x.value.shape).astype(x.value.dtype, copy=True),)

    return _record(out, "mean", (x,), bw)


def l1_loss(pred, target) -> Node:
    """Mean absolute error; subgradient 0 at exact ties."""
    pred, target = as_node(pred), as_node(target)
    if pred.value.shape != target.value.shape:
        raise ops.DimensionError(
            f"l1_loss shapes differ: {pred.value.shape} vs {target.value.shape}"
        )
    diff = pred.value - target.value
    out = np.asarray(np.abs(diff).mean(), dtype=pred.value.dtype)
    n = pred.value.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s.astype(pred.value.dtype, copy=False), (-s).astype(pred.value.dtype, copy=False)

    return _record(out, "l1_loss", (pred, target), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Node, tape: Tape) -> dict[Node, np.ndarray]:
    """Accumulate gradients of a scalar `loss` for every node on the tape.

    Returns a dict keyed by Node (leaves included). Deterministic: the
    same tape always yields bit-identical gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    by_id: dict[int, Node] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if parent.op == "barrier":
                continue
            pid = id(parent)
            by_id[pid] = parent
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return {by_id[k]: v for k, v in grads.items()}


def grad_check(f, x: np.ndarray, eps: float = 1e-3) -> float:
    """Max relative error between taped gradients of f and central differences.

    f maps a Node (or array) to a scalar Node. The finite-difference side
    runs the same forward in float64, which is the oracle precision.
    """
    x32 = ops.as_tensor(x)
    with Tape() as tape:
        leaf = constant(x32)
        loss = f(leaf)
        grads = backward(loss, tape)
    analytic = grads.get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x32)

    x64 = x32.astype(np.float64)
    flat = x64.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(constant(x64.copy())).value)
        flat[i] = orig - eps
        lo = float(f(constant(x64.copy())).value)
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    fd = fd.reshape(x64.shape)

    a = analytic.astype(np.float64)
    rel = np.abs(a - fd) / (np.abs(a) + np.abs(fd) + 1e-8)
    return float(rel.max())
