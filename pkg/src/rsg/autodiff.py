"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

Implements exactly the operations the rare-sample generation math needs:
convolutions, affine maps, softmax, pooling, channel-wise geometry
(per-location norms and dot products), elementwise arithmetic, and scalar
reductions.  The graph is rebuilt on every call (define-by-run); gradients
accumulate additively until explicitly zeroed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operation inputs whose shapes do not conform to the op kind."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class OpNode:
    """Record of one operation: kind, input tensors, and its backward rule.

    ``backward(out_grad)`` returns one gradient array (or None) per input.
    """

    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """Dense n-dimensional float64 array in a differentiable computation.

    grad is allocated on demand during backpropagation and accumulates
    additively across backward passes until zero_grad() is called.
    """

    __slots__ = ("values", "grad", "requires_grad", "node")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def detach(self):
        """Value copy of this tensor, cut from the graph."""
        t = Tensor(self.values.copy())
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))


def parameter(values, rng=None):
    """Trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


def constant(values):
    return Tensor(values, requires_grad=False)


def _make(values, kind, inputs, backward):
    out = Tensor(values)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind, inputs, backward)
    return out


def _check(cond, kind, msg, *shapes):
    if not cond:
        detail = ", ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"op '{kind}': {msg} (got shapes {detail})")


@dataclass
class Graph:
    """Topologically ordered operation records reachable from one output."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        """Collect the ancestors of ``output`` in topological order."""
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if id(inp) not in visited:
                        stack.append((inp, False))
        return cls(nodes=order)


def backpropagate(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every leaf requiring grad."""
    if loss.shape != ():
        raise ShapeError(
            f"op 'backpropagate': loss must be a scalar (got shape {loss.shape})"
        )
    graph = Graph.trace(loss)
    loss.grad = np.asarray(1.0) if loss.grad is None else loss.grad + 1.0
    for t in reversed(graph.nodes):
        if t.node is None or t.grad is None:
            continue
        grads = t.node.backward(t.grad)
        for inp, g in zip(t.node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _check(a.shape == b.shape, "add", "operands must match", a.shape, b.shape)
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _check(a.shape == b.shape, "sub", "operands must match", a.shape, b.shape)
    return _make(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _check(a.shape == b.shape, "mul", "operands must match", a.shape, b.shape)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    _check(a.shape == b.shape, "div", "operands must match", a.shape, b.shape)
    av, bv = a.values, b.values
    return _make(av / bv, "div", (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x, c):
    c = float(c)
    return _make(x.values * c, "scale", (x,), lambda g: (g * c,))


def shift(x, c):
    return _make(x.values + float(c), "shift", (x,), lambda g: (g,))


def neg(x):
    return scale(x, -1.0)


def absolute(x):
    # subgradient at 0 is 0 (sign(0) == 0)
    xv = x.values
    return _make(np.abs(xv), "abs", (x,), lambda g: (g * np.sign(xv),))


def relu(x):
    xv = x.values
    return _make(np.maximum(xv, 0.0), "relu", (x,), lambda g: (g * (xv > 0),))


def log(x):
    xv = x.values
    return _make(np.log(xv), "log", (x,), lambda g: (g / xv,))


def clamp_min(x, c):
    c = float(c)
    xv = x.values
    return _make(np.maximum(xv, c), "clamp_min", (x,), lambda g: (g * (xv > c),))


def pow_scalar(x, c):
    c = float(c)
    xv = x.values
    if c == 0.0:
        return _make(np.ones_like(xv), "pow", (x,), lambda g: (np.zeros_like(xv),))
    return _make(
        xv**c, "pow", (x,), lambda g: (g * c * xv ** (c - 1.0),)
    )


# ---------------------------------------------------------------------------
# structural


def reshape(x, shape):
    shape = tuple(shape)
    _check(
        int(np.prod(shape, dtype=np.int64)) == x.values.size,
        "reshape", "size must be preserved", x.shape, shape,
    )
    old = x.shape
    return _make(
        x.values.reshape(shape).copy(), "reshape", (x,),
        lambda g: (g.reshape(old),),
    )


def transpose2d(x):
    _check(x.ndim == 2, "transpose", "input must be 2-d", x.shape)
    return _make(
        np.ascontiguousarray(x.values.T), "transpose", (x,),
        lambda g: (np.ascontiguousarray(g.T),),
    )


def concat(tensors, axis=0):
    tensors = list(tensors)
    _check(len(tensors) >= 1, "concat", "needs at least one input")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ok = len(other) == len(base) and all(
            o == b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        )
        _check(ok, "concat", f"shapes must match off axis {axis}",
               tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.values for t in tensors], axis=axis),
        "concat", tensors, backward,
    )


def index_select(x, idx):
    """Gather rows along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    xshape = x.shape

    def backward(g):
        d = np.zeros(xshape, dtype=np.float64)
        np.add.at(d, idx, g)
        return (d,)

    return _make(x.values[idx], "index_select", (x,), backward)


def take_per_row(x, idx):
    """out[i] = x[i, idx[i]] for a 2-d input."""
    _check(x.ndim == 2, "take_per_row", "input must be 2-d", x.shape)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    _check(idx.shape == (n,), "take_per_row", "one index per row",
           x.shape, idx.shape)
    rows = np.arange(n)
    xshape = x.shape

    def backward(g):
        d = np.zeros(xshape, dtype=np.float64)
        d[rows, idx] = g
        return (d,)

    return _make(x.values[rows, idx], "take_per_row", (x,), backward)


def broadcast_to_batch(x, n):
    """Tile along a new leading axis: (...) -> (n, ...)."""
    out = np.broadcast_to(x.values[None], (n,) + x.shape).copy()
    return _make(out, "broadcast_to_batch", (x,), lambda g: (g.sum(axis=0),))


def upsample_vector(v, h, w):
    """Repeat channel vectors over a spatial grid: (N, D) -> (N, D, h, w)."""
    _check(v.ndim in (1, 2), "upsample", "input must be (D,) or (N, D)", v.shape)
    if v.ndim == 1:
        out = np.broadcast_to(v.values[:, None, None], v.shape + (h, w)).copy()
        return _make(out, "upsample", (v,), lambda g: (g.sum(axis=(1, 2)),))
    out = np.broadcast_to(v.values[:, :, None, None], v.shape + (h, w)).copy()
    return _make(out, "upsample", (v,), lambda g: (g.sum(axis=(2, 3)),))


def broadcast_channels(v, n, h, w):
    """(C,) -> (n, C, h, w) by repetition."""
    _check(v.ndim == 1, "broadcast_channels", "input must be 1-d", v.shape)
    out = np.broadcast_to(v.values[None, :, None, None], (n, v.shape[0], h, w)).copy()
    return _make(out, "broadcast_channels", (v,), lambda g: (g.sum(axis=(0, 2, 3)),))


# ---------------------------------------------------------------------------
# matrix / nn


def matmul(a, b):
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", "inner dimensions must agree", a.shape, b.shape)
    av, bv = a.values, b.values
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_rowvec(x, v):
    _check(x.ndim == 2 and v.ndim == 1 and x.shape[1] == v.shape[0],
           "add_rowvec", "vector must match columns", x.shape, v.shape)
    return _make(x.values + v.values[None, :], "add_rowvec", (x, v),
                 lambda g: (g, g.sum(axis=0)))


def add_colvec(x, v):
    _check(x.ndim == 2 and v.ndim == 1 and x.shape[0] == v.shape[0],
           "add_colvec", "vector must match rows", x.shape, v.shape)
    return _make(x.values + v.values[:, None], "add_colvec", (x, v),
                 lambda g: (g, g.sum(axis=1)))


def linear(x, w, b):
    """Affine map with torch-style weight layout: (N, in) @ (out, in)^T + b."""
    return add_rowvec(matmul(x, transpose2d(w)), b)


def _im2col(xp, kh, kw, stride, out_h, out_w):
    n, c = xp.shape[:2]
    cols = np.empty((n, out_h, out_w, c, kh, kw), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, :, dy, dx] = xp[
                :, :, dy:dy + stride * out_h:stride, dx:dx + stride * out_w:stride
            ].transpose(0, 2, 3, 1)
    return cols.reshape(n * out_h * out_w, c * kh * kw)


def conv2d(x, w, b=None, stride=1, padding=1):
    """2-d cross-correlation over (N, C, H, W) input, (Cout, Cin, kh, kw) filters.

    3-d input (C, H, W) is treated as a batch of one.
    """
    single = x.ndim == 3
    xv = x.values[None] if single else x.values
    _check(xv.ndim == 4 and w.ndim == 4, "conv2d",
           "input must be (N, C, H, W), filters (Cout, Cin, kh, kw)",
           x.shape, w.shape)
    n, cin, height, width = xv.shape
    cout, cin_w, kh, kw = w.shape
    _check(cin == cin_w, "conv2d", "in-channel mismatch", x.shape, w.shape)
    if b is not None:
        _check(b.shape == (cout,), "conv2d", "bias must be (Cout,)",
               b.shape, w.shape)
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    _check(out_h > 0 and out_w > 0, "conv2d", "kernel larger than padded input",
           x.shape, w.shape)

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = w.values.reshape(cout, cin * kh * kw)
    out_mat = cols @ wmat.T
    if b is not None:
        out_mat = out_mat + b.values[None, :]
    out = out_mat.reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)

    pad_h, pad_w = xp.shape[2], xp.shape[3]
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        if single:
            g = g[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, cout)
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(n, out_h, out_w, cin, kh, kw)
        dxp = np.zeros((n, cin, pad_h, pad_w), dtype=np.float64)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, :, dy:dy + stride * out_h:stride,
                    dx:dx + stride * out_w:stride] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + height, padding:padding + width]
        if single:
            dx = dx[0]
        if b is None:
            return (np.ascontiguousarray(dx), dw)
        return (np.ascontiguousarray(dx), dw, gmat.sum(axis=0))

    return _make(out[0] if single else out, "conv2d", inputs, backward)


def global_avg_pool(x):
    """Mean over the spatial grid: (N, C, H, W) -> (N, C) or (C, H, W) -> (C,)."""
    single = x.ndim == 3
    xv = x.values[None] if single else x.values
    _check(xv.ndim == 4, "global_avg_pool", "input must be (N, C, H, W)", x.shape)
    n, c, h, w = xv.shape
    out = xv.mean(axis=(2, 3))

    def backward(g):
        if single:
            g = g[None]
        d = np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy()
        return (d[0] if single else d,)

    return _make(out[0] if single else out, "global_avg_pool", (x,), backward)


def softmax(x):
    """Softmax along the last axis."""
    xv = x.values
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    xshape = x.shape
    return _make(
        np.asarray(x.values.sum()), "sum", (x,),
        lambda g: (np.full(xshape, float(g)),),
    )


def mean_all(x):
    xshape = x.shape
    size = x.values.size
    return _make(
        np.asarray(x.values.mean()), "mean", (x,),
        lambda g: (np.full(xshape, float(g) / size),),
    )


def sum_per_sample(x):
    """Sum everything but the leading axis: (N, ...) -> (N,)."""
    _check(x.ndim >= 1, "sum_per_sample", "input must have a leading axis", x.shape)
    n = x.shape[0]
    xshape = x.shape

    def backward(g):
        return (np.broadcast_to(g.reshape((n,) + (1,) * (len(xshape) - 1)), xshape).copy(),)

    return _make(x.values.reshape(n, -1).sum(axis=1), "sum_per_sample", (x,), backward)


def channel_mean(x):
    """Per-channel mean over batch and space: (N, C, H, W) -> (C,)."""
    _check(x.ndim == 4, "channel_mean", "input must be (N, C, H, W)", x.shape)
    n, c, h, w = x.shape
    denom = n * h * w

    def backward(g):
        return (np.broadcast_to(g[None, :, None, None] / denom, (n, c, h, w)).copy(),)

    return _make(x.values.mean(axis=(0, 2, 3)), "channel_mean", (x,), backward)


def channel_affine(x, s, t):
    """y[n,c,h,w] = x[n,c,h,w] * s[c] + t[c]."""
    _check(x.ndim == 4 and s.ndim == 1 and t.ndim == 1
           and x.shape[1] == s.shape[0] == t.shape[0],
           "channel_affine", "scale/shift must match channels",
           x.shape, s.shape, t.shape)
    xv, sv = x.values, s.values

    def backward(g):
        return (
            g * sv[None, :, None, None],
            (g * xv).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return _make(xv * sv[None, :, None, None] + t.values[None, :, None, None],
                 "channel_affine", (x, s, t), backward)


def channel_norm(x):
    """Per-location L2 norm over channels: (N, D, H, W) -> (N, H, W)."""
    _check(x.ndim == 4, "channel_norm", "input must be (N, D, H, W)", x.shape)
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=1))
    safe = np.maximum(norm, 1e-12)

    def backward(g):
        return (g[:, None, :, :] * xv / safe[:, None, :, :],)

    return _make(norm, "channel_norm", (x,), backward)


def channel_dot(a, b):
    """Per-location dot product over channels: (N, D, H, W)^2 -> (N, H, W)."""
    _check(a.shape == b.shape and a.ndim == 4, "channel_dot",
           "operands must be matching (N, D, H, W)", a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g):
        return (g[:, None, :, :] * bv, g[:, None, :, :] * av)

    return _make((av * bv).sum(axis=1), "channel_dot", (a, b), backward)


# ---------------------------------------------------------------------------
# dispatch

_OP_REGISTRY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "shift": shift,
    "abs": absolute,
    "relu": relu,
    "log": log,
    "clamp_min": clamp_min,
    "pow": pow_scalar,
    "reshape": reshape,
    "transpose": transpose2d,
    "concat": concat,
    "index_select": index_select,
    "take_per_row": take_per_row,
    "broadcast_to_batch": broadcast_to_batch,
    "broadcast_channels": broadcast_channels,
    "upsample": upsample_vector,
    "matmul": matmul,
    "add_rowvec": add_rowvec,
    "add_colvec": add_colvec,
    "linear": linear,
    "conv2d": conv2d,
    "global_avg_pool": global_avg_pool,
    "softmax": softmax,
    "sum": sum_all,
    "mean": mean_all,
    "sum_per_sample": sum_per_sample,
    "channel_mean": channel_mean,
    "channel_affine": channel_affine,
    "channel_norm": channel_norm,
    "channel_dot": channel_dot,
}


def forward_op(kind, inputs, params=None):
    """Dispatch an op by name; records a graph node when any input needs grad."""
    if kind not in _OP_REGISTRY:
        raise ValueError(f"unknown op kind '{kind}'")
    fn = _OP_REGISTRY[kind]
    params = params or {}
    if kind == "concat":
        return fn(inputs, **params)
    return fn(*inputs, **params)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_difference_check(f, point, step, coords=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  The
    error at a coordinate is |analytic - central| / max(1, |central|); the
    maximum over the checked coordinates is returned.  ``coords`` restricts
    the check to a subset of flat coordinate indices (all by default).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.values.copy(), requires_grad=True)
    out = f(x)
    if out.shape != ():
        raise ShapeError(
            f"op 'finite_difference_check': f must be scalar-valued "
            f"(got shape {out.shape})"
        )
    backpropagate(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.values)).ravel()

    flat = x.values.ravel().copy()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            f_plus = f(Tensor(flat.reshape(point.shape))).item()
        flat[i] = orig - step
        with no_grad():
            f_minus = f(Tensor(flat.reshape(point.shape))).item()
        flat[i] = orig
        central = (f_plus - f_minus) / (2.0 * step)
        if not np.isfinite(central) or not np.isfinite(analytic[i]):
            raise FloatingPointError(
                f"non-finite value in finite-difference check at coordinate {i}"
            )
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
