"""Minimal reverse-mode differentiation over a fixed set of dense ops.

Every op takes :class:`Tensor` inputs, computes its value eagerly in float64
and records a closure that maps the output gradient to input gradients.
Shapes must match exactly; there is no implicit broadcasting. Constant
operands that are broadcast (``affine``) say so in their signature.

Conventions: relu'(0) = 0; maxpool ties go to the first element of the
window in row-major order.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import kernels

OP_KINDS = (
    "conv2d", "dense", "relu", "maxpool2x2", "sigmoid", "exp_scale", "log",
    "add", "mul", "sum", "normalize_l1", "sq_dist", "softmax_ce",
    "gather_patches", "scatter_stitch", "affine", "reshape", "clip01",
)

# number of backward() invocations; attacks that must stay gradient-free are
# checked against it
BACKWARD_CALLS = 0


class ShapeError(ValueError):
    """Operand shapes are invalid for an op."""

    def __init__(self, op, message):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class Tensor:
    __slots__ = ("data", "parents", "op", "_backward", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"


def const(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def param(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(op, value, parents, backward):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=rg, parents=parents if rg else (), op=op,
                  backward=backward if rg else None)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(seed):
    """Back-propagate from a scalar node; fills ``.grad`` on every leaf.

    Leaves that require grad but do not reach ``seed`` get a zero gradient
    only if passed to :func:`grad`; here they keep ``grad = None``.
    """
    global BACKWARD_CALLS
    if seed.data.size != 1:
        raise ShapeError("backward", f"seed must be scalar, got shape {seed.shape}")
    BACKWARD_CALLS += 1
    grads = {id(seed): np.ones_like(seed.data)}
    for node in reversed(_toposort(seed)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return seed


def grad(seed, wrt):
    """Gradients of scalar ``seed`` with respect to each tensor in ``wrt``."""
    for t in wrt:
        t.grad = None
    backward(seed)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


# -- elementwise ---------------------------------------------------------

def sigmoid_fwd(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = sigmoid_fwd(x.data)
    return _node("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp_scale(x, beta):
    """exp(beta * x) elementwise."""
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
        e = np.exp(beta * x.data)
    return _node("exp_scale", e, (x,), lambda g: (g * beta * e,))


def log(x):
    if np.any(x.data <= 0):
        raise NonFiniteError("log")
    return _node("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip01(x):
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return _node("clip01", np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    _same_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def affine(x, scale, shift):
    """x * scale + shift with constant ``scale``/``shift`` over trailing dims."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    tail = x.shape[x.data.ndim - scale.ndim:] if scale.ndim else ()
    if scale.shape != tail or shift.shape != scale.shape:
        raise ShapeError("affine", f"scale {scale.shape} / shift {shift.shape} do not match trailing dims of {x.shape}")
    return _node("affine", x.data * scale + shift, (x,), lambda g: (g * scale,))


def reshape(x, shape):
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}")
    return _node("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x):  # noqa: A001 - op name
    return _node("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def normalize_l1(x):
    """Divide by the sum over the last axis (inputs must be positive)."""
    s = x.data.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ShapeError("normalize_l1", "row sums must be positive")
    out = x.data / s

    def bw(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) / s,)

    return _node("normalize_l1", out, (x,), bw)


# -- linear algebra / geometry ------------------------------------------

def sq_dist(z, mu):
    """Pairwise squared distances between rows of z (P, D) and mu (F, D)."""
    if z.data.ndim == 1:
        z = reshape(z, (1, z.data.size))
    if mu.data.ndim == 1:
        mu = reshape(mu, (1, mu.data.size))
    if z.data.ndim != 2 or mu.data.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ShapeError("sq_dist", f"expected (P, D) and (F, D), got {z.shape} and {mu.shape}")
    out = kernels.pairwise_sq_dist(z.data, mu.data)

    def bw(g):
        gz = gm = None
        if z.requires_grad:
            gz = 2.0 * (z.data * g.sum(axis=1, keepdims=True) - g @ mu.data)
        if mu.requires_grad:
            gm = 2.0 * (mu.data * g.sum(axis=0)[:, None] - g.T @ z.data)
        return gz, gm

    return _node("sq_dist", out, (z, mu), bw)


def dense(x, w, b=None):
    """x (N, D) @ w (D, K) + b (K,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("dense", f"cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _node("dense", out, parents, bw)


def conv2d(x, w, b):
    """Valid, stride-1 convolution. x (N, H, W, C), w (kh, kw, C, F), b (F,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, wc, f = w.shape
    if wc != c:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {wc}")
    if kh > h or kw > wd:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than input {h}x{wd}")
    if b.shape != (f,):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({f},)")
    ho, wo = h - kh + 1, wd - kw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, f)
    out = (cols @ wmat + b.data).reshape(n, ho, wo, f)

    def bw(g):
        g2 = g.reshape(n * ho * wo, f)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + ho, j:j + wo, :] += g @ w.data[i, j].T
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _node("conv2d", out, (x, w, b), bw)


def maxpool2x2(x):
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("maxpool2x2", f"needs (N, H, W, C) with even H, W; got {x.shape}")
    n, h, w, c = x.shape
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return _node("maxpool2x2", out, (x,), bw)


def log_softmax_fwd(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_fwd(logits):
    return np.exp(log_softmax_fwd(logits))


def softmax_ce(logits, targets, reduction="mean"):
    """Cross-entropy of softmax(logits) against soft target rows."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if logits.data.ndim != 2 or targets.shape != logits.shape:
        raise ShapeError("softmax_ce", f"logits {logits.shape} vs targets {targets.shape}")
    lsm = log_softmax_fwd(logits.data)
    per = -(targets * lsm).sum(axis=1)
    scale = 1.0 / logits.shape[0] if reduction == "mean" else 1.0
    value = per.sum() * scale

    def bw(g):
        p = np.exp(lsm)
        return (float(g) * scale * (p * targets.sum(axis=1, keepdims=True) - targets),)

    return _node("softmax_ce", np.asarray(value), (logits,), bw)


def gather_patches(x, k):
    """(N, H, W, C) -> (N, P, k*k*C), channel-fastest row-major patches."""
    if x.data.ndim != 4:
        raise ShapeError("gather_patches", f"expected (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    if k > min(h, w) or k < 1:
        raise ShapeError("gather_patches", f"patch size {k} does not fit {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(1, 2))
    out = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, (h - k + 1) * (w - k + 1), k * k * c)
    return _node("gather_patches", out, (x,), lambda g: (kernels.stitch_sum(g, h, w, c, k),))


def scatter_stitch(patches, grid):
    """Overlap-average (N, P, D) patches back onto (N, H, W, C) images."""
    if patches.data.ndim != 3 or patches.shape[1:] != (grid.n_patches, grid.patch_dim):
        raise ShapeError("scatter_stitch", f"patches {patches.shape} do not match grid ({grid.n_patches}, {grid.patch_dim})")
    cover = grid.coverage()[None, :, :, None]
    out = kernels.stitch_sum(patches.data, grid.image_h, grid.image_w, grid.channels, grid.k) / cover

    def bw(g):
        x = Tensor(g / cover)
        return (gather_patches(x, grid.k).data,)

    return _node("scatter_stitch", out, (patches,), bw)
