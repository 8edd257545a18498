"""Differentiable operations.

Every op is registered under a kind name.  A registered function receives
plain arrays (plus keyword attributes) and returns ``(output, vjp)`` where
``vjp`` maps the output gradient to one gradient per input (``None`` for
inputs that are not differentiable).  ``forward_op`` wraps arrays into
tensors, validates inputs and records the node on the active tape.

Image tensors are NHWC.  Convolution kernels are ``(K, K, C_in, C_out)``;
transposed-convolution kernels are ``(K, K, C_out, C_in)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Node, NonFiniteError, ShapeError, Tensor, active_tape, as_tensor

OpFn = Callable[..., tuple]
REGISTRY: dict[str, OpFn] = {}

CHECK_FINITE = True


def register(kind: str):
    def deco(fn: OpFn) -> OpFn:
        REGISTRY[kind] = fn
        return fn
    return deco


def _is_py_scalar(v) -> bool:
    return isinstance(v, (bool, int, float)) and not isinstance(v, np.generic)


def _coerce_inputs(inputs) -> tuple[Tensor, ...]:
    # python scalars take the dtype of the array operands, so 0.5 * float32 stays
    # float32 and 0.7 * float64 keeps the exact float64 constant
    arrays = [v if isinstance(v, Tensor) else Tensor(v) for v in inputs if not _is_py_scalar(v)]
    if len(arrays) == len(inputs):
        return tuple(arrays)
    floats = [t.data.dtype for t in arrays if np.issubdtype(t.data.dtype, np.floating)]
    dtype = np.result_type(*floats) if floats else None
    return tuple(Tensor(v, dtype=dtype) if _is_py_scalar(v) else (v if isinstance(v, Tensor) else Tensor(v))
                 for v in inputs)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = REGISTRY[kind]
    except KeyError:
        raise KeyError(f"unknown op kind {kind!r}") from None
    tensors = _coerce_inputs(inputs)
    if CHECK_FINITE:
        for t in tensors:
            if not np.isfinite(t.data).all():
                raise NonFiniteError(f"{kind}: non-finite values in input of shape {t.shape}")
    out_data, vjp = fn(*(t.data for t in tensors), **attrs)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in tensors):
        node = Node(kind, tensors, out, vjp, attrs)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(kind: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -----------------------------------------------------

@register("add")
def _add(a, b):
    _broadcast_check("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register("sub")
def _sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@register("mul")
def _mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register("div")
def _div(a, b):
    _broadcast_check("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


# --- elementwise unary ------------------------------------------------------

@register("neg")
def _neg(x):
    return -x, lambda g: (-g,)


@register("power")
def _power(x, exponent: float):
    out = x ** exponent
    return out, lambda g: (g * exponent * x ** (exponent - 1),)


@register("square")
def _square(x):
    return x * x, lambda g: (2 * g * x,)


@register("sqrt")
def _sqrt(x):
    out = np.sqrt(x)
    return out, lambda g: (g * 0.5 / out,)


@register("exp")
def _exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


@register("log")
def _log(x):
    return np.log(x), lambda g: (g / x,)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@register("sigmoid")
def _sigmoid(x):
    s = _sigmoid_array(x)
    return s, lambda g: (g * s * (1 - s),)


@register("relu")
def _relu(x):
    mask = x > 0
    return x * mask, lambda g: (g * mask,)


@register("swish")
def _swish(x):
    s = _sigmoid_array(x)
    out = x * s
    return out, lambda g: (g * (s + x * s * (1 - s)),)


@register("clip")
def _clip(x, lo: float, hi: float):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), lambda g: (g * inside,)


@register("abs")
def _abs(x):
    return np.abs(x), lambda g: (g * np.sign(x),)


# --- reductions and shape ops -----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
def _sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return out, vjp


@register("mean")
def _mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return out, vjp


@register("reshape")
def _reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return out, lambda g: (g.reshape(x.shape),)


@register("transpose")
def _transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.transpose(axes), lambda g: (g.transpose(inv),)


@register("broadcast_to")
def _broadcast_to(x, shape):
    try:
        out = np.broadcast_to(x, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} is not broadcastable to {tuple(shape)}") from None
    return out, lambda g: (_unbroadcast(g, x.shape),)


@register("slice")
def _slice(x, index):
    out = x[index]

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)
    return np.array(out), vjp


@register("concat")
def _concat(*xs, axis=-1):
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    out = np.concatenate(xs, axis=ax)
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


@register("upsample")
def _upsample(x, factor: int):
    n, h, w, c = x.shape
    out = x.repeat(factor, axis=1).repeat(factor, axis=2)
    return out, lambda g: (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)


# --- contractions -----------------------------------------------------------

@register("matmul")
def _matmul(a, b):
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return out, vjp


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding so that out = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, k, stride, padding):
    if padding == "same":
        ho, pt, pb = same_padding(h, k, stride)
        wo, pl, pr = same_padding(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ShapeError(f"conv: kernel {k} larger than input {h}x{w}")
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _im2col(x, k, stride, pads, ho, wo):
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pads) else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    n, c = x.shape[0], x.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _col2im(cols, x_shape, k, stride, pads, ho, wo):
    n, h, w, c = x_shape
    pt, pb, pl, pr = pads
    gxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return gxp[:, pt:pt + h, pl:pl + w, :]


@register("conv2d")
def _conv2d(x, w, stride: int = 1, padding: str = "same"):
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, c = x.shape
    k, cout = w.shape[0], w.shape[3]
    ho, wo, pads = _conv_geometry(h, wd, k, stride, padding)
    cols = _im2col(x, k, stride, pads, ho, wo)
    w2 = w.reshape(k * k * c, cout)
    out = (cols @ w2).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = _col2im(g2 @ w2.T, x.shape, k, stride, pads, ho, wo)
        return gx, gw
    return out, vjp


@register("conv_transpose2d")
def _conv_transpose2d(x, w, stride: int = 1, padding: str = "same"):
    # adjoint of conv2d(y, w) where y has the (larger) output shape
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[2]
    if padding == "same":
        oh, ow = h * stride, wd * stride
    else:
        oh, ow = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo, pads = _conv_geometry(oh, ow, k, stride, padding)
    assert (ho, wo) == (h, wd)
    w2 = w.reshape(k * k * cout, cin)
    out = _col2im(x.reshape(-1, cin) @ w2.T, (n, oh, ow, cout), k, stride, pads, h, wd)

    def vjp(g):
        cols = _im2col(g, k, stride, pads, h, wd)
        gx = (cols @ w2).reshape(x.shape)
        gw = (cols.T @ x.reshape(-1, cin)).reshape(w.shape)
        return gx, gw
    return out, vjp


# --- public functional API ----------------------------------------------------

def add(a, b): return forward_op("add", a, b)
def sub(a, b): return forward_op("sub", a, b)
def mul(a, b): return forward_op("mul", a, b)
def div(a, b): return forward_op("div", a, b)
def neg(x): return forward_op("neg", x)
def power(x, exponent: float): return forward_op("power", x, exponent=float(exponent))
def square(x): return forward_op("square", x)
def sqrt(x): return forward_op("sqrt", x)
def exp(x): return forward_op("exp", x)
def log(x): return forward_op("log", x)
def sigmoid(x): return forward_op("sigmoid", x)
def relu(x): return forward_op("relu", x)
def swish(x): return forward_op("swish", x)
def abs(x): return forward_op("abs", x)
def clip(x, lo: float, hi: float): return forward_op("clip", x, lo=lo, hi=hi)
def sum(x, axis=None, keepdims=False): return forward_op("sum", x, axis=axis, keepdims=keepdims)
def mean(x, axis=None, keepdims=False): return forward_op("mean", x, axis=axis, keepdims=keepdims)
def reshape(x, shape): return forward_op("reshape", x, shape=tuple(shape))
def transpose(x, axes=None): return forward_op("transpose", x, axes=axes)
def broadcast_to(x, shape): return forward_op("broadcast_to", x, shape=tuple(shape))
def slice(x, index): return forward_op("slice", x, index=index)
def concat(xs, axis=-1): return forward_op("concat", *xs, axis=axis)
def upsample(x, factor: int): return forward_op("upsample", x, factor=int(factor))
def matmul(a, b): return forward_op("matmul", a, b)


def conv2d(x, w, stride: int = 1, padding: str = "same"):
    return forward_op("conv2d", x, w, stride=int(stride), padding=padding)


def conv_transpose2d(x, w, stride: int = 1, padding: str = "same"):
    return forward_op("conv_transpose2d", x, w, stride=int(stride), padding=padding)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x):
    return mean(x, axis=(1, 2))


def var(x, axis=None, keepdims=False):
    """Biased variance, composed from differentiable primitives."""
    mu = mean(x, axis=axis, keepdims=True)
    return mean(square(sub(x, mu)), axis=axis, keepdims=keepdims)


def norm_sq(x, axis=None):
    return sum(square(x), axis=axis)


def apply_activation(x, fn: str):
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    if fn == "swish":
        return swish(x)
    if fn in ("linear", "identity"):
        return x
    raise ValueError(f"unknown activation {fn!r}")

