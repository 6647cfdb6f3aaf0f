"""Differentiable primitives.

Every primitive takes and returns :class:`Tensor`. Broadcasting is not
supported except through :func:`bias_add` (and the bias argument of
:func:`conv2d`); reshape explicitly everywhere else.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _notify_kink, make_result


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(name, "operands must have identical shapes", [a.shape, b.shape])


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    _notify_kink("relu", a.data)
    mask = a.data > 0
    return make_result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    _notify_kink("abs", a.data)
    sign = np.sign(a.data)  # sign(0) == 0: subgradient midpoint
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    if lo is not None:
        _notify_kink("clamp", x - lo)
    if hi is not None:
        _notify_kink("clamp", x - hi)
    passthrough = out == x
    return make_result(out, (a,), lambda g: (g * passthrough,), "clamp")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", f"axis {axis} out of range for rank {a.ndim}", [a.shape])
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("log_softmax", f"axis {axis} out of range for rank {a.ndim}", [a.shape])
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return make_result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    if n == 0:
        raise ShapeError("mean", "cannot average an empty tensor", [shape])
    return make_result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    return make_result(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum_axis"
    )


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", [src]) from exc
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose2d", "input must be 2-D", [a.shape])
    return make_result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose2d")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", f"invalid axes {axes}", [a.shape])
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "need at least one input")
    ref = tensors[0]
    if not -ref.ndim <= axis < ref.ndim:
        raise ShapeError("concat", f"axis {axis} out of range", [t.shape for t in tensors])
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError("concat", f"non-concat dimensions differ on axis {ax}",
                             [t.shape for t in tensors])
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return make_result(out, tensors, backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError("slice_axis", f"bad range [{start}, {stop}) on axis {ax}", [a.shape])
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return make_result(a.data[index].copy(), (a,), backward, "slice_axis")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if int(np.sum(sizes)) != a.shape[ax]:
        raise ShapeError("split", f"sizes {list(sizes)} do not sum to dim {a.shape[ax]}", [a.shape])
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, ax))
        start += s
    return out


def gather_rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("gather_rows", "input must be 2-D", [a.shape])
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", f"row index out of range for {a.shape[0]} rows", [a.shape])
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(a.data[idx].copy(), (a,), backward, "gather_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", "expected (m, k) @ (k, n)", [a.shape, b.shape])
    return make_result(a.data @ b.data, (a, b),
                       lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def bias_add(a: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (the one broadcast the engine allows)."""
    ax = axis % a.ndim
    if bias.ndim != 1 or bias.shape[0] != a.shape[ax]:
        raise ShapeError("bias_add", f"bias must match dim {ax}", [a.shape, bias.shape])
    view = [1] * a.ndim
    view[ax] = -1
    reduce_axes = tuple(d for d in range(a.ndim) if d != ax)
    return make_result(a.data + bias.data.reshape(view), (a, bias),
                       lambda g: (g, g.sum(axis=reduce_axes)), "bias_add")


def _im2col_nhwc(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """NCHW input -> (N*Ho*Wo, k*k*C) patch matrix, columns ordered (di, dj, c)."""
    pad = k // 2
    xh = x.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution on NCHW input with an (O, C, k, k) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", "expected NCHW input and OCkk weight", [x.shape, weight.shape])
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {ci}",
                         [x.shape, weight.shape])
    if k != k2 or k not in (1, 3):
        raise ShapeError("conv2d", "kernel must be 1x1 or 3x3", [weight.shape])
    if stride not in (1, 2):
        raise ShapeError("conv2d", f"unsupported stride {stride}", [x.shape])
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias must have shape ({o},)", [bias.shape])
    parents = (x, weight) if bias is None else (x, weight, bias)

    if k == 1 and stride == 1:
        xf = x.data.reshape(n, c, h * w)
        wm = weight.data.reshape(o, c)
        out = np.matmul(wm, xf)
        if bias is not None:
            out = out + bias.data[None, :, None]
        out = out.reshape(n, o, h, w)

        def backward(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(wm.T, gf).reshape(x.shape) if x.requires_grad else None
            gw = (np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(weight.shape)
                  if weight.requires_grad else None)
            res = [gx, gw]
            if bias is not None:
                res.append(gf.sum(axis=(0, 2)))
            return res

        return make_result(out, parents, backward, "conv2d")

    cols, ho, wo = _im2col_nhwc(x.data, k, stride)
    # kernel laid out to match the (di, dj, c) column order
    wm = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = cols @ wm.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            pad = k // 2
            gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
            for di in range(k):
                for dj in range(k):
                    j = (di * k + dj) * c
                    gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += (
                        (g2 @ wm[:, j:j + c]).reshape(n, ho, wo, c)
                    )
            gx = gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return res

    return make_result(out, parents, backward, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling (a transposed conv with a fixed 2x2 ones kernel)."""
    if x.ndim != 4:
        raise ShapeError("upsample2x", "expected NCHW input", [x.shape])
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, (x,),
                       lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


# ---------------------------------------------------------------- dispatcher

_PRIMITIVES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "mean": mean,
    "sum": sum,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "transpose2d": transpose2d,
    "gather_rows": gather_rows,
    "clamp": clamp,
    "abs": abs,
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("softmax", [v], {"axis": 1})``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **(attrs or {}))
