"""Differentiable primitives.

Every function here takes :class:`~aspcnet.tensor.Tensor` inputs, computes
with numpy and registers its vector-Jacobian product on the active tape.
Image tensors are channel-last ``(N, H, W, C)``. Binary elementwise ops
require equal shapes or a Python scalar; there is no general broadcasting,
only the explicit channel broadcast of :func:`bias_add`.
"""

from __future__ import annotations

import builtins
import math
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, as_tensor, debug_enabled, record

Scalar = Union[int, float]

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "relu", "sigmoid", "square", "sqrt", "exp", "scale")


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same("add", a, b)
        return record("add", a.data + b.data, (a, b), lambda g: (g, g))
    return record("add", a.data + a.data.dtype.type(b), (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same("sub", a, b)
        return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    return record("sub", a.data - a.data.dtype.type(b), (a,), lambda g: (g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same("mul", a, b)
        ad, bd = a.data, b.data
        return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    return scale(a, b)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same("div", a, b)
        ad, bd = a.data, b.data
        if debug_enabled() and np.any(bd == 0):
            raise FloatingPointError("div: zero denominator")
        out = ad / bd
        return record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))
    if debug_enabled() and b == 0:
        raise FloatingPointError("div: zero denominator")
    return scale(a, 1.0 / b)


def scale(a, k: Scalar) -> Tensor:
    a = as_tensor(a)
    k = a.data.dtype.type(k)
    return record("scale", a.data * k, (a,), lambda g: (g * k,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name to one of :data:`ELEMENTWISE_KINDS`."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
    unary = {"relu": relu, "sigmoid": sigmoid, "square": square, "sqrt": sqrt, "exp": exp}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def bias_add(x, b) -> Tensor:
    """Add a per-channel vector along the last axis."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return record("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial axes of an ``(N, H, W, C)`` tensor."""
    x = as_tensor(x)
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    H, W = x.shape[1], x.shape[2]
    return record("pad2d", out, (x,), lambda g: (g[:, top:top + H, left:left + W, :],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _parse_einsum(subscripts: str):
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for name, s, other in (("first", sa, sb), ("second", sb, sa)):
        for ch in s:
            if ch not in out and ch not in other:
                raise ValueError(f"einsum: index {ch!r} of the {name} operand is summed alone")
    return sa, sb, out


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand Einstein sum with explicit output, e.g. ``"ij,jk->ik"``.

    Indices that appear in only one operand must survive to the output,
    which keeps both backward rules expressible as einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, so = _parse_einsum(subscripts)
    ad, bd = a.data, b.data
    out = np.einsum(f"{sa},{sb}->{so}", ad, bd, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{so},{sa}->{sb}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return record("einsum", np.ascontiguousarray(out), (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def same_padding(size: int, stride: int, extent: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for "same" mode.

    The output size is ``ceil(size / stride)``; odd totals put the extra
    row/column after.
    """
    out = -(-size // stride)
    total = builtins.max((out - 1) * stride + extent - size, 0)
    return out, total // 2, total - total // 2


def conv_output_geometry(H: int, W: int, kh: int, kw: int, stride: int, padding: str, dilation: int = 1):
    ekh = kh + (kh - 1) * (dilation - 1)
    ekw = kw + (kw - 1) * (dilation - 1)
    if padding == "same":
        Ho, pt, pb = same_padding(H, stride, ekh)
        Wo, pl, pr = same_padding(W, stride, ekw)
    elif padding == "valid":
        if ekh > H or ekw > W:
            raise ValueError(f"kernel extent {(ekh, ekw)} exceeds input {(H, W)} in valid mode")
        Ho = (H - ekh) // stride + 1
        Wo = (W - ekw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    return Ho, Wo, (pt, pb, pl, pr)


def conv2d(x, kernel, stride: int = 1, padding: str = "same", dilation: int = 1) -> Tensor:
    """Cross-correlation of ``(N,H,W,C)`` with a ``(kh,kw,C,F)`` kernel.

    Computed one kernel tap at a time: each tap is a strided window of the
    padded input multiplied by a ``C x F`` matrix.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects (N,H,W,C) input and (kh,kw,C,F) kernel")
    N, H, W, C = x.shape
    kh, kw, kc, F = kernel.shape
    if kc != C:
        raise ValueError(f"conv2d: kernel expects {kc} channels, input has {C}")
    Ho, Wo, (pt, pb, pl, pr) = conv_output_geometry(H, W, kh, kw, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x.data
    kd = kernel.data
    rspan = stride * (Ho - 1) + 1
    cspan = stride * (Wo - 1) + 1

    def window(arr, i, j):
        r0, c0 = i * dilation, j * dilation
        return arr[:, r0:r0 + rspan:stride, c0:c0 + cspan:stride, :]

    out = np.zeros((N, Ho, Wo, F), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) @ kd[i, j]

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += g @ kd[i, j].T
            gx = gxp[:, pt:pt + H, pl:pl + W, :]
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            g2 = g.reshape(-1, F)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = window(xp, i, j).reshape(-1, C).T @ g2
        return gx, gk

    return record("conv2d", out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.9,
    training: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over all axes but the last.

    In training mode the batch statistics normalize the input and the
    running arrays are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    The variance is the biased (population) estimate in both roles.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta shape {gamma.shape}/{beta.shape} vs {C} channels")
    axes = tuple(range(x.ndim - 1))
    xd, gd = x.data, gamma.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean) * inv
    out = xhat * gd + beta.data

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gh = g * gd
        if training:
            m = xd.size // C
            gx = inv * (gh - gh.sum(axis=axes) / m - xhat * (gh * xhat).sum(axis=axes) / m)
        else:
            gx = gh * inv
        return gx, gg, gb

    return record("batch_norm", out.astype(xd.dtype), (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(a % ndim for a in axes))
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
    return out


def _check_nonempty(x: Tensor, axes: tuple) -> None:
    for a in axes:
        if x.shape[a] == 0:
            raise ValueError(f"empty reduction along axis {a}")


def sum(x, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    _check_nonempty(x, ax)
    out = np.asarray(x.data.sum(axis=ax, keepdims=keepdims))
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (x,), vjp)


def mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    _check_nonempty(x, ax)
    count = math.prod(x.shape[a] for a in ax)
    return scale(sum(x, ax, keepdims), 1.0 / count)


NORM_EPS = 1e-12


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; the backward divides by ``norm + 1e-12``."""
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    _check_nonempty(x, (ax,))
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=ax, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=ax)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * xd / (nrm + NORM_EPS),)

    return record("l2norm", out, (x,), vjp)


def argmax(x, axis: int = -1) -> np.ndarray:
    """Index of the maximum; ties resolve to the lowest index."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.shape[axis] == 0:
        raise ValueError("empty reduction axis")
    return np.argmax(data, axis=axis)


def max(x, axis: int = -1) -> tuple[Tensor, np.ndarray]:  # noqa: A001 - mirrors numpy
    """Maximum along ``axis`` and its (lowest-index) argmax.

    The gradient flows to the selected element only.
    """
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    idx = argmax(x, ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return record("max", np.squeeze(out, axis=ax), (x,), vjp), idx


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along one axis with max subtraction."""
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    _check_nonempty(x, (ax,))
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return record("softmax", out, (x,), vjp)


def reduce(kind: str, x, axes=None, keepdims: bool = False):
    """Dispatch by name: ``sum``, ``mean``, ``l2norm``, ``max``, ``softmax``."""
    if kind == "sum":
        return sum(x, axes, keepdims)
    if kind == "mean":
        return mean(x, axes, keepdims)
    if kind in ("l2norm", "max", "softmax"):
        if axes is None:
            axes = -1
        if not isinstance(axes, int):
            if len(axes) != 1:
                raise ValueError(f"{kind} reduces exactly one axis")
            (axes,) = axes
        if kind == "l2norm":
            return l2norm(x, axes, keepdims)
        if kind == "max":
            return max(x, axes)
        return softmax(x, axes)
    raise ValueError(f"unknown reduction {kind!r}")


def constant(data, dtype=None) -> Tensor:
    """A tensor that never requires a gradient."""
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    from .tensor import get_default_dtype

    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)

