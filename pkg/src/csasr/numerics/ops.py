"""Differentiable tensor operations.

Every op takes and returns :class:`Tensor`. Broadcasting is limited to
leading-batch expansion: an operand whose shape is a suffix of the other's
shape is repeated over the missing leading axes. Anything else needs an
explicit reshape.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from csasr.errors import ShapeError, UsageError
from csasr.numerics.tensor import Tensor, as_tensor, make_output

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _expand_plan(op: str, a: Tensor, b: Tensor):
    """Return which operand (if any) is leading-batch expanded."""
    if a.shape == b.shape:
        return None
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "b"
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return "a"
    raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expand_plan("add", a, b)
    sa, sb = a.shape, b.shape
    return make_output("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expand_plan("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_output("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expand_plan("mul", a, b)
    ad, bd = a.data, b.data
    return make_output(
        "mul", ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_output("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return make_output("matmul", ad @ bd, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {list(a.shape)} and {list(b.shape)} differ")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_output("matmul", ad @ bd, (a, b), backward)


def concat_last_dim(xs: Sequence[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise ShapeError(
                "concat_last_dim: leading dims differ: " + ", ".join(str(list(t.shape)) for t in xs)
            )
    sizes = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_output("concat_last_dim", np.concatenate([x.data for x in xs], axis=-1), tuple(xs), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return make_output("split", x.data[..., start:stop].copy(), (x,), backward)


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last dim into pieces of the given widths."""
    if builtins.sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split: widths {list(sizes)} do not sum to last dim of {list(x.shape)}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_last(x, start, start + s))
        start += s
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {list(table.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {list(table.shape)}")
    n_rows = table.shape[0]

    def backward(g):
        gt = np.zeros((n_rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return make_output("embedding_lookup", table.data[ids], (table,), backward)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_output("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {list(gain.shape)} do not match {list(x.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return make_output("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return make_output("swish", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return make_output("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_output("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded per-channel convolution over time.

    ``x`` is ``(B, T, C)``, ``weight`` is ``(K, C)`` with odd ``K``, ``bias`` is ``(C,)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: input must be (B, T, C), got {list(x.shape)}")
    k, c = weight.shape
    if c != x.shape[-1] or k % 2 == 0 or bias.shape != (c,):
        raise ShapeError(
            f"depthwise_conv1d: weight {list(weight.shape)} / bias {list(bias.shape)} vs input {list(x.shape)}"
        )
    pad = k // 2
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    wd = weight.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + t, :] * wd[j]
    out += bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, j:j + t, :] += g * wd[j]
            gw[j] = (g * xp[:, j:j + t, :]).sum(axis=(0, 1))
        return gxp[:, pad:pad + t, :], gw, g.sum(axis=(0, 1))

    return make_output("depthwise_conv1d", out, (x, weight, bias), backward)


def unfold_time(x: Tensor, kernel: int, stride: int, pad_left: int) -> Tensor:
    """Gather strided windows over time: ``(B, T, C) -> (B, T', K*C)``.

    Composed with :func:`matmul` this gives a strided 1-D convolution.
    ``T' = (T + pad_left - kernel) // stride + 1``.
    """
    b, t, c = x.shape
    t_out = (t + pad_left - kernel) // stride + 1
    if t_out < 1:
        raise ShapeError(f"unfold_time: input length {t} too short for kernel {kernel}")
    xp = np.pad(x.data, ((0, 0), (pad_left, 0), (0, 0)))
    idx = (np.arange(t_out) * stride)[:, None] + np.arange(kernel)[None, :]
    out = xp[:, idx, :].reshape(b, t_out, kernel * c)

    def backward(g):
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), idx), g.reshape(b, t_out, kernel, c))
        return (gxp[:, pad_left:, :],)

    return make_output("unfold_time", out, (x,), backward)


def dropout(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with a caller-supplied keep mask (1 = keep)."""
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {list(mask.shape)} vs input {list(x.shape)}")
    m = mask.astype(np.float64) / (1.0 - rate)
    return make_output("dropout", x.data * m, (x,), lambda g: (g * m,))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}") from exc
    return make_output("reshape", out, (x,), lambda g: (g.reshape(old),))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts numpy-style."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_fill: mask {list(mask.shape)} vs input {list(x.shape)}") from exc
    return make_output(
        "masked_fill", np.where(full, value, x.data), (x,), lambda g: (np.where(full, 0.0, g),)
    )


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_output("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def pick_last(x: Tensor, ids) -> Tensor:
    """Select ``x[..., ids[...]]`` along the last axis (one index per row)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick_last: ids {list(ids.shape)} vs rows of {list(x.shape)}")
    shape = x.shape
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return make_output("pick_last", out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_output("exp", e, (x,), lambda g: (g * e,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_output("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def check_scalar(x: Tensor, what: str) -> None:
    if x.data.size != 1:
        raise UsageError(f"{what}: expected a scalar tensor, got shape {list(x.shape)}")
