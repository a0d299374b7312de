"""Differentiable primitives on (N, C, H, W) tensors.

Every op takes :class:`~dtnet.tensor.Tensor` (or array-like) inputs, returns a
new Tensor and, when a tape is active, records a backward rule mapping the
upstream gradient to one gradient per input.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from dtnet.tensor import Tensor, active_tape, as_tensor, note_decision, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class FlipKind(enum.Enum):
    """Direction transforms applied to the four channel quarters of an MDIC module."""

    IDENTITY = "identity"
    TRANSPOSE = "transpose"
    ROT180 = "rot180"
    MIRROR_W = "mirror_w"


PART_FLIPS = (FlipKind.IDENTITY, FlipKind.TRANSPOSE, FlipKind.ROT180, FlipKind.MIRROR_W)


def _flip_array(a: np.ndarray, kind: FlipKind) -> np.ndarray:
    if kind is FlipKind.IDENTITY:
        return a
    if kind is FlipKind.TRANSPOSE:
        if a.shape[-1] != a.shape[-2]:
            raise ValueError(f"transpose flip needs square spatial extent, got {a.shape[-2:]}")
        return np.swapaxes(a, -1, -2)
    if kind is FlipKind.ROT180:
        return a[..., ::-1, ::-1]
    if kind is FlipKind.MIRROR_W:
        return a[..., ::-1]
    raise ValueError(f"unknown flip kind {kind!r}")


def flip_apply(x, kind: FlipKind) -> Tensor:
    """Apply a direction transform to the last two (spatial) axes."""
    x = as_tensor(x)
    out = Tensor(np.ascontiguousarray(_flip_array(x.data, kind)))
    return record(out, (x,), lambda g: (np.ascontiguousarray(_flip_array(g, kind)),))


def flip_inverse(kind: FlipKind) -> FlipKind:
    """Inverse transform. All four kinds are involutions, so this is ``kind`` itself."""
    return kind


def flip_kernel(w: np.ndarray, kind: FlipKind) -> np.ndarray:
    """Kernel w' with conv(x, w') == unflip(conv(flip(x), w)) for stride-1 same padding."""
    return np.ascontiguousarray(_flip_array(w, kind))


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Channel-major patch matrix of shape (C*k*k, N*H*W) for same padding."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = (k - 1) // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), x.dtype)
    xp[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    # one strided copy per kernel tap beats a single 6-D transpose copy
    cols = np.empty((c, k, k, n, h, w), x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _correlate(x: np.ndarray, wmat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    cols = _im2col(x, k)
    out = (wmat @ cols).reshape(-1, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 2-D cross-correlation with same zero padding.

    x: (N, C, H, W); weight: (F, C, k, k) with k odd; bias: (F,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and 4-D weight")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {wc}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    k = kh
    wmat = weight.data.reshape(f, c * k * k)
    out, cols = _correlate(x.data, wmat, k)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ValueError(f"bias must have shape ({f},), got {bias.shape}")
        out += bias.data.reshape(1, f, 1, 1)
        inputs = (x, weight, bias)
    tape = active_tape()
    need_gx = tape is not None and tape.is_tracked(x)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, n * h * w)
        gw = (gmat @ cols.T).reshape(weight.shape)
        if not need_gx:
            gx = None
        elif k == 1:
            gx = np.ascontiguousarray((wmat.T @ gmat).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        else:
            # input gradient is a correlation with the rotated, channel-swapped kernel
            wrot = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * k * k)
            gx, _ = _correlate(g, wrot, k)
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return record(Tensor(out), inputs, backward)


# ---------------------------------------------------------------------------
# pointwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    note_decision(pos)
    out = Tensor(np.where(pos, x.data, 0).astype(x.dtype, copy=False))
    return record(out, (x,), lambda g: (g * pos,))


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch in add: {x.shape} vs {y.shape}")
    return record(Tensor(x.data + y.data), (x, y), lambda g: (g, g))


def mul(x, y) -> Tensor:
    """Elementwise product."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch in mul: {x.shape} vs {y.shape}")
    return record(Tensor(x.data * y.data), (x, y), lambda g: (g * y.data, g * x.data))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return record(Tensor(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, size = x.shape, x.size
    return record(
        Tensor(x.data.mean()), (x,), lambda g: (np.full(shape, g / size, dtype=x.dtype),)
    )


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: Tensor | None,
    running_var: Tensor | None,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over N, H, W.

    In ``train`` mode the batch mean and population variance normalize the
    input and the running statistics are replaced (not mutated in place) by
    ``(1 - momentum) * running + momentum * batch``; the running variance uses
    the unbiased batch estimate. ``infer`` mode normalizes with the running
    statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if mode == "train":
        m = x.size // c
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if running_mean is not None and running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean.data = (1 - momentum) * running_mean.data + momentum * mu.astype(
                running_mean.dtype
            )
            running_var.data = (1 - momentum) * running_var.data + momentum * unbiased.astype(
                running_var.dtype
            )
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("infer-mode batchnorm needs initialized running statistics")
        xc = x.data - running_mean.data.reshape(bshape)
        var = running_var.data
        m = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if m is None:
            gx = gxhat * inv.reshape(bshape)
        else:
            gx = (inv / m).reshape(bshape) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first window element."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extent, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    note_decision(idx)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return record(out, (x,), backward)


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2m] = .75 a[m] + .25 a[m-1], out[2m+1] = .75 a[m] + .25 a[m+1]
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_up2(x) -> Tensor:
    """Bilinear 2x upsampling, half-pixel-centre sampling with edge clamping."""
    x = as_tensor(x)
    out = Tensor(np.ascontiguousarray(_up2_axis(_up2_axis(x.data, -2), -1)))
    return record(
        out, (x,), lambda g: (np.ascontiguousarray(_up2_axis_T(_up2_axis_T(g, -1), -2)),)
    )


# ---------------------------------------------------------------------------
# channel plumbing


def split4(x) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split the channel axis into four equal contiguous groups."""
    x = as_tensor(x)
    c = x.shape[1]
    if c % 4:
        raise ValueError(f"split4 needs channels divisible by 4, got {c}")
    q = c // 4
    parts = []
    for i in range(4):
        part = Tensor(np.ascontiguousarray(x.data[:, i * q : (i + 1) * q]))

        def backward(g, i=i):
            full = np.zeros_like(x.data)
            full[:, i * q : (i + 1) * q] = g
            return (full,)

        parts.append(record(part, (x,), backward))
    return tuple(parts)  # type: ignore[return-value]


def concat_channels(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concat {p.shape} with {ref}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return record(out, tuple(parts), backward)
