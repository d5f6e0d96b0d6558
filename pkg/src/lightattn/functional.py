"""Fused differentiable operations built on :mod:`lightattn.autograd`.

Each op computes its forward pass directly in numpy and registers a closed-form
backward rule, which keeps the tape short for the attention and encoder code.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, _record, as_tensor
from .errors import DataError, DegenerateRowError, DimensionError, ParameterError


def softmax_masked(logits, mask=None) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries get weight exactly 0. ``mask`` may be any boolean array (or
    tensor) broadcastable to ``logits``.

    Raises:
        DegenerateRowError: some row has no unmasked entry.
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        mask = np.broadcast_to(mask, z.shape)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (logits,), rule, "softmax_masked")


def layer_norm(x, gamma, beta, eps: float = 1e-6, axis: int = -2) -> Tensor:
    """Normalise each column of ``x`` (feature axis ``axis``, default -2)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    d = x.shape[axis]
    if d < 2:
        raise DimensionError("layer_norm needs at least two features")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"gamma/beta must have shape ({d},)")
    pshape = [1] * x.ndim
    pshape[axis] = d
    pshape = tuple(pshape)
    g_arr = gamma.data.reshape(pshape)
    b_arr = beta.data.reshape(pshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_arr + b_arr
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * g_arr
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=reduce_axes)
        if beta.requires_grad:
            gb = g.sum(axis=reduce_axes)
        return gx, gg, gb

    return _record(out, (x, gamma, beta), rule, "layer_norm")


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Padding ``(before, after)`` and output length for centred 'same' convolution.

    ``before = (kernel - 1) // 2`` independent of ``size``, so a zero-padded batch
    gives the same values on the valid frames as each sequence alone.
    """
    out = -(-size // stride)
    before = (kernel - 1) // 2
    after = max(0, (out - 1) * stride + kernel - size - before)
    return before, after, out


def conv2d(x, kernel, stride=(1, 1), bias=None) -> Tensor:
    """2-D cross-correlation with 'same' padding.

    Args:
        x: ``[C_in, F, L]`` or ``[B, C_in, F, L]``.
        kernel: ``[C_out, C_in, kF, kL]``.
        stride: ``(s_f, s_t)``.
        bias: optional ``[C_out]``.

    Returns:
        ``[(B,) C_out, ceil(F/s_f), ceil(L/s_t)]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    sf, st = (int(s) for s in stride)
    if sf < 1 or st < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects [B, C, F, L] input and [O, C, kF, kL] kernel")
    B, C, F, L = xd.shape
    O, Ck, kf, kt = kernel.shape
    if Ck != C:
        raise DimensionError(f"kernel expects {Ck} input channels, got {C}")
    pf0, pf1, Fo = same_padding(F, kf, sf)
    pt0, pt1, Lo = same_padding(L, kt, st)
    xp = np.pad(xd, ((0, 0), (0, 0), (pf0, pf1), (pt0, pt1)))
    win = sliding_window_view(xp, (kf, kt), axis=(2, 3))[:, :, ::sf, ::st][:, :, :Fo, :Lo]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise DimensionError(f"bias must have shape ({O},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def rule(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for h in range(kf):
                for w in range(kt):
                    contrib = np.tensordot(g4, kernel.data[:, :, h, w], axes=([1], [0]))
                    gxp[:, :, h : h + sf * (Fo - 1) + 1 : sf, w : w + st * (Lo - 1) + 1 : st] += contrib.transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, pf0 : pf0 + F, pt0 : pt0 + L]
            if squeeze:
                gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return _record(out[0] if squeeze else out, inputs, rule, "conv2d")


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is ``[C]`` with a scalar label or ``[B, C]`` with ``B`` labels.
    """
    logits = as_tensor(logits)
    z = logits.data[None] if logits.ndim == 1 else logits.data
    labels = np.atleast_1d(np.asarray(labels))
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must be integers in [0, {c}), got {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        grad = p * (g / n)
        return (grad[0] if logits.ndim == 1 else grad,)

    return _record(np.asarray(loss), (logits,), rule, "cross_entropy")


def band_offsets(window: int) -> np.ndarray:
    """Offsets ``i - j`` covered by band slot ``m``: ``r, r-1, ..., -r``."""
    r = (window - 1) // 2
    return r - np.arange(window)


def band_gather(k, window: int) -> Tensor:
    """Gather keys into a band: ``[..., d, L] -> [..., d, L, window]``.

    Slot ``m`` of query ``i`` holds key ``j = i + m - r`` (zero outside the sequence).
    """
    k = as_tensor(k)
    r = (window - 1) // 2
    L = k.shape[-1]
    pad = [(0, 0)] * (k.ndim - 1) + [(r, r)]
    kp = np.pad(k.data, pad)
    out = np.ascontiguousarray(sliding_window_view(kp, window, axis=-1))

    def rule(g):
        gp = np.zeros(k.shape[:-1] + (L + 2 * r,))
        for m in range(window):
            gp[..., m : m + L] += g[..., m]
        return (gp[..., r : r + L],)

    return _record(out, (k,), rule, "band_gather")


def band_valid(length: int, window: int) -> np.ndarray:
    """``[L, window]`` boolean: slot ``m`` of query ``i`` points inside the sequence."""
    r = (window - 1) // 2
    j = np.arange(length)[:, None] + np.arange(window)[None, :] - r
    return (j >= 0) & (j < length)


def masked_mean(x, valid: np.ndarray, axis: int = -1) -> Tensor:
    """Mean of ``x`` over ``axis`` counting only positions where ``valid`` is true."""
    x = as_tensor(x)
    w = np.asarray(valid, dtype=np.float64)
    counts = w.sum(axis=axis, keepdims=True)
    return (x * w).sum(axis=axis) * (1.0 / np.squeeze(counts, axis=axis))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
