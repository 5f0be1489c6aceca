"""Dense tensor primitives.

Tensors are plain float64 numpy arrays. Axis conventions:

* feature maps ``(C, H, W)``, or ``(N, C, H, W)`` for batches
* convolution kernels ``(C_out, C_in, k, k)``
* vectors ``(D,)``

Every public op accepts an optional :class:`FlopTally`; when given, the op
records the multiplies and adds it actually executed under ``tag``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NonFiniteError


@dataclass
class FlopTally:
    """Per-invocation multiply/add counter, passed explicitly to ops."""

    mul: Counter = field(default_factory=Counter)
    add: Counter = field(default_factory=Counter)

    def count(self, tag, mul=0, add=0):
        self.mul[tag] += int(mul)
        self.add[tag] += int(add)

    def total(self):
        return sum(self.mul.values()) + sum(self.add.values())


def _tally(tally, tag, mul=0, add=0):
    if tally is not None:
        tally.count(tag, mul, add)


def check_finite(arr, where="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")
    return arr


def as_tensor(x, ndim=None, name="tensor"):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise DimensionError(f"{name} must have rank {ndim}, got shape {arr.shape}")
    return arr


def _batched(x):
    """Return (x4d, was_single)."""
    x = as_tensor(x, ndim=(3, 4), name="feature map")
    if x.ndim == 3:
        return x[None], True
    return x, False


def _check_kernel(x4, w, b, pad):
    w = as_tensor(w, ndim=4, name="kernel")
    b = as_tensor(b, ndim=1, name="bias")
    c_out, c_in, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kh}")
    if pad != (kh - 1) // 2:
        raise ConfigError(f"pad must be (k-1)/2 = {(kh - 1) // 2} for same-size output, got {pad}")
    if x4.shape[1] != c_in:
        raise DimensionError(f"input has {x4.shape[1]} channels, kernel expects {c_in}")
    if b.shape != (c_out,):
        raise DimensionError(f"bias shape {b.shape} does not match C_out={c_out}")
    return w, b


def im2col(x, k, pad):
    """Unfold ``(N, C, H, W)`` into ``(N, H, W, C*k*k)`` zero-padded neighbourhoods.

    Column layout is ``(c, u, v)`` row-major, matching ``w.reshape(C_out, -1)``.
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h, w, c * k * k)


def col2im(dcols, shape, k, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into a feature map."""
    n, c, h, w = shape
    d = np.ascontiguousarray(dcols.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + h, v:v + w] += d[:, :, u, v]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def conv_input_grad(dy, w):
    """Gradient of a same-size convolution w.r.t. its input.

    Equals a convolution of ``dy`` with the spatially flipped, channel-transposed kernel.
    """
    k = w.shape[-1]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    n, _, h, wd = dy.shape
    cols = im2col(dy, k, k // 2)
    g = cols.reshape(-1, cols.shape[-1]) @ wt.reshape(wt.shape[0], -1).T
    return np.ascontiguousarray(g.reshape(n, h, wd, wt.shape[0]).transpose(0, 3, 1, 2))


def conv2d(x, w, b, pad, tally=None, tag="conv"):
    """Same-size, stride-1, zero-padded 2-D convolution (cross-correlation).

    ``y[o,i,j] = b[o] + sum_{c,u,v} x[c, i+u-pad, j+v-pad] * w[o,c,u,v]``
    """
    x4, single = _batched(x)
    w, b = _check_kernel(x4, w, b, pad)
    c_out, c_in, k, _ = w.shape
    n, _, h, wd = x4.shape
    cols = im2col(x4, k, pad)
    y = cols.reshape(-1, c_in * k * k) @ w.reshape(c_out, -1).T + b
    y = np.ascontiguousarray(y.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2))
    macs = n * h * wd * c_out * c_in * k * k
    _tally(tally, tag, mul=macs, add=macs)
    check_finite(y, "conv2d output")
    return y[0] if single else y


def conv2d_at(x, w, b, pad, positions, tally=None, tag="conv"):
    """Evaluate :func:`conv2d` only at the listed ``(i, j)`` positions.

    Neighbourhoods always read the full input, whatever is being masked.
    Returns ``{(i, j): y[:, i, j]}``.
    """
    x = as_tensor(x, ndim=3, name="feature map")
    w, b = _check_kernel(x[None], w, b, pad)
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    positions = list(positions)
    if not positions:
        return {}
    ii = np.array([p[0] for p in positions])
    jj = np.array([p[1] for p in positions])
    if ii.min() < 0 or jj.min() < 0 or ii.max() >= h or jj.max() >= wd:
        raise IndexError(f"position outside {h}x{wd} map")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    rows = win[:, ii, jj].transpose(1, 0, 2, 3).reshape(len(positions), -1)
    y = rows @ w.reshape(c_out, -1).T + b
    macs = len(positions) * c_out * c_in * k * k
    _tally(tally, tag, mul=macs, add=macs)
    check_finite(y, "conv2d_at output")
    return {(int(i), int(j)): y[t] for t, (i, j) in enumerate(zip(ii, jj))}


def masked_gap(x, keep, tally=None, tag="gap"):
    """Channel means of ``x`` over pixels where ``keep`` is 1.

    An all-zero ``keep`` falls back to pooling over every pixel.
    """
    x = as_tensor(x, ndim=3, name="feature map")
    keep = np.asarray(keep)
    if keep.ndim == 3:
        keep = keep[0]
    if keep.shape != x.shape[1:]:
        raise DimensionError(f"keep mask {keep.shape} does not match map {x.shape[1:]}")
    sel = keep.astype(bool)
    if not sel.any():
        sel = np.ones_like(sel)
    cnt = int(sel.sum())
    _tally(tally, tag, mul=x.shape[0], add=cnt * x.shape[0])
    return x[:, sel].sum(axis=1) / cnt


def linear(v, W, b, tally=None, tag="linear"):
    """Affine map on the last axis: ``v @ W.T + b``."""
    v = as_tensor(v)
    W = as_tensor(W, ndim=2, name="weight")
    b = as_tensor(b, ndim=1, name="bias")
    if v.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"linear: input {v.shape}, weight {W.shape}, bias {b.shape}")
    rows = int(np.prod(v.shape[:-1], dtype=np.int64))
    _tally(tally, tag, mul=rows * W.size, add=rows * W.size)
    return check_finite(v @ W.T + b, "linear output")


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(t):
    return np.maximum(np.asarray(t, dtype=np.float64), 0.0)
