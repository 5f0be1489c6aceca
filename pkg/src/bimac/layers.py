"""Trainable building blocks with explicit reverse-mode passes.

Each module caches what its ``backward`` needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises :class:`StateError`.
Gradients accumulate into ``Param.grad`` so that aliased parameters (the
shared-weights ablation) receive the sum of all their uses.
"""
from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import _tally, conv_input_grad, im2col


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param(shape={self.value.shape})"


class Module:
    def _children(self):
        for name, obj in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(obj, (Param, Module)):
                yield name, obj
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, (Param, Module)):
                        yield f"{name}.{i}", item

    def named_params(self, prefix=""):
        """All ``(name, Param)`` pairs in definition order, aliases included."""
        for name, obj in self._children():
            if isinstance(obj, Param):
                yield prefix + name, obj
            else:
                yield from obj.named_params(prefix + name + ".")

    def parameters(self):
        """Ordered ``{name: Param}`` with aliased storage listed once."""
        seen, out = set(), {}
        for name, p in self.named_params():
            if id(p) not in seen:
                seen.add(id(p))
                out[name] = p
        return out

    def modules(self):
        yield self
        for _, obj in self._children():
            if isinstance(obj, Module):
                yield from obj.modules()

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad[...] = 0.0

    def num_params(self):
        return sum(p.value.size for p in self.parameters().values())

    def _need_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward")
        return cache


def uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Same-size stride-1 convolution on ``(N, C, H, W)`` batches."""

    def __init__(self, c_in, c_out, k=3, rng=None):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        bound = 1.0 / np.sqrt(c_in * k * k)
        if rng is None:
            self.w = Param(np.zeros((c_out, c_in, k, k)))
            self.b = Param(np.zeros(c_out))
        else:
            self.w = Param(uniform(rng, (c_out, c_in, k, k), bound))
            self.b = Param(uniform(rng, (c_out,), bound))
        self._cache = None

    def forward(self, x, tally=None, tag="conv"):
        n, _, h, w = x.shape
        k, pad = self.k, self.k // 2
        cols = im2col(x, k, pad)
        y = cols.reshape(-1, cols.shape[-1]) @ self.w.value.reshape(self.c_out, -1).T + self.b.value
        macs = n * h * w * self.c_out * self.c_in * k * k
        _tally(tally, tag, mul=macs, add=macs)
        self._cache = (cols, x.shape)
        return np.ascontiguousarray(y.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, dy):
        cols, shape = self._need_cache()
        g = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        flat = cols.reshape(-1, cols.shape[-1])
        self.w.grad += (g.T @ flat).reshape(self.w.value.shape)
        self.b.grad += g.sum(axis=0)
        return conv_input_grad(dy, self.w.value)


class Linear(Module):
    """Affine map on the last axis of a ``(P, D_in)`` matrix."""

    def __init__(self, d_in, d_out, rng=None):
        self.d_in, self.d_out = d_in, d_out
        bound = 1.0 / np.sqrt(d_in)
        if rng is None:
            self.W = Param(np.zeros((d_out, d_in)))
            self.b = Param(np.zeros(d_out))
        else:
            self.W = Param(uniform(rng, (d_out, d_in), bound))
            self.b = Param(uniform(rng, (d_out,), bound))
        self._cache = None

    def forward(self, v, tally=None, tag="linear"):
        _tally(tally, tag, mul=v.shape[0] * self.W.value.size, add=v.shape[0] * self.W.value.size)
        self._cache = v
        return v @ self.W.value.T + self.b.value

    def backward(self, dy):
        v = self._need_cache()
        self.W.grad += dy.T @ v
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value


def sigmoid_grad(s, ds):
    return ds * s * (1.0 - s)


def upsample_nearest2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
