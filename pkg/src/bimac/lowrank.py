"""Two-component low-rank convolution kernels.

Each component scales a per-input-channel ``k x k`` navigator by a
``(C_out, C_in)`` coefficient matrix; the kernel is the sum of the two
components. :class:`DenseKernel` exposes the same interface with a full
weight tensor (the no-low-rank ablation).
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .layers import Module, Param, uniform
from .tensor import _tally


def expand_component(lam, nav):
    """``W[o,i,u,v] = lam[o,i] * nav[0,i,u,v]``."""
    lam = np.asarray(lam, dtype=np.float64)
    nav = np.asarray(nav, dtype=np.float64)
    if lam.ndim != 4 or lam.shape[2:] != (1, 1) or nav.ndim != 4 or nav.shape[0] != 1:
        raise DimensionError(f"expected lambda (C_out,C_in,1,1) and navigator (1,C_in,k,k), got {lam.shape}, {nav.shape}")
    if lam.shape[1] != nav.shape[1]:
        raise DimensionError(f"C_in mismatch: {lam.shape[1]} vs {nav.shape[1]}")
    return lam * nav


def param_count(c_in, c_out, k):
    """Return ``(lowrank, dense)`` parameter counts, biases included."""
    if min(c_in, c_out, k) <= 0:
        raise ValueError("dimensions must be positive")
    lowrank = 2 * (c_in * k * k + c_out * c_in) + c_out
    dense = c_out * c_in * k * k + c_out
    return lowrank, dense


class LowRankKernel(Module):
    def __init__(self, c_in, c_out, k=3, rng=None):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        if rng is None:
            z = np.zeros
            self.nav1, self.nav2 = Param(z((1, c_in, k, k))), Param(z((1, c_in, k, k)))
            self.lam1, self.lam2 = Param(z((c_out, c_in, 1, 1))), Param(z((c_out, c_in, 1, 1)))
            self.bias = Param(z(c_out))
        else:
            nb, cb = 1.0 / np.sqrt(c_in * k * k), 1.0 / np.sqrt(c_in)
            self.nav1 = Param(uniform(rng, (1, c_in, k, k), nb))
            self.lam1 = Param(uniform(rng, (c_out, c_in, 1, 1), cb))
            self.nav2 = Param(uniform(rng, (1, c_in, k, k), nb))
            self.lam2 = Param(uniform(rng, (c_out, c_in, 1, 1), cb))
            self.bias = Param(uniform(rng, (c_out,), nb))

    def assemble(self, tally=None):
        n = self.c_out * self.c_in * self.k * self.k
        _tally(tally, "lowrank_expand", mul=2 * n, add=n)
        return assemble(self)

    def backward(self, dW, db):
        # dW: (C_out, C_in, k, k)
        self.lam1.grad += (dW * self.nav1.value).sum(axis=(2, 3), keepdims=True)
        self.lam2.grad += (dW * self.nav2.value).sum(axis=(2, 3), keepdims=True)
        self.nav1.grad += (dW * self.lam1.value).sum(axis=0, keepdims=True)
        self.nav2.grad += (dW * self.lam2.value).sum(axis=0, keepdims=True)
        self.bias.grad += db


class DenseKernel(Module):
    def __init__(self, c_in, c_out, k=3, rng=None):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        bound = 1.0 / np.sqrt(c_in * k * k)
        if rng is None:
            self.weight = Param(np.zeros((c_out, c_in, k, k)))
            self.bias = Param(np.zeros(c_out))
        else:
            self.weight = Param(uniform(rng, (c_out, c_in, k, k), bound))
            self.bias = Param(uniform(rng, (c_out,), bound))

    def assemble(self, tally=None):
        return self.weight.value

    def backward(self, dW, db):
        self.weight.grad += dW
        self.bias.grad += db


def assemble(kernel):
    """Sum of the two expanded components of a :class:`LowRankKernel`."""
    w1 = expand_component(kernel.lam1.value, kernel.nav1.value)
    w2 = expand_component(kernel.lam2.value, kernel.nav2.value)
    if w1.shape != w2.shape:
        raise DimensionError(f"component shapes differ: {w1.shape} vs {w2.shape}")
    return w1 + w2
