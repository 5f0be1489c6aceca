"""Mask-aware bimodal convolution.

Pixels with ``HM == 0`` go through the compact branch: one kernel per image,
modulated by weights derived from the masked global average of ``X'``.
Pixels with ``HM == 1`` go through the focused branch: each pixel gets its
own modulation of a second, independent low-rank kernel. A small conv stack
on the original input adds a dense bias map to the reassembled output.

The routing decision is piecewise constant, so ``backward`` treats ``HM`` as
fixed: gradients reach the mask generator only through ``X' = X * SM``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camg import DEFAULT_ALPHA, CAMG, MaskPair
from .errors import ConfigError, DimensionError
from .layers import Conv2d, Linear, Module, sigmoid_grad
from .lowrank import DenseKernel, LowRankKernel
from .tensor import _tally, as_tensor, check_finite, col2im, conv2d, im2col, linear, relu, sigmoid

ROUTES = ("mask", "compact", "focused", "random")
RANDOM_FOCUSED_FRACTION = 0.15


@dataclass
class ModulationWeights:
    w_ci: np.ndarray
    w_co: np.ndarray
    w_kk: np.ndarray


def hidden_width(c_in):
    return max(c_in // 2, 8)


class BiMACLayer(Module):
    """All trainable state of one bimodal adaptive convolution.

    ``route`` selects how the hard mask is produced: ``"mask"`` (learned),
    ``"compact"``/``"focused"`` (threshold pinned so one branch takes every
    pixel), or ``"random"`` (no mask generator; a fixed seeded mask with
    ``round(0.15 * H * W)`` focused pixels).
    """

    def __init__(self, c_in, c_out, k=3, alpha=DEFAULT_ALPHA, rng=None, *, hidden=None,
                 bias_width=8, camg_k=3, kernel="lowrank", shared=False, route="mask",
                 mask_seed=0):
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        if route not in ROUTES:
            raise ConfigError(f"unknown route {route!r}")
        if kernel not in ("lowrank", "dense"):
            raise ConfigError(f"unknown kernel type {kernel!r}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.hidden = hidden or hidden_width(c_in)
        self.route = route
        self.mask_seed = mask_seed
        kk = k * k
        r = self.hidden

        if route != "random":
            force = {"compact": "compact", "focused": "focused"}.get(route)
            self.camg = CAMG(c_in, camg_k, alpha, rng, force=force)
        else:
            self.camg = None
        self.alpha = float(alpha)

        self.f_ci = Linear(c_in, c_in, rng)
        self.f_co = Linear(c_in, c_out, rng)
        self.f_kk = Linear(c_in, kk, rng)

        self.fc1 = Linear(c_in, r, rng)
        self.fc2 = Linear(r, r, rng)
        self.g_ci = Linear(r, c_in, rng)
        self.g_co = Linear(r, c_out, rng)
        self.g_kk = Linear(r, kk, rng)

        make = LowRankKernel if kernel == "lowrank" else DenseKernel
        self.kernel0 = make(c_in, c_out, k, rng)
        self.kernel1 = self.kernel0 if shared else make(c_in, c_out, k, rng)

        self.bias1 = Conv2d(c_in, bias_width, 3, rng)
        self.bias2 = Conv2d(bias_width, bias_width, 3, rng)
        self.bias3 = Conv2d(bias_width, c_out, 3, rng)

        self.frozen_hm = None
        self.last_mask = None
        self._random_masks = {}
        self._cache = None

    # -- mask ------------------------------------------------------------
    def random_mask(self, h, w):
        key = (h, w)
        if key not in self._random_masks:
            rng = np.random.default_rng([self.mask_seed, h, w])
            count = int(round(RANDOM_FOCUSED_FRACTION * h * w))
            flat = np.zeros(h * w, dtype=bool)
            flat[rng.choice(h * w, size=count, replace=False)] = True
            self._random_masks[key] = flat.reshape(1, h, w)
        return self._random_masks[key]

    def freeze(self):
        """Pin the routing mask from the last forward pass."""
        self.frozen_hm = self.last_mask.HM.copy()

    def unfreeze(self):
        self.frozen_hm = None

    def _mask(self, x, hm, tally):
        n, c, h, w = x.shape
        if self.camg is None:
            rm = np.broadcast_to(self.random_mask(h, w), (n, 1, h, w)).copy()
            frac = np.full(n, rm[0].mean())
            nan = np.full(n, np.nan)
            mask = MaskPair(None, x, None, nan, nan, self.alpha, nan, rm, frac)
        else:
            mask = self.camg.forward(x, tally)
        override = hm if hm is not None else self.frozen_hm
        if override is not None:
            override = np.asarray(override, dtype=bool).reshape(n, 1, h, w)
            mask.HM = override
            mask.focused_fraction = override.mean(axis=(1, 2, 3))
        return mask

    # -- forward / backward -------------------------------------------------
    def forward(self, x, hm=None, tally=None):
        """``(N, C_in, H, W) -> (N, C_out, H, W)``; mask kept in ``last_mask``."""
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"BiMAC expects (N, {self.c_in}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        o, k = self.c_out, self.k
        kk = k * k
        mask = self._mask(x, hm, tally)
        xm = mask.X_mod
        focused = mask.HM[:, 0]
        keep = ~focused
        cols = im2col(xm, k, k // 2)
        W0 = self.kernel0.assemble(tally)
        W1 = self.kernel1.assemble(tally)
        b0, b1 = self.kernel0.bias.value, self.kernel1.bias.value
        y = np.zeros((n, h, w, o))

        # compact branch: one modulated kernel per image
        counts = keep.sum(axis=(1, 2))
        pool = np.where(counts[:, None, None] > 0, keep, True)
        pool_n = pool.sum(axis=(1, 2))
        v = (xm * pool[:, None]).sum(axis=(2, 3)) / pool_n[:, None]
        _tally(tally, "compact_gap", mul=n * c, add=int(pool_n.sum()) * c)
        c_ci = sigmoid(self.f_ci.forward(v, tally, "compact_heads"))
        c_co = sigmoid(self.f_co.forward(v, tally, "compact_heads"))
        c_kk = sigmoid(self.f_kk.forward(v, tally, "compact_heads"))
        mods = [c_co[i][:, None, None, None] * c_ci[i][None, :, None, None] for i in range(n)]
        mods = [m * c_kk[i].reshape(1, 1, k, k) for i, m in enumerate(mods)]
        W0p = [W0 * m for m in mods]
        _tally(tally, "compact_heads", mul=n * (o * c + 2 * o * c * kk))
        for i in range(n):
            sel = keep[i]
            y[i][sel] = cols[i][sel] @ W0p[i].reshape(o, -1).T + b0
        p0 = int(counts.sum())
        _tally(tally, "compact_conv", mul=p0 * o * c * kk, add=p0 * o * c * kk)

        # focused branch: per-pixel modulation of the second kernel
        idx = np.nonzero(focused)
        p1 = len(idx[0])
        fz = None
        if p1:
            cvec = xm[idx[0], :, idx[1], idx[2]]
            h1 = self.fc1.forward(cvec, tally, "focused_embed")
            r1 = relu(h1)
            h2 = self.fc2.forward(r1, tally, "focused_embed")
            r2 = relu(h2)
            f_ci = sigmoid(self.g_ci.forward(r2, tally, "focused_heads"))
            f_co = sigmoid(self.g_co.forward(r2, tally, "focused_heads"))
            f_kk = sigmoid(self.g_kk.forward(r2, tally, "focused_heads"))
            patch = cols[idx].reshape(p1, c, kk)
            scale = f_ci[:, :, None] * f_kk[:, None, :]
            z = (patch * scale).reshape(p1, c * kk)
            s = z @ W1.reshape(o, -1).T
            y[idx] = s * f_co + b1
            _tally(tally, "focused_conv", mul=p1 * (2 * c * kk + o * c * kk + o), add=p1 * o * c * kk)
            fz = (h1, h2, f_ci, f_co, f_kk, patch, scale, z, s)

        # bias block on the raw input
        t1 = self.bias1.forward(x, tally, "bias_block")
        t2 = self.bias2.forward(relu(t1), tally, "bias_block")
        B = self.bias3.forward(relu(t2), tally, "bias_block")
        out = y.transpose(0, 3, 1, 2) + B
        _tally(tally, "bias_block", add=out.size)
        check_finite(out, "BiMAC output")

        self.last_mask = mask
        self._cache = dict(x=x, mask=mask, cols=cols, W0=W0, W1=W1, keep=keep, pool=pool,
                           pool_n=pool_n, v=v, c_w=(c_ci, c_co, c_kk), mods=mods, W0p=W0p,
                           idx=idx, fz=fz, t1=t1, t2=t2)
        return out

    def kink_inputs(self):
        """Pre-activations of every relu in the last forward."""
        cache = self._need_cache()
        out = [cache["t1"], cache["t2"]]
        if cache["fz"] is not None:
            out += [cache["fz"][0], cache["fz"][1]]
        return out

    def backward(self, dout):
        cache = self._need_cache()
        x, mask, cols = cache["x"], cache["mask"], cache["cols"]
        n, c, h, w = x.shape
        o, k = self.c_out, self.k
        kk = k * k
        keep = cache["keep"]

        # bias block
        t1, t2 = cache["t1"], cache["t2"]
        g = self.bias3.backward(dout)
        g = self.bias2.backward(g * (t2 > 0))
        dx = self.bias1.backward(g * (t1 > 0))

        dy = dout.transpose(0, 2, 3, 1)
        dcols = np.zeros_like(cols)
        dxm = np.zeros_like(x)

        # focused branch
        idx, fz = cache["idx"], cache["fz"]
        if fz is not None:
            h1, h2, f_ci, f_co, f_kk, patch, scale, z, s = fz
            p1 = len(idx[0])
            gy = dy[idx]
            W1 = cache["W1"].reshape(o, -1)
            d_fco = gy * s
            ds = gy * f_co
            dW1 = ds.T @ z
            dz = (ds @ W1).reshape(p1, c, kk)
            dcols[idx] += (dz * scale).reshape(p1, c * kk)
            dscale = dz * patch
            d_fci = (dscale * f_kk[:, None, :]).sum(axis=2)
            d_fkk = (dscale * f_ci[:, :, None]).sum(axis=1)
            dr2 = (self.g_ci.backward(sigmoid_grad(f_ci, d_fci))
                   + self.g_co.backward(sigmoid_grad(f_co, d_fco))
                   + self.g_kk.backward(sigmoid_grad(f_kk, d_fkk)))
            dr1 = self.fc2.backward(dr2 * (h2 > 0))
            dcvec = self.fc1.backward(dr1 * (h1 > 0))
            dxm[idx[0], :, idx[1], idx[2]] += dcvec
            self.kernel1.backward(dW1.reshape(o, c, k, k), gy.sum(axis=0))

        # compact branch
        W0 = cache["W0"]
        c_ci, c_co, c_kk = cache["c_w"]
        dW0 = np.zeros_like(W0)
        db0 = np.zeros(o)
        d_cci = np.zeros_like(c_ci)
        d_cco = np.zeros_like(c_co)
        d_ckk = np.zeros_like(c_kk)
        for i in range(n):
            sel = keep[i]
            if not sel.any():
                continue
            gi = dy[i][sel]
            rows = cols[i][sel]
            dW0p = (gi.T @ rows).reshape(o, c, k, k)
            db0 += gi.sum(axis=0)
            dcols[i][sel] += gi @ cache["W0p"][i].reshape(o, -1)
            dW0 += dW0p * cache["mods"][i]
            dm = dW0p * W0
            d_cco[i] = (dm * c_ci[i][None, :, None, None] * c_kk[i].reshape(1, 1, k, k)).sum(axis=(1, 2, 3))
            d_cci[i] = (dm * c_co[i][:, None, None, None] * c_kk[i].reshape(1, 1, k, k)).sum(axis=(0, 2, 3))
            d_ckk[i] = (dm * c_co[i][:, None, None, None] * c_ci[i][None, :, None, None]).sum(axis=(0, 1)).ravel()
        self.kernel0.backward(dW0, db0)
        dv = (self.f_ci.backward(sigmoid_grad(c_ci, d_cci))
              + self.f_co.backward(sigmoid_grad(c_co, d_cco))
              + self.f_kk.backward(sigmoid_grad(c_kk, d_ckk)))
        pool, pool_n = cache["pool"], cache["pool_n"]
        dxm += (dv / pool_n[:, None])[:, :, None, None] * pool[:, None]

        dxm += col2im(dcols, x.shape, k, k // 2)

        if self.camg is None:
            return dx + dxm
        return dx + self.camg.backward(dxm)


# -- functional surface (single image, composed from tensor-core ops) ---------

def compact_weights(v, p, tally=None):
    """Global modulation weights ``sigmoid(f_t(v))`` for the three heads."""
    v = as_tensor(v)
    w_ci = sigmoid(linear(v, p.f_ci.W.value, p.f_ci.b.value, tally, "compact_heads"))
    w_co = sigmoid(linear(v, p.f_co.W.value, p.f_co.b.value, tally, "compact_heads"))
    w_kk = sigmoid(linear(v, p.f_kk.W.value, p.f_kk.b.value, tally, "compact_heads"))
    return ModulationWeights(w_ci, w_co, w_kk.reshape(w_kk.shape[:-1] + (p.k, p.k)))


def focused_weights(c, p, tally=None):
    """Per-pixel weights: two ReLU layers then three sigmoid heads."""
    c = as_tensor(c)
    e = relu(linear(c, p.fc1.W.value, p.fc1.b.value, tally, "focused_embed"))
    e = relu(linear(e, p.fc2.W.value, p.fc2.b.value, tally, "focused_embed"))
    w_ci = sigmoid(linear(e, p.g_ci.W.value, p.g_ci.b.value, tally, "focused_heads"))
    w_co = sigmoid(linear(e, p.g_co.W.value, p.g_co.b.value, tally, "focused_heads"))
    w_kk = sigmoid(linear(e, p.g_kk.W.value, p.g_kk.b.value, tally, "focused_heads"))
    return ModulationWeights(w_ci, w_co, w_kk.reshape(w_kk.shape[:-1] + (p.k, p.k)))


def modulate_kernel(W, m, tally=None):
    """``W'[o,i,u,v] = W[o,i,u,v] * w_co[o] * w_ci[i] * w_kk[u,v]``."""
    W = as_tensor(W, ndim=4, name="kernel")
    o, c, k, _ = W.shape
    if m.w_co.shape != (o,) or m.w_ci.shape != (c,) or m.w_kk.shape != (k, k):
        raise DimensionError(f"modulation shapes {m.w_co.shape}, {m.w_ci.shape}, {m.w_kk.shape} "
                             f"do not fit kernel {W.shape}")
    _tally(tally, "compact_heads", mul=o * c + 2 * o * c * k * k)
    return W * (m.w_co[:, None, None, None] * m.w_ci[None, :, None, None] * m.w_kk[None, None])


def bias_block(x, p, tally=None):
    """Three 3x3 convs with ReLU between, applied to the unmodulated input."""
    x = as_tensor(x, ndim=3)
    t = relu(conv2d(x, p.bias1.w.value, p.bias1.b.value, 1, tally, "bias_block"))
    t = relu(conv2d(t, p.bias2.w.value, p.bias2.b.value, 1, tally, "bias_block"))
    return conv2d(t, p.bias3.w.value, p.bias3.b.value, 1, tally, "bias_block")


def bimac_forward(x, p, hm=None, tally=None):
    """Run one layer on a single ``(C_in, H, W)`` map; returns ``(y, MaskPair)``."""
    x = as_tensor(x, ndim=3)
    if hm is not None:
        hm = np.asarray(hm, dtype=bool)[None]
    y = p.forward(x[None], hm=hm, tally=tally)
    return y[0], p.last_mask.sample(0)
