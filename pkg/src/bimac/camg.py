"""Content-adaptive mask generation: soft mask, feature modulation, hard routing mask."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .layers import Conv2d, Module, sigmoid_grad
from .tensor import _tally, as_tensor, check_finite, conv2d, sigmoid

DEFAULT_ALPHA = 2.0


@dataclass
class MaskPair:
    """Masks and threshold statistics for one feature map (or a batch of them).

    With a batch, ``mu``/``sigma_s``/``T``/``focused_fraction`` are arrays of
    shape ``(N,)`` and the maps carry a leading ``N`` axis.
    """

    SM: Optional[np.ndarray]
    X_mod: np.ndarray
    SM_F: Optional[np.ndarray]
    mu: object
    sigma_s: object
    alpha: float
    T: object
    HM: np.ndarray
    focused_fraction: object

    def sample(self, n):
        """Per-image view of a batched MaskPair."""
        pick = lambda a: None if a is None else a[n]
        return MaskPair(pick(self.SM), self.X_mod[n], pick(self.SM_F), np.asarray(self.mu)[n].item(),
                        np.asarray(self.sigma_s)[n].item(), self.alpha, np.asarray(self.T)[n].item(),
                        self.HM[n], np.asarray(self.focused_fraction)[n].item())


class CAMG(Module):
    """Mask generator parameters: one ``k x k`` conv (``C_in -> C_in``) plus ``alpha``.

    ``force`` pins the threshold at ``+inf`` ("compact": every pixel to the
    compact branch) or ``-inf`` ("focused"), as the branch ablations require.
    """

    def __init__(self, channels, k=3, alpha=DEFAULT_ALPHA, rng=None, force=None):
        if not np.isfinite(alpha):
            raise ValueError("alpha must be finite")
        self.conv = Conv2d(channels, channels, k, rng)
        self.alpha = float(alpha)
        self.force = force
        self._cache = None

    @property
    def channels(self):
        return self.conv.c_in

    def forward(self, x, tally=None):
        a = self.conv.forward(x, tally, tag="camg")
        sm = sigmoid(a)
        x_mod = modulate(x, sm, tally)
        sm_f, mu, sigma_s, t, hm = hard_mask(sm, self.alpha, force=self.force, tally=tally)
        self._cache = (x, sm)
        frac = hm.mean(axis=(-3, -2, -1))
        return MaskPair(sm, x_mod, sm_f, mu, sigma_s, self.alpha, t, hm, frac)

    def backward(self, dx_mod):
        x, sm = self._need_cache()
        dx = dx_mod * sm
        da = sigmoid_grad(sm, dx_mod * x)
        return dx + self.conv.backward(da)


def _check_params(x, p):
    if x.shape[-3] != p.channels:
        raise DimensionError(f"input has {x.shape[-3]} channels, CAMG expects {p.channels}")


def soft_mask(x, p, tally=None):
    """``SM = sigmoid(conv(x))`` with entries in (0, 1)."""
    x = as_tensor(x, ndim=(3, 4))
    _check_params(x, p)
    a = conv2d(x, p.conv.w.value, p.conv.b.value, p.conv.k // 2, tally, tag="camg")
    return sigmoid(a)


def modulate(x, sm, tally=None):
    """Elementwise ``X' = X * SM``."""
    x = np.asarray(x, dtype=np.float64)
    sm = np.asarray(sm, dtype=np.float64)
    if x.shape != sm.shape:
        raise DimensionError(f"modulate: {x.shape} vs {sm.shape}")
    _tally(tally, "camg", mul=x.size)
    return check_finite(x * sm, "modulated features")


def hard_mask(sm, alpha, force=None, tally=None):
    """Threshold the channel-mean soft mask at ``T = mu + alpha * sigma_s``.

    Works on ``(C, H, W)`` or batched ``(N, C, H, W)``; statistics are per
    image and ``sigma_s`` is the population standard deviation. Returns
    ``(SM_F, mu, sigma_s, T, HM)`` with ``HM = SM_F > T`` (ties go to 0).
    """
    sm = np.asarray(sm, dtype=np.float64)
    c, h, w = sm.shape[-3:]
    sm_f = sm.mean(axis=-3, keepdims=True)
    mu = sm_f.mean(axis=(-3, -2, -1))
    sigma_s = sm_f.std(axis=(-3, -2, -1))
    if force == "compact":
        t = np.full_like(mu, np.inf)
    elif force == "focused":
        t = np.full_like(mu, -np.inf)
    else:
        t = mu + alpha * sigma_s
    hm = sm_f > np.asarray(t)[..., None, None, None]
    if tally is not None:
        images = int(np.prod(sm.shape[:-3], dtype=np.int64))
        npx = h * w
        _tally(tally, "camg", mul=images * (npx + 1 + npx + 1 + 1),
               add=images * (npx * c + npx + 2 * npx + 1))
    if sm.ndim == 3:
        return sm_f, float(mu), float(sigma_s), float(t), hm
    return sm_f, mu, sigma_s, t, hm


def camg_forward(x, p, tally=None):
    """Full mask generation for one ``(C, H, W)`` map."""
    x = as_tensor(x, ndim=3)
    sm = soft_mask(x, p, tally)
    x_mod = modulate(x, sm, tally)
    sm_f, mu, sigma_s, t, hm = hard_mask(sm, p.alpha, force=p.force, tally=tally)
    return MaskPair(sm, x_mod, sm_f, mu, sigma_s, p.alpha, t, hm, float(hm.mean()))
