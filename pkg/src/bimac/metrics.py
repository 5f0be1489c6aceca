"""Reduced-resolution quality metrics: SAM, ERGAS and the hypercomplex Q2n index."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, MetricError

Q2N_BANDS = (4, 8)


def _pair(pred, gt, min_bands=1):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise DimensionError(f"expected (C, H, W), got {pred.shape}")
    if pred.shape[0] < min_bands:
        raise DimensionError(f"need at least {min_bands} bands, got {pred.shape[0]}")
    return pred, gt


def sam(pred, gt):
    """Mean spectral angle in degrees; pixels where either vector is zero are skipped."""
    pred, gt = _pair(pred, gt, min_bands=2)
    dot = np.einsum("chw,chw->hw", pred, gt)
    # one sqrt of the product: exact for parallel vectors, where sqrt(a)*sqrt(a) is not
    norms = np.sqrt(np.einsum("chw,chw->hw", pred, pred) * np.einsum("chw,chw->hw", gt, gt))
    ok = norms > 0
    if not ok.any():
        raise MetricError("SAM undefined: every pixel has a zero spectral vector")
    cos = np.clip(dot[ok] / norms[ok], -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def ergas(pred, gt, ratio=4):
    pred, gt = _pair(pred, gt)
    means = gt.mean(axis=(1, 2))
    if np.any(means == 0):
        raise MetricError("ERGAS undefined: a reference band has zero mean")
    rmse = np.sqrt(((pred - gt) ** 2).mean(axis=(1, 2)))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / means) ** 2)))


# -- hypercomplex algebra ------------------------------------------------------

def cd_conj(a):
    out = -a
    out[..., 0] = a[..., 0]
    return out


def cd_mul(a, b):
    """Cayley-Dickson product on the last axis (length a power of two).

    ``(p, q)(r, s) = (p r - s* q, s p + q r*)``
    """
    d = a.shape[-1]
    if d == 1:
        return a * b
    h = d // 2
    p, q = a[..., :h], a[..., h:]
    r, s = b[..., :h], b[..., h:]
    return np.concatenate([cd_mul(p, r) - cd_mul(cd_conj(s), q),
                           cd_mul(s, p) + cd_mul(q, cd_conj(r))], axis=-1)


def _block_q(x, y):
    """Hypercomplex quality of one block; ``x`` reference, ``y`` test, shape (P, D)."""
    n = x.shape[0]
    mx = x.mean(axis=0)
    sx = x.std(axis=0, ddof=1)
    flat = sx == 0
    sx_safe = np.where(flat, 1.0, sx)
    x = np.where(flat, x - mx + 1.0, (x - mx) / sx_safe + 1.0)
    y = np.where(flat, y - mx + 1.0, (y - mx) / sx_safe + 1.0)

    c = n / (n - 1.0)
    m1, m2 = x.mean(axis=0), y.mean(axis=0)
    mm1 = cd_mul(m1, cd_conj(m1))[0]
    mm2 = cd_mul(m2, cd_conj(m2))[0]
    # sqrt of a product keeps the x == y case exact
    mean_bias = 2.0 * np.sqrt(mm1 * mm2) / (mm1 + mm2)
    # every mean reduces a full (P, D) product the same way, so cov == v1 == v2 when x == y
    v1 = c * (cd_mul(x, cd_conj(x)).mean(axis=0)[0] - mm1)
    v2 = c * (cd_mul(y, cd_conj(y)).mean(axis=0)[0] - mm2)
    denom = v1 + v2
    if denom == 0:
        return float(mean_bias)
    cov = c * (cd_mul(x, cd_conj(y)).mean(axis=0) - cd_mul(m1, cd_conj(m2)))
    q = (2.0 * cov * mean_bias) / denom
    return float(np.sqrt(np.sum(q * q)))


def q2n(pred, gt, block=32, stride=None):
    """Mean over blocks of the hypercomplex universal image quality index.

    Each band of both images is standardised with the reference block's mean
    and std (then shifted by one), as in the usual Q2n construction.
    """
    pred, gt = _pair(pred, gt)
    c, h, w = gt.shape
    if c not in Q2N_BANDS:
        raise DimensionError(f"Q2n supports {Q2N_BANDS} bands, got {c}")
    if h < block or w < block:
        raise DimensionError(f"image {h}x{w} smaller than block {block}")
    stride = block if stride is None else stride
    vals = []
    for i in range(0, h - block + 1, stride):
        for j in range(0, w - block + 1, stride):
            gx = gt[:, i:i + block, j:j + block].reshape(c, -1).T
            px = pred[:, i:i + block, j:j + block].reshape(c, -1).T
            vals.append(_block_q(gx, px))
    return float(np.mean(vals))


def evaluate(pred, gt, ratio=4, block=32):
    """``(SAM, ERGAS, Q2n)``; Q2n is NaN when the band count or size is unsupported."""
    try:
        q = q2n(pred, gt, block)
    except DimensionError:
        q = float("nan")
    return sam(pred, gt), ergas(pred, gt, ratio), q
