"""Synthetic scenes and reduced-resolution (Wald) sample generation.

Scenes mix smooth Gaussian blobs (low-rank, low-frequency background) with
hard-edged rectangles and ellipses (high-frequency structure). Each sample
is degraded the standard way: the ground truth is blurred and decimated to
produce the low-resolution MS input, and a convex band mix produces PAN.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError, DimensionError
from .fileio import read_tensor, write_tensor

RATIO = 4
BLUR_SIGMA = 1.7
MANIFEST = "manifest.txt"
SPECTRAL_SPREAD = 0.6


@dataclass
class WaldSample:
    gt: np.ndarray    # (C, h, w)
    pan: np.ndarray   # (1, h, w)
    lrms: np.ndarray  # (C, h/ratio, w/ratio)


def synth_scene(seed, c, h, w, n_blobs=4, n_shapes=6, spread=SPECTRAL_SPREAD):
    """Seeded ``(c, h, w)`` scene with values in ``[0, 1]``.

    Shape spectra are ``level * (1 + spread * u)`` with ``u ~ U(-1, 1)`` per band:
    one shared level keeps bands correlated, ``spread`` sets how far a
    material's spectral signature departs from flat.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((c, h, w))
    size = min(h, w)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(0.3, 0.8) * size
        spectrum = rng.uniform(0.15, 0.5, c)
        img += spectrum[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.08, 0.25, 2) * size
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        level = rng.uniform(0.2, 0.9)
        spectrum = level * (1.0 + spread * rng.uniform(-1, 1, c))
        img[:, region] = spectrum[:, None]
    return np.clip(img, 0.0, 1.0)


def gaussian_kernel(sigma, radius=None, half=False):
    """Normalized sampled Gaussian.

    Taps sit at integers ``-radius..radius`` (default radius ``ceil(3 sigma)``),
    or at half-integers ``-radius+0.5..radius-0.5`` when ``half`` is set.
    """
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    t = np.arange(-radius, radius + (0 if half else 1), dtype=np.float64) + (0.5 if half else 0.0)
    g = np.exp(-t**2 / (2 * sigma**2))
    return g / g.sum()


def gaussian_blur(img, sigma, half=False):
    """Separable blur of the last two axes, symmetric boundary.

    With ``half`` the output at index ``i`` is the blur centred at ``i - 0.5``.
    """
    g = gaussian_kernel(sigma, half=half)
    out = correlate1d(np.asarray(img, dtype=np.float64), g, axis=-2, mode="reflect")
    return correlate1d(out, g, axis=-1, mode="reflect")


def decimate(img, ratio=RATIO):
    off = ratio // 2
    return img[..., off::ratio, off::ratio]


def wald_degrade(gt, ratio=RATIO, blur_sigma=BLUR_SIGMA, pan_weights=None):
    """Build a :class:`WaldSample` from a full-resolution ``(C, h, w)`` scene.

    Each low-res pixel is the blur evaluated at the centre of its
    ``ratio x ratio`` footprint, position ``ratio*j + (ratio-1)/2``; for even
    ``ratio`` that is a half-pixel blur sampled at offset ``ratio // 2``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    c, h, w = gt.shape
    if h % ratio or w % ratio:
        raise DimensionError(f"scene {h}x{w} is not divisible by ratio {ratio}")
    if pan_weights is None:
        pan_weights = np.full(c, 1.0 / c)
    pan_weights = np.asarray(pan_weights, dtype=np.float64)
    if pan_weights.shape != (c,) or np.any(pan_weights < 0) or not np.isclose(pan_weights.sum(), 1.0):
        raise ValueError("pan_weights must be C non-negative values summing to 1")
    lrms = decimate(gaussian_blur(gt, blur_sigma, half=ratio % 2 == 0), ratio)
    pan = np.tensordot(pan_weights, gt, axes=1)[None]
    return WaldSample(gt, pan, np.ascontiguousarray(lrms))


def make_dataset(count, c, h, w, seed=0, blur_sigma=BLUR_SIGMA, pan_weights=None,
                 n_blobs=4, n_shapes=6):
    """``count`` samples; sample ``i`` uses scene seed ``(seed, i)``."""
    return [wald_degrade(synth_scene([seed, i], c, h, w, n_blobs, n_shapes),
                         blur_sigma=blur_sigma, pan_weights=pan_weights)
            for i in range(count)]


def stack(samples):
    """Batch arrays ``(gt, pan, lrms)`` with a leading sample axis."""
    return (np.stack([s.gt for s in samples]), np.stack([s.pan for s in samples]),
            np.stack([s.lrms for s in samples]))


def save_dataset(samples, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"count {len(samples)}"]
    for i, s in enumerate(samples):
        for field in ("gt", "pan", "lrms"):
            write_tensor(d / f"{field}_{i}.bmt", getattr(s, field))
        lines.append(f"{i} gt_{i}.bmt pan_{i}.bmt lrms_{i}.bmt")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(directory):
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise DataError(f"no {MANIFEST} in {d}")
    rows = [ln.split() for ln in manifest.read_text().splitlines() if ln.strip()]
    if not rows or rows[0][0] != "count":
        raise DataError(f"{manifest}: first line must be 'count N'")
    count = int(rows[0][1])
    samples = []
    for row in rows[1:]:
        if len(row) != 4:
            raise DataError(f"{manifest}: malformed row {' '.join(row)!r}")
        gt, pan, lrms = (read_tensor(d / name) for name in row[1:])
        samples.append(WaldSample(gt, pan, lrms))
    if len(samples) != count:
        raise DataError(f"{manifest}: expected {count} samples, found {len(samples)}")
    return samples
