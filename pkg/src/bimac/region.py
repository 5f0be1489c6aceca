"""Patch complexity profiles: singular-value decay and radial power spectra.

Low-rank, low-frequency patches are "redundant"; high-rank or
high-frequency ones are "complex".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

RANK_CUTOFF = 0.01
RANK_THRESH = 5
HF_THRESH = 0.25


def jacobi_singular_values(a, tol=1e-15, max_sweeps=60):
    """Singular values of ``a`` by one-sided (Hestenes) Jacobi rotations, descending."""
    a = np.array(a, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    n = a.shape[1]
    # columns this small are numerically null; rotating them only underflows
    negligible = (np.finfo(float).eps * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if min(alpha, beta) <= negligible or abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                a[:, p] = new_p
        if not rotated:
            break
    return np.sort(np.sqrt(np.einsum("ij,ij->j", a, a)))[::-1]


def svd_spectrum(patch):
    """Singular values normalised so ``s1 = 1`` (all zeros for a zero patch)."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or min(patch.shape) < 2:
        raise DimensionError(f"patch must be a 2-D matrix with both sides >= 2, got {patch.shape}")
    s = jacobi_singular_values(patch)
    return s / s[0] if s[0] > 0 else np.zeros_like(s)


def effective_rank(spectrum, cutoff=RANK_CUTOFF):
    spectrum = np.asarray(spectrum)
    if spectrum.size == 0 or spectrum[0] == 0:
        return 0
    return int(np.count_nonzero(spectrum >= cutoff * spectrum[0]))


def radial_bins(n):
    """Integer radius of each centred frequency on an ``n x n`` grid, and bin counts."""
    u = np.arange(n) - n // 2
    r = np.rint(np.hypot(u[:, None], u[None, :])).astype(int)
    return r, np.bincount(r.ravel())


def power_spectrum(patch):
    """Centred ``|DFT|^2`` of a square patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise DimensionError(f"radial spectrum needs a square patch, got {patch.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(patch))) ** 2


def radial_power_spectrum(patch):
    """Mean power per integer-radius annulus around DC."""
    p = power_spectrum(patch)
    r, counts = radial_bins(p.shape[0])
    sums = np.bincount(r.ravel(), weights=p.ravel())
    return sums / counts


def hf_ratio(patch):
    """Fraction of spectral energy at radii above half the Nyquist radius (DC counts in the total)."""
    p = power_spectrum(patch)
    n = p.shape[0]
    r, _ = radial_bins(n)
    total = p.sum()
    if total == 0:
        return 0.0
    return float(p[r > n / 4].sum() / total)


@dataclass
class PatchProfile:
    singular: np.ndarray
    eff_rank: int
    spectrum: np.ndarray
    hf_ratio: float


def profile_patch(patch, cutoff=RANK_CUTOFF):
    s = svd_spectrum(patch)
    return PatchProfile(s, effective_rank(s, cutoff), radial_power_spectrum(patch), hf_ratio(patch))


def classify_patch(profile, rank_thresh=RANK_THRESH, hf_thresh=HF_THRESH):
    """``"complex"`` iff effective rank >= ``rank_thresh`` or hf ratio >= ``hf_thresh``.

    ``rank_thresh`` must exceed 1: every nonzero patch has rank at least one.
    """
    if rank_thresh <= 1:
        raise ConfigError(f"rank_thresh must be > 1, got {rank_thresh}")
    if not 0.0 < hf_thresh <= 1.0:
        raise ConfigError(f"hf_thresh must lie in (0, 1], got {hf_thresh}")
    if profile.eff_rank >= rank_thresh or profile.hf_ratio >= hf_thresh:
        return "complex"
    return "redundant"


def tile(img, patch):
    """Non-overlapping ``patch x patch`` tiles of a 2-D image, row-major, with their origins."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if patch < 2 or patch > min(h, w):
        raise DimensionError(f"patch {patch} does not fit a {h}x{w} image")
    out = []
    for i in range(0, h - patch + 1, patch):
        for j in range(0, w - patch + 1, patch):
            out.append(((i, j), img[i:i + patch, j:j + patch]))
    return out


def analyze_image(img, patch, rank_thresh=RANK_THRESH, hf_thresh=HF_THRESH):
    """Profile every tile; multi-band ``(C, H, W)`` input is averaged over bands."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    rows = []
    for origin, tile_ in tile(img, patch):
        prof = profile_patch(tile_)
        rows.append((origin, prof, classify_patch(prof, rank_thresh, hf_thresh)))
    return rows
