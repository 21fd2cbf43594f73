"""Resolution and statistical metrology.

Fourier shell correlation between two half-data renderings, with the
half-bit information threshold, and a two-sample Kolmogorov-Smirnov test for
comparing velocity distributions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import kolmogorov

from .core import GridSpec, ShapeError


def split_tracks(tracks: Sequence, seed: int = 0) -> tuple:
    """Random partition into two halves; the first gets the extra element."""
    n = len(tracks)
    if n < 2:
        raise ValueError("need at least two tracks to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = (n + 1) // 2
    first, second = np.sort(perm[:k]), np.sort(perm[k:])
    return [tracks[i] for i in first], [tracks[i] for i in second]


def half_bit_threshold(n_voxels) -> np.ndarray:
    n = np.asarray(n_voxels, dtype=float)
    r = 1.0 / np.sqrt(n)
    return (0.2071 + 1.9102 * r) / (1.2071 + 0.9102 * r)


@dataclass
class FscCurve:
    radii: np.ndarray          # spatial frequency, 1/mm
    correlation: np.ndarray
    n_voxels: np.ndarray
    threshold: np.ndarray
    resolution: float          # mm
    resolved: bool
    empty_shells: np.ndarray   # shells whose energy was zero

    @property
    def resolution_um(self) -> float:
        return self.resolution * 1e3

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius_per_mm", "fsc", "halfbit", "n_voxels"])
            for row in zip(self.radii, self.correlation, self.threshold, self.n_voxels):
                w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])


def _shell_index(shape, spacing) -> tuple:
    """Integer shell radius of every FFT voxel and the frequency step (1/mm)."""
    freqs = [np.fft.fftfreq(n, d) for n, d in zip(shape, spacing)]
    step = max(1.0 / (n * d) for n, d in zip(shape, spacing))
    grids = np.meshgrid(*freqs, indexing="ij", sparse=True)
    r = np.sqrt(sum(g * g for g in grids)) / step
    return np.floor(r + 0.5).astype(np.int64), step


def fsc(volume_a: np.ndarray, volume_b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> FscCurve:
    """Shell-wise normalised cross-spectrum of two volumes on the same grid.

    Shells are one frequency step wide, the step being the coarsest axis
    resolution ``1 / (n * spacing)``, and run up to the lowest axis Nyquist.
    The resolution is the inverse frequency where the curve first drops
    below the half-bit threshold, linearly interpolated between shells.
    Without a crossing it is the Nyquist period and ``resolved`` is False.
    """
    a = np.asarray(volume_a, dtype=float)
    b = np.asarray(volume_b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (a.ndim,))
    fa, fb = np.fft.fftn(a), np.fft.fftn(b)
    shell, step = _shell_index(a.shape, spacing)
    nyquist = min(0.5 / d for d in spacing)
    n_shells = int(np.floor(nyquist / step + 1e-9)) + 1
    flat = shell.ravel()
    keep = flat < n_shells
    idx = flat[keep]
    cross = np.bincount(idx, (fa * np.conj(fb)).real.ravel()[keep], n_shells)
    ea = np.bincount(idx, (np.abs(fa) ** 2).ravel()[keep], n_shells)
    eb = np.bincount(idx, (np.abs(fb) ** 2).ravel()[keep], n_shells)
    counts = np.bincount(idx, minlength=n_shells)
    denom = np.sqrt(ea * eb)
    empty = denom <= 0
    corr = np.where(empty, 0.0, cross / np.where(empty, 1.0, denom))
    valid = counts > 0
    radii = np.arange(n_shells)[valid] * step
    corr, counts, empty = corr[valid], counts[valid], empty[valid]
    thr = half_bit_threshold(counts)
    res, resolved = 1.0 / nyquist, False
    for k in range(1, len(corr)):
        if corr[k] < thr[k]:
            d0, d1 = corr[k - 1] - thr[k - 1], corr[k] - thr[k]
            frac = d0 / (d0 - d1) if d0 > d1 else 0.0
            f = radii[k - 1] + frac * (radii[k] - radii[k - 1])
            if f > 0:
                res, resolved = 1.0 / f, True
            break
    return FscCurve(radii, corr, counts, thr, float(res), resolved, np.nonzero(empty)[0])


def fsc_on_grid(volume_a, volume_b, grid: GridSpec) -> FscCurve:
    return fsc(volume_a, volume_b, grid.spacing)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    pvalue: float


def ks_2samp(sample_a, sample_b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    a = np.sort(np.asarray(sample_a, dtype=float).ravel())
    b = np.sort(np.asarray(sample_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    en = a.size * b.size / (a.size + b.size)
    p = float(np.clip(kolmogorov(np.sqrt(en) * d), 0.0, 1.0)) if d > 0 else 1.0
    return KsResult(d, p)


def profile_along_line(volume: np.ndarray, grid: GridSpec, start, end, n: Optional[int] = None) -> tuple:
    """Sample ``volume`` along a segment (mm) with trilinear interpolation.

    Returns ``(distance_mm, values)``.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    length = float(np.linalg.norm(end - start))
    if n is None:
        n = max(2, int(np.ceil(length / min(grid.spacing))) + 1)
    t = np.linspace(0.0, 1.0, n)
    pts = start[None] + t[:, None] * (end - start)[None]
    idx = grid.to_index(pts)
    vals = map_coordinates(np.asarray(volume, float), idx.T, order=1, mode="nearest")
    return t * length, vals


def write_profile_csv(path, distance, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_mm", "value"])
        for d, v in zip(distance, values):
            w.writerow([repr(float(d)), repr(float(v))])


def region_values(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    v = np.asarray(volume)
    m = np.asarray(mask, dtype=bool)
    if v.shape != m.shape:
        raise ShapeError("mask shape does not match volume")
    return v[m]


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
