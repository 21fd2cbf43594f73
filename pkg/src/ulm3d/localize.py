"""Sub-voxel microbubble detection on enhanced autocorrelation volumes."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from scipy import ndimage

from .clutter import lag1_autocorrelation
from .core import Detection, GridSpec, IQVolumeBlock, ScalarVolume, sphere_offsets


def hanning_weights(window: int) -> np.ndarray:
    """Symmetric Hanning weights ``sin^2(pi k / (window - 1))`` normalised to sum 1."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return np.ones(1)
    k = np.arange(window)
    w = np.sin(np.pi * k / (window - 1)) ** 2
    return w / w.sum()


def temporal_ensemble(block: IQVolumeBlock, window: int = 5) -> IQVolumeBlock:
    """Coherent Hanning-weighted moving average along time (valid mode)."""
    if window > block.n_frames:
        raise ValueError(f"window {window} exceeds block length {block.n_frames}")
    w = hanning_weights(window)
    n_out = block.n_frames - window + 1
    f = block.frames
    out = np.zeros(f.shape[:3] + (n_out,), dtype=np.result_type(f.dtype, np.complex64)
                   if np.iscomplexobj(f) else np.result_type(f.dtype, np.float32))
    for k, wk in enumerate(w):
        if wk != 0:
            out += wk * f[..., k:k + n_out]
    return block.with_frames(out, frame_offset=block.frame_offset + (window - 1) // 2)


def sqrt_readjust(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume)
    if np.iscomplexobj(v):
        raise ValueError("sqrt_readjust expects a real envelope; take abs() first")
    if np.any(v < 0):
        raise ValueError("envelope must be non-negative")
    return np.sqrt(v)


def enhance(block: IQVolumeBlock, window: int = 5) -> IQVolumeBlock:
    """Lag-1 autocorrelation, temporal ensembling and square-root envelope.

    The returned block holds the real envelope ``sqrt(|R|)``; its
    ``frame_offset`` maps each output frame to the first IQ frame of the
    autocorrelation pair at the centre of the ensembling window.
    """
    r = temporal_ensemble(lag1_autocorrelation(block), window)
    env = sqrt_readjust(np.abs(r.frames))
    return r.with_frames(env.astype(np.float32))


def _cube_in_sphere(offsets: np.ndarray) -> bool:
    s = {tuple(o) for o in offsets}
    return all((a, b, c) in s for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1))


def find_local_maxima(envelope: np.ndarray, radius: float, spacing=(1.0, 1.0, 1.0),
                      threshold: Optional[float] = None) -> np.ndarray:
    """Voxels equal to the grey dilation of ``envelope`` by a sphere of ``radius`` (mm).

    Equal maxima closer than ``radius`` are thinned greedily in lexicographic
    ``(x, y, z)`` order. Returns an ``(n, 3)`` index array sorted by
    descending envelope, ties lexicographic. ``threshold`` only restricts the
    candidates considered (voxels below it are never returned).
    """
    env = np.asarray(envelope, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    offs = sphere_offsets(radius, spacing)
    if _cube_in_sphere(offs):
        # a maximum over the sphere is also one over its inscribed 3x3x3 cube
        cand = env == ndimage.maximum_filter(env, size=3, mode="nearest")
    else:
        cand = np.ones(env.shape, dtype=bool)
    if threshold is not None:
        cand &= env >= threshold
    idx = np.argwhere(cand)
    if idx.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    upper = np.asarray(env.shape) - 1
    keep = np.zeros(len(idx), dtype=bool)
    for s in range(0, len(idx), 2048):
        part = idx[s:s + 2048]
        nb = np.clip(part[:, None, :] + offs[None, :, :], 0, upper)
        local = env[nb[..., 0], nb[..., 1], nb[..., 2]].max(axis=1)
        keep[s:s + 2048] = env[part[:, 0], part[:, 1], part[:, 2]] >= local
    idx = idx[keep]
    vals = env[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -vals))
    idx, vals = idx[order], vals[order]
    return _thin_ties(idx, vals, radius, spacing)


def _thin_ties(idx: np.ndarray, vals: np.ndarray, radius: float, spacing: np.ndarray) -> np.ndarray:
    keep = np.ones(len(idx), dtype=bool)
    _, inverse, counts = np.unique(vals, return_inverse=True, return_counts=True)
    r2 = radius * radius * (1 + 1e-12)
    for g in np.nonzero(counts > 1)[0]:
        members = np.nonzero(inverse == g)[0]  # already in lexicographic order
        pts = idx[members] * spacing
        kept = np.zeros((0, 3))
        for m, p in zip(members, pts):
            if len(kept) and np.min(((kept - p) ** 2).sum(axis=1)) <= r2:
                keep[m] = False
            else:
                kept = np.vstack([kept, p])
    return idx[keep]


def kernel_half_width(grid: GridSpec, kernel_lambda: float = 3.0) -> np.ndarray:
    """Half width in voxels of a ``kernel_lambda`` wide cubic fitting kernel."""
    half = 0.5 * kernel_lambda * grid.wavelength / np.asarray(grid.spacing)
    return np.maximum(np.floor(half + 1e-9).astype(int), 1)


def _guo_wls(design: np.ndarray, intensity: np.ndarray, iterations: int):
    """Fit ``log I = design @ coef`` by weighted least squares.

    The first pass weights samples by ``I^2``; later passes reweight with the
    squared model prediction, which keeps noisy low-intensity tails from
    dominating the log-domain residuals.
    """
    ok = intensity > 0
    if ok.sum() < design.shape[1]:
        return None
    a, i = design[ok], intensity[ok]
    y = np.log(i)
    w = i * i
    coef = None
    for _ in range(iterations + 1):
        try:
            coef = np.linalg.solve(a.T @ (a * w[:, None]), a.T @ (w * y))
        except np.linalg.LinAlgError:
            return None
        pred = a @ coef
        w = np.exp(2 * np.clip(pred - pred.max(), -700, 0))
    return coef


def gaussian_fit(envelope: np.ndarray, center, grid: GridSpec, kernel_lambda: float = 3.0,
                 method: str = "kernel", noise_floor: float = 1.0, frame: int = 0,
                 block: int = 0, iterations: int = 5) -> Optional[Detection]:
    """Sub-voxel Gaussian fit around ``center``; ``None`` when the fit is rejected.

    The model is ``log I = a - sum_d (r_d - mu_d)^2 / (2 s_d^2)``, linear in its
    coefficients. ``kernel`` fits it over every voxel of the cubic kernel;
    ``profile`` fits one parabola per axis to the line through the centre.
    Both use weighted least squares with iterative reweighting.
    """
    env = np.asarray(envelope, dtype=float)
    c = np.asarray(center, dtype=int)
    half = kernel_half_width(grid, kernel_lambda)
    lo = np.maximum(c - half, 0)
    hi = np.minimum(c + half, np.asarray(env.shape) - 1)
    if np.prod(hi - lo + 1) < 27:
        return None
    region = env[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    if not np.all(np.isfinite(region)) or np.ptp(region) == 0:
        return None
    if method == "profile":
        mu = np.zeros(3)
        for d in range(3):
            sl = [c[0], c[1], c[2]]
            sl[d] = slice(lo[d], hi[d] + 1)
            o = (np.arange(lo[d], hi[d] + 1) - c[d]).astype(float)
            coef = _guo_wls(np.stack([np.ones_like(o), o, o * o], axis=1), env[tuple(sl)], iterations)
            if coef is None or not coef[2] < 0:
                return None
            mu[d] = -coef[1] / (2 * coef[2])
    elif method == "kernel":
        axes = [np.arange(lo[d], hi[d] + 1) - c[d] for d in range(3)]
        o = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1).astype(float)
        coef = _guo_wls(np.column_stack([np.ones(len(o)), o, o * o]), region.ravel(), iterations)
        if coef is None or not np.all(coef[4:7] < 0):
            return None
        mu = -coef[1:4] / (2 * coef[4:7])
    else:
        raise ValueError(f"unknown fit method {method!r}")
    if not np.all(np.isfinite(mu)) or np.any(c + mu < lo - 0.5) or np.any(c + mu > hi + 0.5):
        return None
    peak = env[c[0], c[1], c[2]]
    floor = noise_floor if noise_floor > 0 else np.finfo(float).tiny
    return Detection(tuple(grid.to_mm(c + mu)), float(20 * np.log10(peak / floor)), frame, block)


def noise_floor(envelope: np.ndarray) -> float:
    """Median envelope, the reference for the dB detection gate."""
    env = np.asarray(envelope)
    med = float(np.median(env))
    if med > 0:
        return med
    pos = env[env > 0]
    return float(pos.min()) if pos.size else 0.0


def detect_frame(envelope: np.ndarray, grid: GridSpec, gate_db: float = 40.0, cap: int = 2048,
                 radius_lambda: float = 2.5, kernel_lambda: float = 3.0, method: str = "kernel",
                 frame: int = 0, block: int = 0) -> list:
    """Detections in one envelope volume, brightest first, at most ``cap``."""
    env = np.asarray(envelope, dtype=float)
    floor = noise_floor(env)
    if floor <= 0:
        return []
    thresh = floor * 10 ** (gate_db / 20)
    peaks = find_local_maxima(env, radius_lambda * grid.wavelength, grid.spacing, threshold=thresh)
    out = []
    for p in peaks:
        det = gaussian_fit(env, p, grid, kernel_lambda, method, floor, frame, block)
        if det is not None and det.intensity >= gate_db:
            out.append(det)
        if len(out) >= cap:
            break
    return out


def detect_block(envelope_block: IQVolumeBlock, workers: int = 1, **kwargs) -> list:
    """Run :func:`detect_frame` on every frame; frames keep their IQ frame index."""
    b = envelope_block

    def one(t):
        return detect_frame(b.frames[..., t], b.grid, frame=b.frame_offset + t,
                            block=b.block_index, **kwargs)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            per_frame = list(ex.map(one, range(b.n_frames)))
    else:
        per_frame = [one(t) for t in range(b.n_frames)]
    return [d for frame in per_frame for d in frame]


def envelope_volume(block: IQVolumeBlock, t: int) -> ScalarVolume:
    return ScalarVolume(block.grid, np.asarray(block.frames[..., t]).real, block.block_index)
