"""Tracks to super-resolved density and velocity maps.

Each track is smoothed by penalized least squares, resampled with a
modified Akima interpolant at a step no larger than the rendering voxel,
and projected onto the grid with every track counted at most once per
voxel.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import GridSpec
from .track import Track

GCV_GRID = np.logspace(-6, 6, 25)


@lru_cache(maxsize=512)
def _penalty_basis(n: int):
    d2 = np.diff(np.eye(n), 2, axis=0)
    evals, evecs = np.linalg.eigh(d2.T @ d2)
    evals = np.clip(evals, 0, None)
    evals.setflags(write=False)
    evecs.setflags(write=False)
    return evals, evecs


def gcv_smooth(y: np.ndarray, s: Optional[float] = None, grid: Sequence[float] = GCV_GRID):
    """Minimise ``|y - f|^2 + s |D2 f|^2`` column-wise with one shared ``s``.

    ``D2`` is the second-difference operator, so straight lines pass through
    unchanged. With ``s=None`` the parameter minimising the generalized
    cross-validation score over ``grid`` is used. Returns ``(f, s)``.
    """
    y = np.asarray(y, dtype=float)
    col = y.ndim == 1
    y2 = y[:, None] if col else y
    n = y2.shape[0]
    if n < 3:
        return y.copy(), 0.0
    lam, q = _penalty_basis(n)
    coef = q.T @ y2
    if s is None:
        best = None
        for cand in grid:
            g = 1.0 / (1.0 + cand * lam)
            rss = float((((1 - g)[:, None] * coef) ** 2).sum())
            denom = (1.0 - g.sum() / n) ** 2
            score = rss / (n * y2.shape[1]) / denom if denom > 0 else np.inf
            if best is None or score < best[0]:
                best = (score, cand)
        s = best[1]
    g = 1.0 / (1.0 + s * lam)
    fit = q @ (g[:, None] * coef)
    return (fit[:, 0] if col else fit), float(s)


def makima_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Node derivatives of the modified Akima interpolant (rows of ``y`` are nodes)."""
    h = np.diff(x)
    delta = np.diff(y, axis=0) / h.reshape((-1,) + (1,) * (y.ndim - 1))
    n = len(x)
    if n < 4:
        raise ValueError("modified Akima slopes need at least 4 nodes")
    dm1 = 2 * delta[0] - delta[1]
    dm2 = 2 * dm1 - delta[0]
    dn = 2 * delta[-1] - delta[-2]
    dn1 = 2 * dn - delta[-1]
    e = np.concatenate([dm2[None], dm1[None], delta, dn[None], dn1[None]], axis=0)
    d_im2, d_im1, d_i, d_ip1 = e[:-3], e[1:-2], e[2:-1], e[3:]
    w1 = np.abs(d_ip1 - d_i) + np.abs(d_ip1 + d_i) / 2
    w2 = np.abs(d_im1 - d_im2) + np.abs(d_im1 + d_im2) / 2
    total = w1 + w2
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, (w1 * d_im1 + w2 * d_i) / safe, 0.0)


def makima_interpolate(x, y, xq) -> np.ndarray:
    """Evaluate the modified Akima interpolant of ``(x, y)`` at ``xq``.

    ``y`` may carry extra trailing dimensions. Two or three nodes fall back
    to piecewise-linear interpolation. Queries outside ``[x0, xn]`` use the
    end pieces.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xq = np.asarray(xq, dtype=float)
    if x.ndim != 1 or len(x) < 2 or len(y) != len(x):
        raise ValueError("need at least two nodes with matching x and y")
    if np.any(np.diff(x) <= 0):
        raise ValueError("parameter values must be strictly increasing")
    i = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
    h = (x[i + 1] - x[i])
    t = (xq - x[i]) / h
    shape = (-1,) + (1,) * (y.ndim - 1)
    t = t.reshape(shape)
    y0, y1 = y[i], y[i + 1]
    if len(x) < 4:
        return y0 + (y1 - y0) * t
    d = makima_slopes(x, y)
    hh = h.reshape(shape)
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * y0 + h10 * hh * d[i] + h01 * y1 + h11 * hh * d[i + 1]


@dataclass
class SmoothedTrack:
    source: Track
    smoothed_positions: np.ndarray
    smoothing: float = 0.0
    velocities: Optional[np.ndarray] = None
    sample_params: Optional[np.ndarray] = None
    interpolated_positions: Optional[np.ndarray] = None
    interpolated_velocities: Optional[np.ndarray] = None
    step: Optional[float] = field(default=None)


def smooth_track(track: Track, s: Optional[float] = None) -> SmoothedTrack:
    pos = track.positions
    fit, s_used = gcv_smooth(pos, s)
    return SmoothedTrack(track, fit, s_used)


def _resample_params(pos: np.ndarray, step: float, max_rounds: int = 12) -> tuple:
    n = len(pos)
    if n == 1:
        return np.zeros(1), pos.copy()
    chords = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    m = np.maximum(1, np.ceil(chords / step).astype(int))
    x = np.arange(n, dtype=float)
    for _ in range(max_rounds):
        params = np.concatenate([i + np.arange(m[i]) / m[i] for i in range(n - 1)] + [[n - 1.0]])
        pts = makima_interpolate(x, pos, params)
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        interval = np.floor(params[:-1]).astype(int)
        too_far = np.unique(interval[gaps > step])
        if too_far.size == 0:
            return params, pts
        m[too_far] *= 2
    return params, pts


def interpolate_track(st: SmoothedTrack, step: float) -> SmoothedTrack:
    """Resample the smoothed path so consecutive samples are at most ``step`` apart."""
    params, pts = _resample_params(st.smoothed_positions, step)
    st.sample_params, st.interpolated_positions, st.step = params, pts, step
    if st.velocities is not None:
        st.interpolated_velocities = _interp_velocities(st.velocities, params)
    return st


def _interp_velocities(vel: np.ndarray, params: np.ndarray) -> np.ndarray:
    # forward difference v_i sits between frames i and i + 1
    if len(vel) == 0:
        return np.zeros((len(params), 3))
    if len(vel) == 1:
        return np.repeat(vel, len(params), axis=0)
    mid = np.arange(len(vel)) + 0.5
    return makima_interpolate(mid, vel, np.clip(params, mid[0], mid[-1]))


def track_velocities(st: SmoothedTrack, volume_rate: float) -> SmoothedTrack:
    """Forward-difference velocities (mm/s) of the smoothed positions."""
    st.velocities = np.diff(st.smoothed_positions, axis=0) * volume_rate
    if st.sample_params is not None:
        st.interpolated_velocities = _interp_velocities(st.velocities, st.sample_params)
    return st


def process_track(track: Track, step: float, volume_rate: Optional[float] = None,
                  s: Optional[float] = None) -> SmoothedTrack:
    """Smooth, differentiate (when ``volume_rate`` is given) and resample one track."""
    st = smooth_track(track, s)
    if volume_rate is not None:
        track_velocities(st, volume_rate)
    return interpolate_track(st, step)


def process_tracks(tracks: Sequence[Track], step: float, volume_rate: Optional[float] = None,
                   workers: int = 1) -> list:
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda t: process_track(t, step, volume_rate), tracks))
    return [process_track(t, step, volume_rate) for t in tracks]


@dataclass
class RenderedMap:
    grid: GridSpec
    density: np.ndarray
    count: Optional[np.ndarray] = None
    velocity_sum: Optional[np.ndarray] = None
    n_tracks: int = 0

    def rendered_density(self, sigma: float = 1.0) -> np.ndarray:
        return ndimage.gaussian_filter(self.density.astype(np.float32), sigma)

    def mean_velocity(self, min_count: int = 2) -> np.ndarray:
        """Per-voxel mean velocity; voxels with fewer than ``min_count`` tracks are zero."""
        if self.velocity_sum is None:
            raise ValueError("map has no velocity data")
        cnt = self.count[..., None]
        ok = cnt >= min_count
        return np.where(ok, self.velocity_sum / np.where(ok, cnt, 1), 0.0)

    def velocity_mask(self, min_count: int = 2) -> np.ndarray:
        return self.count >= min_count

    def rendered_velocity(self, sigma: float = 1.0) -> np.ndarray:
        mean = self.mean_velocity()
        if sigma <= 0:
            return mean
        return np.stack([ndimage.gaussian_filter(mean[..., d], sigma) for d in range(3)], axis=-1)

    def axial_velocity(self, sigma: float = 1.0) -> np.ndarray:
        """Signed depth component, positive for downward (increasing z) flow."""
        return self.rendered_velocity(sigma)[..., 2]

    def velocity_magnitude(self, sigma: float = 1.0) -> np.ndarray:
        return np.linalg.norm(self.rendered_velocity(sigma), axis=-1)


def _track_voxels(st: SmoothedTrack, grid: GridSpec):
    pts = st.interpolated_positions
    idx = grid.voxel_of(pts)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    lin = np.ravel_multi_index(tuple(idx[inside].T), grid.dims) if inside.any() else np.zeros(0, int)
    return lin, inside


def _check_step(tracks: Sequence[SmoothedTrack], grid: GridSpec) -> None:
    for st in tracks:
        if st.interpolated_positions is None:
            raise ValueError("tracks must be interpolated before accumulation")
        if st.step is not None and st.step > min(grid.spacing) * (1 + 1e-9):
            raise ValueError(f"sampling step {st.step} exceeds voxel size {min(grid.spacing)}")


def accumulate_density(tracks: Sequence[SmoothedTrack], grid: GridSpec) -> RenderedMap:
    """Count, per voxel, the tracks whose interpolated path enters it."""
    _check_step(tracks, grid)
    parts = [np.unique(_track_voxels(st, grid)[0]) for st in tracks]
    lin = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    density = np.bincount(lin, minlength=grid.size).astype(np.int32).reshape(grid.dims)
    return RenderedMap(grid, density, n_tracks=len(tracks))


def accumulate_velocity(tracks: Sequence[SmoothedTrack], grid: GridSpec,
                        normalize: str = "tracks", into: Optional[RenderedMap] = None) -> RenderedMap:
    """Sum velocities per voxel and count the contributors.

    With ``normalize="tracks"`` each track adds the mean of its samples in a
    voxel once and the count is the number of tracks; with ``"samples"``
    every interpolated sample counts.
    """
    _check_step(tracks, grid)
    if normalize not in ("tracks", "samples"):
        raise ValueError("normalize must be 'tracks' or 'samples'")
    lins, vals = [], []
    for st in tracks:
        if st.interpolated_velocities is None:
            raise ValueError("track velocities have not been computed")
        lin, inside = _track_voxels(st, grid)
        v = st.interpolated_velocities[inside]
        if normalize == "tracks" and lin.size:
            u, inv, n = np.unique(lin, return_inverse=True, return_counts=True)
            mean = np.stack([np.bincount(inv, v[:, d], minlength=len(u)) for d in range(3)], 1) / n[:, None]
            lin, v = u, mean
        lins.append(lin)
        vals.append(v)
    lin = np.concatenate(lins) if lins else np.zeros(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.zeros((0, 3))
    count = np.bincount(lin, minlength=grid.size).astype(np.int32).reshape(grid.dims)
    vsum = np.stack([np.bincount(lin, v[:, d], minlength=grid.size) for d in range(3)], axis=-1)
    vsum = vsum.reshape(grid.dims + (3,))
    if into is None:
        into = RenderedMap(grid, np.zeros(grid.dims, dtype=np.int32), n_tracks=len(tracks))
    into.count, into.velocity_sum = count, vsum
    return into


def render_tracks(tracks: Sequence[Track], grid: GridSpec, volume_rate: Optional[float] = None,
                  workers: int = 1, normalize: str = "tracks") -> RenderedMap:
    """Full path: smoothing, velocities, resampling at the voxel size, accumulation."""
    step = min(grid.spacing)
    processed = process_tracks(tracks, step, volume_rate, workers)
    m = accumulate_density(processed, grid)
    if volume_rate is not None:
        accumulate_velocity(processed, grid, normalize, into=m)
    return m


def mip(volume: np.ndarray, axis: int) -> np.ndarray:
    """Maximum-intensity projection along ``axis``."""
    return np.asarray(volume).max(axis=axis)


def signed_mip(volume: np.ndarray, axis: int) -> np.ndarray:
    """Projection keeping the signed value of largest magnitude along ``axis``."""
    v = np.asarray(volume)
    idx = np.abs(v).argmax(axis=axis)
    return np.take_along_axis(v, np.expand_dims(idx, axis), axis).squeeze(axis)
