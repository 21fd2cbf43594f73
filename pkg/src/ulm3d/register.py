"""Inter-bin motion estimation by phase correlation of density maps."""
from __future__ import annotations

import csv
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import DegenerateInputError, GridSpec, ShapeError
from .track import Track


@dataclass(frozen=True)
class ShiftEstimate:
    displacement: tuple  # voxels
    peak_value: float
    bin_index: int = 0
    subvoxel: Optional[tuple] = None


def bin_blocks(maps: Sequence[np.ndarray], window: int = 20) -> list:
    """Sum consecutive groups of ``window`` maps; the last group may be short."""
    if not len(maps):
        raise ValueError("at least one map is required")
    if window < 1:
        raise ValueError("window must be >= 1")
    shape = np.shape(maps[0])
    for m in maps:
        if np.shape(m) != shape:
            raise ShapeError(f"map shapes differ: {shape} vs {np.shape(m)}")
    return [np.sum(np.stack(maps[i:i + window]), axis=0) for i in range(0, len(maps), window)]


def _wrap(idx: np.ndarray, shape) -> np.ndarray:
    shape = np.asarray(shape)
    return np.where(idx > shape // 2, idx - shape, idx)


def _parabolic_offset(corr: np.ndarray, peak: Sequence[int]) -> tuple:
    out = []
    for d, n in enumerate(corr.shape):
        idx = list(peak)
        vals = []
        for step in (-1, 0, 1):
            idx[d] = (peak[d] + step) % n
            vals.append(corr[tuple(idx)])
        den = vals[0] - 2 * vals[1] + vals[2]
        out.append(0.5 * (vals[0] - vals[2]) / den if den < 0 else 0.0)
    return tuple(out)


def phase_correlate(reference: np.ndarray, moving: np.ndarray, whiten: bool = False,
                    subvoxel: bool = False, bin_index: int = 0) -> ShiftEstimate:
    """Integer shift ``d`` such that ``moving ~= np.roll(reference, d)``.

    The peak of the real part of ``ifft(F(moving) * conj(F(reference)))``
    gives the shift; indices past half the axis wrap to negative values.
    Equal peaks resolve to the smallest shift norm, then lexicographic order.
    ``whiten=True`` normalises the cross-power spectrum to unit magnitude.
    ``subvoxel=True`` adds a per-axis parabolic peak refinement.
    """
    ref = np.asarray(reference, dtype=float)
    mov = np.asarray(moving, dtype=float)
    if ref.shape != mov.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {mov.shape}")
    if not np.any(ref) or not np.any(mov):
        raise DegenerateInputError("cannot register an all-zero volume")
    spec = np.fft.fftn(mov) * np.conj(np.fft.fftn(ref))
    if whiten:
        mag = np.abs(spec)
        spec = np.where(mag > mag.max() * 1e-12, spec / np.where(mag > 0, mag, 1), 0)
    corr = np.fft.ifftn(spec).real
    top = corr.max()
    tol = 1e-9 * max(abs(top), 1e-300)
    raw = np.argwhere(corr >= top - tol)
    cands = _wrap(raw, corr.shape)
    keys = tuple(cands[:, k] for k in range(cands.shape[1] - 1, -1, -1)) + ((cands ** 2).sum(axis=1),)
    best = int(np.lexsort(keys)[0])
    disp = tuple(int(v) for v in cands[best])
    frac = None
    if subvoxel:
        off = _parabolic_offset(corr, raw[best])
        frac = tuple(d + o for d, o in zip(disp, off))
    return ShiftEstimate(disp, float(top), bin_index, frac)


def shift_volume(volume: np.ndarray, shift: Sequence[int]) -> np.ndarray:
    """Translate by an integer voxel shift, filling vacated voxels with zero."""
    v = np.asarray(volume)
    out = np.zeros_like(v)
    src, dst = [], []
    for s, n in zip(shift, v.shape):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = v[tuple(src)]
    return out


def bin_of(block: int, window: int) -> int:
    return int(block) // int(window)


def bin_tracks(tracks: Sequence[Track], window: int) -> dict:
    """Tracks grouped by ``block // window``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = defaultdict(list)
    for t in tracks:
        out[bin_of(t.block, window)].append(t)
    return dict(out)


@dataclass
class DriftEstimate:
    """Per-bin integer shifts (voxels) relative to the reference bin."""

    grid: GridSpec
    window: int
    reference_bin: int
    shifts: dict = field(default_factory=dict)
    peaks: dict = field(default_factory=dict)

    def shift_of(self, bin_index: int) -> tuple:
        return tuple(self.shifts.get(bin_index, (0, 0, 0)))

    def shift_mm(self, bin_index: int) -> np.ndarray:
        return np.asarray(self.shift_of(bin_index), dtype=float) * np.asarray(self.grid.spacing)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "dx_vox", "dy_vox", "dz_vox", "dx_mm", "dy_mm", "dz_mm"])
            for b in sorted(self.shifts):
                mm = self.shift_mm(b)
                w.writerow([b, *self.shift_of(b), *(repr(float(v)) for v in mm)])

    @classmethod
    def from_csv(cls, path, grid: GridSpec, window: int) -> "DriftEstimate":
        shifts = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                shifts[int(row["bin"])] = (int(row["dx_vox"]), int(row["dy_vox"]), int(row["dz_vox"]))
        ref = next((b for b, s in sorted(shifts.items()) if s == (0, 0, 0)), min(shifts, default=0))
        return cls(grid, window, ref, shifts)


def choose_reference(bin_maps: dict, strategy: str = "first") -> int:
    keys = sorted(bin_maps)
    if strategy == "first":
        return keys[0]
    if strategy == "middle":
        return keys[(len(keys) - 1) // 2]
    if strategy == "highest-count":
        totals = [float(np.sum(bin_maps[k])) for k in keys]
        return keys[int(np.argmax(totals))]
    raise ValueError(f"unknown reference strategy {strategy!r}")


def estimate_drift(bin_maps: dict, grid: GridSpec, window: int = 20, reference: str = "first",
                   whiten: bool = False, workers: int = 1) -> DriftEstimate:
    """Phase-correlate every bin's density map against the reference bin."""
    if not bin_maps:
        raise ValueError("no bins to register")
    ref_bin = choose_reference(bin_maps, reference)
    ref = np.asarray(bin_maps[ref_bin], dtype=float)
    others = [b for b in sorted(bin_maps) if b != ref_bin]

    def one(b):
        return phase_correlate(ref, bin_maps[b], whiten, bin_index=b)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, others))
    else:
        results = [one(b) for b in others]
    est = DriftEstimate(grid, window, ref_bin, {ref_bin: (0, 0, 0)})
    for r in results:
        est.shifts[r.bin_index] = r.displacement
        est.peaks[r.bin_index] = r.peak_value
    return est


def correct_tracks(tracks: Sequence[Track], drift: DriftEstimate) -> list:
    """Move every track back by its bin's shift so all bins align with the reference."""
    return [t.translated(-drift.shift_mm(bin_of(t.block, drift.window))) for t in tracks]


def apply_shift(volume: np.ndarray, displacement: Sequence[int]) -> np.ndarray:
    """Undo ``displacement`` on a raw map (integer shift, zero fill)."""
    return shift_volume(volume, [-int(s) for s in displacement])
