"""Tissue and noise rejection for beamformed blocks.

The block is reshaped into a Casorati matrix (voxels x frames) and filtered
by keeping a band of its singular components. Singular vectors come from the
eigen-decomposition of the small ``frames x frames`` Gram matrix, accumulated
in double precision over voxel chunks, so blocks of 64^3 x 400 voxels never
need a full thin SVD in memory.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import DegenerateInputError, GridSpec, IQVolumeBlock, NumericalError, ShapeError

_CHUNK = 1 << 15


@dataclass(frozen=True)
class SvdThresholds:
    """Retained singular band, 1-based and inclusive."""

    low_cut: int
    high_cut: int
    method: str = "fixed"
    warning: Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.low_cut <= self.high_cut:
            raise ValueError(f"need 1 <= low_cut <= high_cut, got {self.low_cut}, {self.high_cut}")

    def validate(self, block_length: int) -> None:
        if self.high_cut > block_length:
            raise ValueError(f"high_cut {self.high_cut} exceeds block length {block_length}")

    def to_dict(self) -> dict:
        return {"low_cut": self.low_cut, "high_cut": self.high_cut, "method": self.method,
                "warning": self.warning}

    @classmethod
    def from_dict(cls, d: dict) -> "SvdThresholds":
        return cls(int(d["low_cut"]), int(d["high_cut"]), d.get("method", "fixed"), d.get("warning"))


@dataclass(frozen=True)
class AttenuationMap:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.dims:
            raise ShapeError(f"map shape {v.shape} != grid dims {self.grid.dims}")
        if not np.all(v > 0):
            raise ValueError("attenuation map must be strictly positive")
        object.__setattr__(self, "values", v)

    def inverse(self) -> "AttenuationMap":
        return AttenuationMap(self.grid, 1.0 / self.values)


def _casorati(block: IQVolumeBlock) -> np.ndarray:
    return block.frames.reshape(-1, block.n_frames)


def temporal_basis(block: IQVolumeBlock):
    """Singular values (descending) and right singular vectors of the Casorati matrix."""
    x = _casorati(block)
    gram = np.zeros((x.shape[1], x.shape[1]), dtype=np.complex128)
    for s in range(0, x.shape[0], _CHUNK):
        c = x[s:s + _CHUNK].astype(np.complex128)
        gram += c.conj().T @ c
    if not np.all(np.isfinite(gram)):
        raise NumericalError(f"block {block.block_index}: non-finite values in Casorati matrix")
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"block {block.block_index}: SVD did not converge") from exc
    order = np.argsort(evals)[::-1]
    sigma = np.sqrt(np.clip(evals[order], 0, None))
    return sigma, evecs[:, order]


def singular_values(block: IQVolumeBlock) -> np.ndarray:
    return temporal_basis(block)[0]


def svd_filter(block: IQVolumeBlock, thresholds: SvdThresholds, basis=None) -> IQVolumeBlock:
    """Keep singular components ``low_cut..high_cut`` (1-based, inclusive)."""
    thresholds.validate(block.n_frames)
    block.check_finite()
    _, v = temporal_basis(block) if basis is None else basis
    vk = v[:, thresholds.low_cut - 1:thresholds.high_cut]
    proj = vk @ vk.conj().T
    x = _casorati(block)
    out = np.empty_like(x)
    for s in range(0, x.shape[0], _CHUNK):
        out[s:s + _CHUNK] = x[s:s + _CHUNK].astype(np.complex128) @ proj
    return block.with_frames(out.reshape(block.frames.shape))


def fallback_thresholds(block_length: int, reason: str) -> SvdThresholds:
    low = max(1, math.ceil(block_length / 10))
    high = max(low, block_length // 2)
    return SvdThresholds(low, high, "fixed", reason)


def thresholds_from_spectrum(sigma: Sequence[float], knee_db: float = 3.0,
                             floor_db: float = 3.0) -> SvdThresholds:
    """Knee / noise-floor rule on a descending singular spectrum.

    ``high_cut`` is the last index more than ``floor_db`` above the median of
    the last quartile; ``low_cut`` the index with the largest second
    difference of the spectrum in dB, searched over the first half and no
    further than ``high_cut`` when that leaves room. A knee weaker than
    ``knee_db`` means the spectrum carries no usable structure and the fixed
    fallback is returned with a warning.
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.size
    if n < 8:
        raise ValueError("adaptive thresholds need at least 8 frames")
    top = sigma.max()
    if not top > 0:
        th = fallback_thresholds(n, "all singular values are zero")
        warnings.warn(th.warning, RuntimeWarning, stacklevel=2)
        return th
    level = 20 * np.log10(np.maximum(sigma, top * 1e-15))
    floor = float(np.median(level[n - max(1, n // 4):]))
    above = np.nonzero(level > floor + floor_db)[0]
    high = int(above[-1]) + 1 if above.size else n
    d2 = level[:-2] - 2 * level[1:-1] + level[2:]  # d2[j] is centred on 1-based index j + 2
    # the knee is searched before the noise floor so the signal-to-noise
    # transition cannot be mistaken for the tissue-to-signal one
    last = min(n // 2, high) if high >= 2 else n // 2
    window = d2[: max(1, last - 1)]
    j = int(np.argmax(window))
    if window[j] < knee_db:
        th = fallback_thresholds(n, f"no singular-value knee above {knee_db} dB")
        warnings.warn(th.warning, RuntimeWarning, stacklevel=2)
        return th
    low = j + 2
    return SvdThresholds(min(low, n), min(max(high, low), n), "adaptive")


def adaptive_thresholds(block: IQVolumeBlock, **kwargs) -> SvdThresholds:
    return thresholds_from_spectrum(singular_values(block), **kwargs)


def power_doppler(blocks: Sequence[IQVolumeBlock]) -> np.ndarray:
    """Mean of ``|IQ|^2`` over all frames of all blocks."""
    if not blocks:
        raise ValueError("at least one block is required")
    acc = np.zeros(blocks[0].grid.dims)
    n = 0
    for b in blocks:
        if b.grid != blocks[0].grid:
            raise ShapeError("blocks do not share a grid")
        f = b.frames
        acc += (f.real.astype(float) ** 2 + f.imag.astype(float) ** 2).sum(axis=3)
        n += b.n_frames
    return acc / n


def attenuation_from_power(power: np.ndarray, grid: GridSpec, sigma_lambda: float = 9.0,
                           floor_ratio: float = 1e-3) -> AttenuationMap:
    power = np.asarray(power, dtype=float)
    if not np.any(power > 0):
        raise DegenerateInputError("power Doppler is zero everywhere; attenuation map undefined")
    sigma = [sigma_lambda * grid.wavelength / s for s in grid.spacing]
    blurred = ndimage.gaussian_filter(power, sigma, mode="nearest")
    med = float(np.median(power))
    eps = floor_ratio * (med if med > 0 else float(power.mean()))
    return AttenuationMap(grid, np.maximum(blurred, eps))


def compute_attenuation_map(filtered_blocks: Sequence[IQVolumeBlock], sigma_lambda: float = 9.0,
                            floor_ratio: float = 1e-3) -> AttenuationMap:
    """Gaussian-blurred power Doppler of clutter-filtered blocks (``sigma`` in wavelengths)."""
    return attenuation_from_power(power_doppler(filtered_blocks), filtered_blocks[0].grid,
                                  sigma_lambda, floor_ratio)


def apply_tgc(block: IQVolumeBlock, amap: AttenuationMap, domain: str = "amplitude") -> IQVolumeBlock:
    """Divide every frame by the map (``power`` domain) or its square root (``amplitude``)."""
    if amap.grid.dims != block.grid.dims:
        raise ShapeError(f"map dims {amap.grid.dims} != block dims {block.grid.dims}")
    if domain == "amplitude":
        gain = 1.0 / np.sqrt(amap.values)
    elif domain == "power":
        gain = 1.0 / amap.values
    else:
        raise ValueError(f"unknown TGC domain {domain!r}")
    frames = block.frames * gain[..., None].astype(block.frames.real.dtype)
    return block.with_frames(frames)


def lag1_autocorrelation(block: IQVolumeBlock) -> IQVolumeBlock:
    """``R(t) = IQ(t) * conj(IQ(t + 1))``, one frame shorter than the input."""
    if block.n_frames < 2:
        raise ValueError("lag-1 autocorrelation needs at least 2 frames")
    f = block.frames
    return block.with_frames(f[..., :-1] * np.conj(f[..., 1:]))
