"""Shared domain types and unit conventions.

Positions are millimetres throughout. Axis order is ``(x, y, z)`` with ``z``
the depth (axial) axis pointing away from the probe, so "downward" means
increasing ``z``. Voxel ``i`` of a :class:`GridSpec` is centred at
``origin + i * spacing``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class UlmError(Exception):
    """Base class for all errors raised by the package."""


class FormatError(UlmError):
    """A file does not follow the expected layout."""


class CorruptionError(FormatError):
    """A file header is valid but its body is truncated or inconsistent."""


class UnsupportedError(FormatError):
    """A file uses a feature this implementation does not handle."""


class ShapeError(UlmError, ValueError):
    """Arrays or grids that must agree do not."""


class NumericalError(UlmError):
    """A numerical routine failed to converge or produced non-finite output."""


class DegenerateInputError(NumericalError, ValueError):
    """Input carries no usable signal (e.g. all zeros)."""


def wavelength_mm(sound_speed: float, frequency_mhz: float) -> float:
    """Acoustic wavelength in mm for a sound speed in m/s and a frequency in MHz."""
    if sound_speed <= 0 or frequency_mhz <= 0:
        raise ValueError("sound speed and frequency must be positive")
    # (m/s) / (1e6 1/s) = 1e-6 m = 1e-3 mm
    return sound_speed / frequency_mhz * 1e-3


@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    spacing: tuple
    dims: tuple
    wavelength: float

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        spacing = tuple(float(v) for v in self.spacing)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(spacing) != 3 or len(dims) != 3:
            raise ValueError("origin, spacing and dims must have three components")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @classmethod
    def for_fraction(cls, k: float, wavelength: float, dims: Sequence[int],
                     origin: Sequence[float] = (0.0, 0.0, 0.0)) -> "GridSpec":
        """Isotropic grid with voxel pitch ``wavelength / k``."""
        step = wavelength / k
        return cls(tuple(origin), (step, step, step), tuple(dims), wavelength)

    @classmethod
    def covering(cls, k: float, wavelength: float, lower: Sequence[float],
                 upper: Sequence[float]) -> "GridSpec":
        """Smallest ``wavelength / k`` grid whose voxel centres span ``[lower, upper]``."""
        step = wavelength / k
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        dims = np.floor((upper - lower) / step + 1e-9).astype(int) + 1
        return cls(tuple(lower), (step,) * 3, tuple(np.maximum(dims, 1)), wavelength)

    def is_fraction(self, k: float) -> bool:
        target = self.wavelength / k
        return all(abs(s - target) < 1e-9 for s in self.spacing)

    @property
    def shape(self) -> tuple:
        return self.dims

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        """Centre of the last voxel along each axis (mm)."""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def axes(self) -> list:
        return [self.origin[d] + self.spacing[d] * np.arange(self.dims[d]) for d in range(3)]

    def to_index(self, positions) -> np.ndarray:
        """Fractional voxel coordinates of positions in mm."""
        p = np.asarray(positions, dtype=float)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_mm(self, index) -> np.ndarray:
        i = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + i * np.asarray(self.spacing)

    def voxel_of(self, positions) -> np.ndarray:
        """Nearest voxel index (may lie outside the grid)."""
        return np.floor(self.to_index(positions) + 0.5).astype(np.int64)

    def contains(self, positions) -> np.ndarray:
        idx = self.voxel_of(positions)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def refine(self, k: float) -> "GridSpec":
        """Grid at ``wavelength / k`` covering the same physical extent."""
        return GridSpec.covering(k, self.wavelength, self.origin, self.upper)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": list(self.spacing),
                "dims": list(self.dims), "wavelength": self.wavelength}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), tuple(d["spacing"]), tuple(d["dims"]), d["wavelength"])


@dataclass(frozen=True)
class AcquisitionGeometry:
    element_positions: np.ndarray
    plane_wave_angles: tuple
    transmit_frequency: float  # MHz
    center_frequency: float  # MHz
    sound_speed: float = 1540.0  # m/s
    volume_rate: float = 500.0  # Hz
    block_length: int = 400

    def __post_init__(self):
        pos = np.asarray(self.element_positions, dtype=float).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "element_positions", pos)
        angles = tuple((float(a), float(b)) for a, b in self.plane_wave_angles)
        object.__setattr__(self, "plane_wave_angles", angles)
        if not angles:
            raise ValueError("at least one plane-wave angle is required")
        if not self.volume_rate > 0:
            raise ValueError("volume_rate must be positive")
        if int(self.block_length) < 2:
            raise ValueError("block_length must be >= 2")

    @property
    def wavelength(self) -> float:
        return wavelength_mm(self.sound_speed, self.transmit_frequency)

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]

    def to_dict(self) -> dict:
        return {
            "element_positions": self.element_positions.tolist(),
            "plane_wave_angles": [list(a) for a in self.plane_wave_angles],
            "transmit_frequency": self.transmit_frequency,
            "center_frequency": self.center_frequency,
            "sound_speed": self.sound_speed,
            "volume_rate": self.volume_rate,
            "block_length": self.block_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionGeometry":
        return cls(np.asarray(d["element_positions"]), tuple(map(tuple, d["plane_wave_angles"])),
                   d["transmit_frequency"], d["center_frequency"], d.get("sound_speed", 1540.0),
                   d.get("volume_rate", 500.0), d.get("block_length", 400))


def matrix_probe(n_x: int = 32, n_y: int = 32, pitch: float = 0.3) -> np.ndarray:
    """Element centres of a planar matrix array centred on the origin at z = 0."""
    xs = (np.arange(n_x) - (n_x - 1) / 2) * pitch
    ys = (np.arange(n_y) - (n_y - 1) / 2) * pitch
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)


@dataclass(frozen=True)
class IQVolumeBlock:
    """A block of complex volumes indexed ``(x, y, z, t)``."""

    grid: GridSpec
    frames: np.ndarray
    block_index: int = 0
    volume_rate: float = 500.0
    geometry: Optional[AcquisitionGeometry] = field(default=None, compare=False)
    frame_offset: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise ShapeError(f"frames must be 4-D (x, y, z, t), got shape {frames.shape}")
        if tuple(frames.shape[:3]) != self.grid.dims:
            raise ShapeError(f"frames spatial shape {frames.shape[:3]} != grid dims {self.grid.dims}")
        if self.block_index < 0:
            raise ValueError("block_index must be non-negative")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[3]

    def with_frames(self, frames: np.ndarray, frame_offset: Optional[int] = None) -> "IQVolumeBlock":
        """Copy of this block carrying new frame data and the same metadata."""
        offset = self.frame_offset if frame_offset is None else frame_offset
        return replace(self, frames=frames, frame_offset=offset)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.frames)):
            raise NumericalError(f"block {self.block_index} contains non-finite values")


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued volume (maps, attenuation, densities) with its grid."""

    grid: GridSpec
    values: np.ndarray
    block_index: int = 0
    volume_rate: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 4 and v.shape[3] == 1:
            v = v[..., 0]
        if tuple(v.shape[:3]) != self.grid.dims:
            raise ShapeError(f"values shape {v.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Detection:
    position: tuple  # mm
    intensity: float  # dB above the frame noise floor
    frame: int
    block: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position)


def sphere_offsets(radius: float, spacing: Sequence[float]) -> np.ndarray:
    """Integer voxel offsets whose physical distance from the centre is <= radius."""
    spacing = np.asarray(spacing, dtype=float)
    half = np.floor(radius / spacing + 1e-9).astype(int)
    rng = [np.arange(-h, h + 1) for h in half]
    g = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.sqrt((((g * spacing) ** 2).sum(axis=1)))
    return g[dist <= radius * (1 + 1e-12)]


def gaussian_sigma_voxels(sigma_mm: float, spacing: Sequence[float]) -> tuple:
    return tuple(float(sigma_mm / s) for s in spacing)


__all__ = [
    "UlmError", "FormatError", "CorruptionError", "UnsupportedError", "ShapeError",
    "NumericalError", "DegenerateInputError", "GridSpec", "AcquisitionGeometry",
    "IQVolumeBlock", "ScalarVolume", "Detection", "wavelength_mm", "matrix_probe",
    "sphere_offsets", "gaussian_sigma_voxels",
]
