"""Plane-wave delay-and-sum reconstruction on a voxel grid.

Time zero of every transmit is when the (tilted) plane wavefront passes
through the world origin, i.e. the centre of the probe surface.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import AcquisitionGeometry, GridSpec, ShapeError


@dataclass(frozen=True)
class ChannelDataBlock:
    """Baseband channel data, ``samples[channel, fast_time, event]``.

    ``sample_rate`` is in MHz and ``start_time`` in microseconds. Event ``e``
    was transmitted with ``geometry.plane_wave_angles[e]`` unless
    ``event_angles`` says otherwise.
    """

    geometry: AcquisitionGeometry
    samples: np.ndarray
    sample_rate: float
    start_time: float = 0.0
    demod_frequency: Optional[float] = None
    event_angles: Optional[tuple] = None

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 2:
            s = s[..., None]
        if s.ndim != 3:
            raise ShapeError("samples must be (channel, sample, event)")
        if s.shape[0] != self.geometry.n_elements:
            raise ShapeError(f"{s.shape[0]} channels for {self.geometry.n_elements} elements")
        object.__setattr__(self, "samples", s)
        if self.event_angles is None:
            n = s.shape[2]
            angles = self.geometry.plane_wave_angles
            object.__setattr__(self, "event_angles", tuple(angles[i % len(angles)] for i in range(n)))

    @property
    def f_demod(self) -> float:
        return self.geometry.transmit_frequency if self.demod_frequency is None else self.demod_frequency


def plane_wave_direction(angle: Sequence[float]) -> np.ndarray:
    """Unit propagation vector for steering angles ``(theta_x, theta_y)`` in degrees."""
    tx, ty = np.deg2rad(angle[0]), np.deg2rad(angle[1])
    return np.array([np.sin(tx) * np.cos(ty), np.sin(ty), np.cos(tx) * np.cos(ty)])


def transmit_delay(points: np.ndarray, angle: Sequence[float], sound_speed: float) -> np.ndarray:
    """One-way transmit delay (us) of a plane wave to ``points`` (mm)."""
    c = sound_speed * 1e-3  # mm/us
    return np.asarray(points, dtype=float) @ plane_wave_direction(angle) / c


def receive_delay(points: np.ndarray, elements: np.ndarray, sound_speed: float) -> np.ndarray:
    """Echo travel time (us) from each point to each element, shape (points, elements)."""
    c = sound_speed * 1e-3
    d = np.asarray(points, dtype=float)[:, None, :] - np.asarray(elements)[None, :, :]
    return np.sqrt((d * d).sum(axis=-1)) / c


def _sample(trace: np.ndarray, idx: np.ndarray, interpolation: str) -> np.ndarray:
    """Interpolate ``trace[channel, sample]`` at fractional ``idx[point, channel]``;
    out-of-window positions give zero."""
    n = trace.shape[1]
    ch = np.broadcast_to(np.arange(trace.shape[0]), idx.shape)
    if interpolation == "linear":
        i0 = np.floor(idx).astype(np.int64)
        frac = idx - i0
        valid = (i0 >= 0) & (i0 + 1 < n)
        i0c = np.clip(i0, 0, n - 2)
        out = trace[ch, i0c] * (1 - frac) + trace[ch, i0c + 1] * frac
        return np.where(valid, out, 0)
    if interpolation == "cubic":
        # Keys cubic convolution, a = -0.5
        i1 = np.floor(idx).astype(np.int64)
        t = idx - i1
        valid = (i1 - 1 >= 0) & (i1 + 2 < n)
        i1c = np.clip(i1, 1, n - 3)
        p0, p1, p2, p3 = (trace[ch, i1c + k] for k in (-1, 0, 1, 2))
        t2, t3 = t * t, t * t * t
        out = 0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
                     + (-p0 + 3 * p1 - 3 * p2 + p3) * t3)
        return np.where(valid, out, 0)
    raise ValueError(f"unknown interpolation {interpolation!r}")


def das_beamform(channels: ChannelDataBlock, grid: GridSpec, angle=None, event: Optional[int] = None,
                 interpolation: str = "linear", apodization: Optional[np.ndarray] = None,
                 chunk: int = 4096) -> np.ndarray:
    """Delay-and-sum one transmit event onto ``grid``; returns a complex (x, y, z) volume.

    Each voxel sums the channel samples at the round-trip delay, linearly
    interpolated in fast time and rotated back by ``exp(+2i pi f_demod tau)``.
    Delays that fall outside the recorded window contribute nothing.
    """
    if event is None:
        if angle is None:
            event = 0
        else:
            key = (float(angle[0]), float(angle[1]))
            try:
                event = list(channels.event_angles).index(key)
            except ValueError:
                raise ValueError(f"no transmit event with angle {key}") from None
    if angle is None:
        angle = channels.event_angles[event]
    geom = channels.geometry
    trace = channels.samples[:, :, event]
    if apodization is None:
        apod = np.ones(geom.n_elements)
    else:
        apod = np.asarray(apodization, dtype=float)
        if apod.shape != (geom.n_elements,):
            raise ShapeError("apodization must have one weight per element")
    ax = grid.axes()
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.zeros(pts.shape[0], dtype=np.complex128)
    for start in range(0, pts.shape[0], chunk):
        p = pts[start:start + chunk]
        tau = transmit_delay(p, angle, geom.sound_speed)[:, None] + receive_delay(
            p, geom.element_positions, geom.sound_speed)
        idx = (tau - channels.start_time) * channels.sample_rate
        vals = _sample(trace, idx, interpolation)
        vals = vals * np.exp(2j * np.pi * channels.f_demod * tau)
        out[start:start + chunk] = vals @ apod
    return out.reshape(grid.dims)


def compound(volumes: Sequence[np.ndarray]) -> np.ndarray:
    """Coherent (complex) mean of volumes sharing one grid."""
    if len(volumes) == 0:
        raise ValueError("nothing to compound")
    shape = np.shape(volumes[0])
    for v in volumes[1:]:
        if np.shape(v) != shape:
            raise ShapeError(f"cannot compound volumes of shapes {shape} and {np.shape(v)}")
    acc = np.zeros(shape, dtype=np.result_type(np.complex128, *[np.asarray(v).dtype for v in volumes]))
    for v in volumes:
        acc += v
    return acc / len(volumes)


def beamform_events(channels: ChannelDataBlock, grid: GridSpec, **kwargs) -> np.ndarray:
    """Beamform every transmit event and compound them into one volume."""
    vols = [das_beamform(channels, grid, event=e, **kwargs) for e in range(channels.samples.shape[2])]
    return compound(vols)
