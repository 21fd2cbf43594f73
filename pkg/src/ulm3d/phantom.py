"""Synthetic ground truth: vessel segments with Poiseuille flow, microbubble
trajectories, IQ block rendering with tissue, noise and shadowing, and
point-scatterer channel data for the beamformer.

Random draws come from streams keyed by ``(seed, purpose, index)`` so the
result never depends on evaluation order or the number of workers.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .beamform import ChannelDataBlock, receive_delay, transmit_delay
from .core import AcquisitionGeometry, GridSpec, IQVolumeBlock, matrix_probe, wavelength_mm

_COUNT, _BUBBLE, _NOISE, _TISSUE = 1, 2, 3, 4


@dataclass(frozen=True)
class VesselSegment:
    start: tuple
    end: tuple
    radius: float
    peak_velocity: float  # mm/s on the centreline
    flow_sign: int = 1    # +1 flows start -> end

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "end", tuple(float(v) for v in self.end))
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.length > 0:
            raise ValueError("segment start and end coincide")
        if self.flow_sign not in (1, -1):
            raise ValueError("flow_sign must be +1 or -1")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))

    @property
    def axis(self) -> np.ndarray:
        return np.subtract(self.end, self.start) / self.length

    def frame(self) -> tuple:
        """Unit axis and two unit vectors spanning the cross-section."""
        a = self.axis
        helper = np.eye(3)[int(np.argmin(np.abs(a)))]
        u = np.cross(a, helper)
        u /= np.linalg.norm(u)
        return a, u, np.cross(a, u)

    def speed(self, rho) -> np.ndarray:
        """Poiseuille speed at radial distance ``rho`` (mm)."""
        r = np.asarray(rho, dtype=float) / self.radius
        return self.peak_velocity * np.clip(1.0 - r * r, 0.0, None)


@dataclass
class BubbleEvent:
    bubble_id: int
    segment: int
    frames: np.ndarray      # absolute frame indices, consecutive
    positions: np.ndarray   # (n, 3) mm
    amplitude: float = 1.0
    phase: float = 0.0

    def timestamps(self, volume_rate: float) -> np.ndarray:
        return np.asarray(self.frames, dtype=float) / volume_rate


def lumen_sample(rng: np.random.Generator, radius: float, n: Optional[int] = None):
    """Uniform points over a disc: ``rho = R sqrt(u)``, uniform angle."""
    rho = radius * np.sqrt(rng.random(n))
    phi = 2 * np.pi * rng.random(n)
    return rho, phi


def simulate_flow(segments: Sequence[VesselSegment], concentration: float, n_frames: int,
                  volume_rate: float = 500.0, seed: int = 0, amplitude: float = 1.0,
                  amplitude_spread: float = 0.0) -> list:
    """Bubbles carried along each segment by Poiseuille flow.

    ``concentration`` is bubbles per mm^3 of lumen. Bubbles are spread
    uniformly along an extended lumen so that the population inside the
    vessel is stationary over the whole acquisition; each keeps its radial
    position and speed. Only frames with the bubble inside the segment are
    kept.
    """
    if n_frames < 10:
        raise ValueError("simulation needs at least 10 frames")
    duration = n_frames / volume_rate
    t = np.arange(n_frames) / volume_rate
    events = []
    next_id = 0
    for si, seg in enumerate(segments):
        a, u, w = seg.frame()
        span = seg.length + seg.peak_velocity * duration
        n = np.random.default_rng([seed, _COUNT, si]).poisson(concentration * np.pi * seg.radius ** 2 * span)
        for bi in range(n):
            rng = np.random.default_rng([seed, _BUBBLE, si, bi])
            rho, phi = lumen_sample(rng, seg.radius)
            q0 = -seg.peak_velocity * duration + span * rng.random()
            phase = 2 * np.pi * rng.random()
            amp = amplitude * (1.0 + amplitude_spread * (rng.random() - 0.5))
            v = float(seg.speed(rho))
            if q0 < -v * duration:
                continue
            q = q0 + v * t
            inside = (q >= 0) & (q <= seg.length)
            if not inside.any():
                continue
            s = q[inside] if seg.flow_sign > 0 else seg.length - q[inside]
            offset = rho * (np.cos(phi) * u + np.sin(phi) * w)
            pos = np.asarray(seg.start) + offset + s[:, None] * a
            events.append(BubbleEvent(next_id, si, np.nonzero(inside)[0], pos, amp, phase))
            next_id += 1
    return events


def linear_event(start, step, n_frames: int, first_frame: int = 0, amplitude: float = 1.0,
                 phase: float = 0.0, bubble_id: int = 0, segment: int = -1) -> BubbleEvent:
    """Bubble moving ``step`` mm per frame from ``start``."""
    k = np.arange(n_frames)
    pos = np.asarray(start, float)[None] + k[:, None] * np.asarray(step, float)[None]
    return BubbleEvent(bubble_id, segment, first_frame + k, pos, amplitude, phase)


@dataclass(frozen=True)
class TissueSpec:
    amplitude_db: float = 40.0   # RMS tissue amplitude relative to the bubble amplitude
    rank: int = 1
    modulation: float = 0.2
    frequency_hz: float = 2.0
    smoothness_voxels: float = 2.0


@dataclass(frozen=True)
class ShadowSpec:
    plane_mm: float
    factor: float = 0.25
    axis: int = 2

    def gain(self, grid: GridSpec) -> np.ndarray:
        coord = grid.axes()[self.axis]
        g = np.where(coord > self.plane_mm, self.factor, 1.0)
        shape = [1, 1, 1]
        shape[self.axis] = -1
        return np.broadcast_to(g.reshape(shape), grid.dims)


def psf_sigma_voxels(grid: GridSpec, psf_sigma_lambda=(0.5, 0.5, 0.75)) -> np.ndarray:
    return np.asarray(psf_sigma_lambda, float) * grid.wavelength / np.asarray(grid.spacing)


def add_psf(volume: np.ndarray, grid: GridSpec, position, value: complex, sigma_vox) -> None:
    """Accumulate a separable Gaussian spot of peak ``value`` at ``position`` (mm)."""
    c = grid.to_index(position)
    sigma_vox = np.asarray(sigma_vox, float)
    half = np.ceil(4 * sigma_vox).astype(int)
    base = np.floor(c).astype(int)
    lo = np.maximum(base - half, 0)
    hi = np.minimum(base + half + 1, np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return
    prof = [np.exp(-0.5 * ((np.arange(lo[d], hi[d] + 1) - c[d]) / sigma_vox[d]) ** 2) for d in range(3)]
    patch = value * prof[0][:, None, None] * prof[1][None, :, None] * prof[2][None, None, :]
    volume[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] += patch.astype(volume.dtype)


def _tissue_fields(grid: GridSpec, spec: TissueSpec, seed: int) -> list:
    fields = []
    for k in range(spec.rank):
        rng = np.random.default_rng([seed, _TISSUE, k])
        raw = rng.standard_normal(grid.dims) + 1j * rng.standard_normal(grid.dims)
        f = (ndimage.gaussian_filter(raw.real, spec.smoothness_voxels, mode="wrap")
             + 1j * ndimage.gaussian_filter(raw.imag, spec.smoothness_voxels, mode="wrap"))
        f *= 10 ** (spec.amplitude_db / 20) / np.sqrt(np.mean(np.abs(f) ** 2) * spec.rank)
        phase0 = 2 * np.pi * rng.random()
        fields.append((f, phase0))
    return fields


def tissue_modulation(spec: TissueSpec, k: int, phase0: float, times: np.ndarray) -> np.ndarray:
    return 1.0 + spec.modulation * np.sin(2 * np.pi * spec.frequency_hz * (k + 1) * times + phase0)


def render_iq_blocks(events: Sequence[BubbleEvent], grid: GridSpec, n_frames: int,
                     block_length: Optional[int] = None, volume_rate: float = 500.0,
                     psf_sigma_lambda=(0.5, 0.5, 0.75), tissue: Optional[TissueSpec] = None,
                     noise_db: Optional[float] = None, shadow: Optional[ShadowSpec] = None,
                     seed: int = 0, workers: int = 1, noise_reference: float = 1.0) -> list:
    """Render events into consecutive complex64 blocks of ``block_length`` frames.

    Bubbles are complex Gaussian spots with a constant random phase; tissue
    is a sum of ``rank`` smooth spatial fields each times a slow temporal
    modulation; the shadow multiplies bubbles and tissue beyond its plane;
    circular Gaussian noise with RMS ``noise_reference * 10^(-noise_db/20)``
    is added last.
    """
    block_length = n_frames if block_length is None else block_length
    sigma = psf_sigma_voxels(grid, psf_sigma_lambda)
    per_frame: list = [[] for _ in range(n_frames)]
    for ev in events:
        val = ev.amplitude * np.exp(1j * ev.phase)
        for f, p in zip(np.asarray(ev.frames), ev.positions):
            if 0 <= f < n_frames:
                per_frame[f].append((p, val))
    fields = _tissue_fields(grid, tissue, seed) if tissue is not None else []
    gain = shadow.gain(grid) if shadow is not None else None
    noise_sigma = None if noise_db is None else noise_reference * 10 ** (-noise_db / 20)

    def frame(fi: int) -> np.ndarray:
        vol = np.zeros(grid.dims, dtype=np.complex128)
        for p, val in per_frame[fi]:
            add_psf(vol, grid, p, val, sigma)
        tval = fi / volume_rate
        for k, (f, ph) in enumerate(fields):
            vol += f * tissue_modulation(tissue, k, ph, np.asarray(tval))
        if gain is not None:
            vol *= gain
        if noise_sigma is not None:
            rng = np.random.default_rng([seed, _NOISE, fi])
            vol += noise_sigma / np.sqrt(2) * (rng.standard_normal(grid.dims)
                                               + 1j * rng.standard_normal(grid.dims))
        return vol.astype(np.complex64)

    blocks = []
    for b, start in enumerate(range(0, n_frames, block_length)):
        idx = range(start, min(start + block_length, n_frames))
        data = np.empty(grid.dims + (len(idx),), dtype=np.complex64)
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                for k, vol in enumerate(ex.map(frame, idx)):
                    data[..., k] = vol
        else:
            for k, fi in enumerate(idx):
                data[..., k] = frame(fi)
        blocks.append(IQVolumeBlock(grid, data, b, volume_rate, frame_offset=0))
    return blocks


def truth_by_frame(events: Sequence[BubbleEvent], n_frames: Optional[int] = None) -> dict:
    """Frame index -> (n, 3) true positions."""
    out: dict = {}
    for ev in events:
        for f, p in zip(np.asarray(ev.frames), ev.positions):
            out.setdefault(int(f), []).append(p)
    keys = range(n_frames) if n_frames is not None else sorted(out)
    return {k: np.asarray(out.get(k, []), float).reshape(-1, 3) for k in keys}


GROUND_TRUTH_HEADER = ["bubble", "segment", "frame", "x_mm", "y_mm", "z_mm", "amplitude", "phase"]
SEGMENT_HEADER = ["segment", "x0", "y0", "z0", "x1", "y1", "z1", "radius", "peak_velocity", "flow_sign"]


def segments_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + "_segments.csv")


def export_ground_truth(events: Sequence[BubbleEvent], segments: Sequence[VesselSegment], path) -> None:
    """Per-frame true positions in ``path`` and segment geometry beside it."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GROUND_TRUTH_HEADER)
        for ev in events:
            for f, p in zip(np.asarray(ev.frames), ev.positions):
                w.writerow([ev.bubble_id, ev.segment, int(f), *(repr(float(v)) for v in p),
                            repr(float(ev.amplitude)), repr(float(ev.phase))])
    with open(segments_path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEGMENT_HEADER)
        for i, s in enumerate(segments):
            w.writerow([i, *(repr(v) for v in s.start), *(repr(v) for v in s.end), repr(s.radius),
                        repr(s.peak_velocity), s.flow_sign])


def read_ground_truth(path) -> tuple:
    rows: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["bubble"]), []).append(r)
    events = []
    for bid in sorted(rows):
        rs = rows[bid]
        events.append(BubbleEvent(bid, int(rs[0]["segment"]),
                                  np.array([int(r["frame"]) for r in rs]),
                                  np.array([[float(r[k]) for k in ("x_mm", "y_mm", "z_mm")] for r in rs]),
                                  float(rs[0]["amplitude"]), float(rs[0]["phase"])))
    segments = []
    sp = segments_path(path)
    if sp.exists():
        with open(sp, newline="") as fh:
            for r in csv.DictReader(fh):
                segments.append(VesselSegment((float(r["x0"]), float(r["y0"]), float(r["z0"])),
                                              (float(r["x1"]), float(r["y1"]), float(r["z1"])),
                                              float(r["radius"]), float(r["peak_velocity"]),
                                              int(r["flow_sign"])))
    return events, segments


@dataclass
class Scene:
    """Everything needed to regenerate a phantom acquisition."""

    segments: list = field(default_factory=list)
    concentration: float = 1.0
    n_frames: int = 100
    block_length: int = 100
    volume_rate: float = 500.0
    dims: tuple = (32, 32, 32)
    origin: Optional[tuple] = None
    transmit_frequency: float = 6.25
    center_frequency: float = 7.81
    sound_speed: float = 1540.0
    psf_sigma_lambda: tuple = (0.5, 0.5, 0.75)
    noise_db: Optional[float] = None
    tissue: Optional[TissueSpec] = None
    shadow: Optional[ShadowSpec] = None
    seed: int = 0

    @property
    def wavelength(self) -> float:
        return wavelength_mm(self.sound_speed, self.transmit_frequency)

    @property
    def grid(self) -> GridSpec:
        origin = self.origin
        if origin is None:
            half = self.wavelength / 2
            origin = (-(self.dims[0] - 1) / 2 * half, -(self.dims[1] - 1) / 2 * half, 2.0)
        return GridSpec.for_fraction(2, self.wavelength, self.dims, origin)

    def geometry(self, n_side: int = 8) -> AcquisitionGeometry:
        return AcquisitionGeometry(matrix_probe(n_side, n_side, self.wavelength / 2),
                                   ((0.0, 0.0),), self.transmit_frequency, self.center_frequency,
                                   self.sound_speed, self.volume_rate, self.block_length)

    def events(self) -> list:
        return simulate_flow(self.segments, self.concentration, self.n_frames, self.volume_rate, self.seed)

    def render(self, events=None, workers: int = 1) -> list:
        events = self.events() if events is None else events
        return render_iq_blocks(events, self.grid, self.n_frames, self.block_length, self.volume_rate,
                                self.psf_sigma_lambda, self.tissue, self.noise_db, self.shadow,
                                self.seed, workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [asdict(s) for s in self.segments]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        d = dict(d)
        d["segments"] = [VesselSegment(**s) for s in d.get("segments", [])]
        if d.get("tissue") is not None:
            d["tissue"] = TissueSpec(**d["tissue"])
        if d.get("shadow") is not None:
            d["shadow"] = ShadowSpec(**d["shadow"])
        for key in ("dims", "origin", "psf_sigma_lambda"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def point_scatterer_channels(geometry: AcquisitionGeometry, scatterers, amplitudes=None,
                             angles=None, sample_rate: float = 25.0, n_samples: Optional[int] = None,
                             start_time: float = 0.0, pulse_cycles: float = 2.0) -> ChannelDataBlock:
    """Noiseless baseband echoes of point scatterers for plane-wave transmits.

    Each echo is ``A g(t - tau) exp(-2i pi f tau)`` with ``g`` a Gaussian
    envelope of ``pulse_cycles`` periods and ``tau`` the transmit plus
    receive delay, so the beamformer's phase rotation re-aligns it exactly.
    """
    pts = np.asarray(scatterers, float).reshape(-1, 3)
    amps = np.ones(len(pts)) if amplitudes is None else np.asarray(amplitudes, complex).ravel()
    angles = geometry.plane_wave_angles if angles is None else tuple(tuple(a) for a in angles)
    f = geometry.transmit_frequency
    sigma_t = pulse_cycles / f / 2.355
    rx = receive_delay(pts, geometry.element_positions, geometry.sound_speed)  # (p, e)
    if n_samples is None:
        tmax = max(float((transmit_delay(pts, a, geometry.sound_speed)[:, None] + rx).max()) for a in angles)
        n_samples = int(np.ceil((tmax + 6 * sigma_t - start_time) * sample_rate)) + 1
    t = start_time + np.arange(n_samples) / sample_rate
    data = np.zeros((geometry.n_elements, n_samples, len(angles)), dtype=np.complex128)
    for e, a in enumerate(angles):
        tau = transmit_delay(pts, a, geometry.sound_speed)[:, None] + rx
        for p in range(len(pts)):
            dt = t[None, :] - tau[p][:, None]
            data[:, :, e] += (amps[p] * np.exp(-0.5 * (dt / sigma_t) ** 2)
                              * np.exp(-2j * np.pi * f * tau[p])[:, None])
    return ChannelDataBlock(geometry, data, sample_rate, start_time, event_angles=angles)
