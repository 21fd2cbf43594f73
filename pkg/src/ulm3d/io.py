"""File formats: the ``ULM3DVOL`` volume container, detection/track CSVs and
16-bit netpbm projections.

Container layout (little-endian)::

    offset  size  field
    0       8     magic b"ULM3DVOL"
    8       4     format version (u32)
    12      4     dtype code (u32): 0 complex64, 1 float32, 2 float64
    16      32    dims x, y, z, t (4 x u64)
    48      24    spacing mm (3 x f64)
    72      24    origin mm (3 x f64)
    96      8     wavelength mm (f64)
    104     8     volume rate Hz (f64)
    112     8     block index (u64)
    120     392   zero padding
    512     ...   body, x fastest, then y, z, t
"""
from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .core import (CorruptionError, Detection, FormatError, GridSpec, IQVolumeBlock,
                   ScalarVolume, UnsupportedError)
from .track import Track

MAGIC = b"ULM3DVOL"
FORMAT_VERSION = 1
HEADER_SIZE = 512
_HEADER = struct.Struct("<8sII4Q3d3dddQ")

DTYPE_CODES = {0: np.dtype("<c8"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("complex64"): 0, np.dtype("float32"): 1, np.dtype("float64"): 2}

Volume = Union[IQVolumeBlock, ScalarVolume]


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype
    if dt in _CODE_OF:
        return _CODE_OF[dt]
    if np.iscomplexobj(arr):
        return 0
    return 2


def pack_header(grid: GridSpec, dims4, dtype_code: int, volume_rate: float,
                block_index: int) -> bytes:
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, dtype_code, *[int(d) for d in dims4],
                        *grid.spacing, *grid.origin, grid.wavelength, float(volume_rate),
                        int(block_index))
    return head + b"\x00" * (HEADER_SIZE - len(head))


def write_volume(volume: Volume, path) -> None:
    """Write a block or scalar volume. Complex data is stored as complex64;
    real data keeps float32/float64 and other real dtypes are widened to float64."""
    if isinstance(volume, IQVolumeBlock):
        data = np.asarray(volume.frames)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex64)
        volume_rate = volume.volume_rate
    elif isinstance(volume, ScalarVolume):
        data = np.asarray(volume.values)
        if np.iscomplexobj(data):
            raise UnsupportedError("scalar volumes must be real")
        if data.ndim == 3:
            data = data[..., None]
        volume_rate = volume.volume_rate
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    code = _dtype_code(data)
    body = np.asarray(data, dtype=DTYPE_CODES[code])
    if not np.all(np.isfinite(body)):
        raise ValueError("volume contains non-finite values")
    header = pack_header(volume.grid, body.shape, code, volume_rate, volume.block_index)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes(order="F"))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a ULM3DVOL file (bad magic)")
    if len(raw) < HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header")
    fields = _HEADER.unpack(raw[:_HEADER.size])
    _, version, code = fields[:3]
    if version != FORMAT_VERSION:
        raise UnsupportedError(f"{path}: unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise UnsupportedError(f"{path}: unknown dtype code {code}")
    dims = tuple(fields[3:7])
    return {
        "version": version,
        "dtype_code": code,
        "dims": dims,
        "spacing": tuple(fields[7:10]),
        "origin": tuple(fields[10:13]),
        "wavelength": fields[13],
        "volume_rate": fields[14],
        "block_index": fields[15],
    }


def read_volume(path) -> Volume:
    """Read a container; complex files give an :class:`IQVolumeBlock`,
    real files a :class:`ScalarVolume`."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    head = _parse_header(raw[:HEADER_SIZE], path)
    dtype = DTYPE_CODES[head["dtype_code"]]
    dims = head["dims"]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[HEADER_SIZE:]
    if len(body) != expected:
        raise CorruptionError(f"{path}: body has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(dims, order="F").copy()
    grid = GridSpec(head["origin"], head["spacing"], dims[:3], head["wavelength"])
    if head["dtype_code"] == 0:
        return IQVolumeBlock(grid, data, int(head["block_index"]), head["volume_rate"])
    values = data[..., 0] if dims[3] == 1 else data
    return ScalarVolume(grid, values, int(head["block_index"]), head["volume_rate"])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


DETECTION_HEADER = ["block", "frame", "x_mm", "y_mm", "z_mm", "intensity_db"]
TRACK_HEADER = DETECTION_HEADER + ["track_id"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_HEADER)
        for d in detections:
            w.writerow([d.block, d.frame, *map(_fmt, d.position), _fmt(d.intensity)])


def _check_header(row, expected, path):
    if row != expected:
        raise FormatError(f"{path}: expected header {','.join(expected)}, got {row}")


def read_detections(path) -> list:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(next(r, None), DETECTION_HEADER, path)
        out = []
        for row in r:
            try:
                out.append(Detection((float(row[2]), float(row[3]), float(row[4])),
                                     float(row[5]), int(row[1]), int(row[0])))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: bad row {row}") from exc
    return out


def write_tracks(tracks, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for tid, tr in enumerate(tracks):
            for d in tr.detections:
                w.writerow([d.block, d.frame, *map(_fmt, d.position), _fmt(d.intensity), tid])


def read_tracks(path) -> list:
    groups: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(next(r, None), TRACK_HEADER, path)
        for row in r:
            try:
                det = Detection((float(row[2]), float(row[3]), float(row[4])), float(row[5]),
                                int(row[1]), int(row[0]))
                groups.setdefault(int(row[6]), []).append(det)
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: bad row {row}") from exc
    return [Track(tuple(dets), dets[0].block) for _, dets in sorted(groups.items())]


def _to_uint16(img: np.ndarray, vmax=None) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    top = float(np.max(img)) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(img.shape, dtype=np.uint16)
    return np.clip(np.round(img / top * 65535), 0, 65535).astype(np.uint16)


def write_pgm16(image: np.ndarray, path, vmax=None) -> None:
    """16-bit binary PGM; rows are the first array axis."""
    data = _to_uint16(image, vmax)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.astype(">u2").tobytes())


def write_ppm16(rgb: np.ndarray, path) -> None:
    """16-bit binary PPM from an ``(h, w, 3)`` array in [0, 1]."""
    data = np.clip(np.round(np.asarray(rgb, dtype=float) * 65535), 0, 65535).astype(">u2")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_netpbm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    kind, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535 or kind not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a 16-bit netpbm file")
    ch = 1 if kind == b"P5" else 3
    body = parts[4]
    arr = np.frombuffer(body[: w * h * ch * 2], dtype=">u2")
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def signed_colormap(values: np.ndarray, vmax: float) -> np.ndarray:
    """Diverging lookup: positive (downward flow) to red, negative to blue,
    zero to black. Channel intensity is ``|v| / vmax`` clipped to [0, 1]."""
    v = np.asarray(values, dtype=float)
    scale = np.clip(np.abs(v) / vmax, 0, 1) if vmax > 0 else np.zeros_like(v)
    rgb = np.zeros(v.shape + (3,))
    rgb[..., 0] = np.where(v > 0, scale, 0)
    rgb[..., 2] = np.where(v < 0, scale, 0)
    return rgb


def hot_colormap(values: np.ndarray, vmax: float) -> np.ndarray:
    """Black-red-yellow-white ramp used for velocity magnitude projections."""
    t = np.clip(np.asarray(values, dtype=float) / vmax, 0, 1) if vmax > 0 else np.zeros_like(values)
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], -1)
