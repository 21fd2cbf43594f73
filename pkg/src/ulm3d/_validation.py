"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Detection, GridSpec, IQVolumeBlock, ShapeError
from .track import Track


def check_blocks(X) -> list:
    """Accept one block or a sequence of blocks sharing a grid."""
    blocks = [X] if isinstance(X, IQVolumeBlock) else list(X)
    if not blocks:
        raise ValueError("at least one block is required")
    for b in blocks:
        if not isinstance(b, IQVolumeBlock):
            raise TypeError(f"expected IQVolumeBlock, got {type(b).__name__}")
        if b.grid != blocks[0].grid:
            raise ShapeError("blocks do not share a grid")
    return blocks


def check_detections(X) -> list:
    dets = list(X)
    for d in dets:
        if not isinstance(d, Detection):
            raise TypeError(f"expected Detection, got {type(d).__name__}")
        if not np.all(np.isfinite(d.position)):
            raise ValueError("detection positions must be finite")
    return dets


def check_tracks(X) -> list:
    tracks = list(X)
    for t in tracks:
        if not isinstance(t, Track):
            raise TypeError(f"expected Track, got {type(t).__name__}")
    return tracks


def check_grid(grid) -> GridSpec:
    if not isinstance(grid, GridSpec):
        raise TypeError("a GridSpec is required")
    return grid


def check_positive(name: str, value, allow_zero: bool = False) -> None:
    ok = value >= 0 if allow_zero else value > 0
    if not ok:
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def check_choice(name: str, value, choices: Sequence) -> None:
    if value not in choices:
        raise ValueError(f"{name} must be one of {list(choices)}, got {value!r}")
