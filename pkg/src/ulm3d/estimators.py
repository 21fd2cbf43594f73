"""scikit-learn style wrappers around the processing stages.

Each stage is an estimator: constructor arguments are its tunables,
``fit`` learns whatever state the stage needs (thresholds, gain maps, the
rendering grid, per-bin drifts) and ``transform`` applies it.
"""
from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import clutter, localize, register, render, track
from ._validation import (check_blocks, check_choice, check_detections, check_grid, check_positive,
                          check_tracks)
from .core import GridSpec


class SvdClutterFilter(TransformerMixin, BaseEstimator):
    """Band-pass singular-value filter; adaptive band unless both cuts are given."""

    def __init__(self, low_cut: Optional[int] = None, high_cut: Optional[int] = None,
                 knee_db: float = 3.0, floor_db: float = 3.0):
        self.low_cut = low_cut
        self.high_cut = high_cut
        self.knee_db = knee_db
        self.floor_db = floor_db

    def fit(self, X, y=None):
        blocks = check_blocks(X)
        if self.low_cut is not None and self.high_cut is not None:
            self.thresholds_ = clutter.SvdThresholds(int(self.low_cut), int(self.high_cut), "fixed")
        else:
            th = clutter.adaptive_thresholds(blocks[0], knee_db=self.knee_db, floor_db=self.floor_db)
            low = th.low_cut if self.low_cut is None else int(self.low_cut)
            high = th.high_cut if self.high_cut is None else int(self.high_cut)
            self.thresholds_ = th if (low, high) == (th.low_cut, th.high_cut) else \
                clutter.SvdThresholds(low, high, th.method, th.warning)
        self.thresholds_.validate(blocks[0].n_frames)
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        return [clutter.svd_filter(b, self.thresholds_) for b in check_blocks(X)]


class SpatialTgc(TransformerMixin, BaseEstimator):
    """Gain compensation from blurred power Doppler of clutter-filtered blocks.

    ``fit`` takes filtered blocks, ``transform`` the matching raw blocks.
    With ``scope="block"`` block ``k`` is normalised by its own map; with
    ``"all"`` one map built from every block is shared.
    """

    def __init__(self, sigma_lambda: float = 9.0, floor_ratio: float = 1e-3,
                 domain: str = "amplitude", scope: str = "block"):
        self.sigma_lambda = sigma_lambda
        self.floor_ratio = floor_ratio
        self.domain = domain
        self.scope = scope

    def fit(self, X, y=None):
        check_choice("domain", self.domain, ("amplitude", "power"))
        check_choice("scope", self.scope, ("block", "all"))
        check_positive("sigma_lambda", self.sigma_lambda, allow_zero=True)
        blocks = check_blocks(X)
        if self.scope == "all":
            self.maps_ = [clutter.compute_attenuation_map(blocks, self.sigma_lambda, self.floor_ratio)]
        else:
            self.maps_ = [clutter.compute_attenuation_map([b], self.sigma_lambda, self.floor_ratio)
                          for b in blocks]
        return self

    def map_for(self, k: int):
        check_is_fitted(self, "maps_")
        return self.maps_[0] if len(self.maps_) == 1 else self.maps_[k]

    def transform(self, X):
        blocks = check_blocks(X)
        check_is_fitted(self, "maps_")
        if len(self.maps_) > 1 and len(blocks) != len(self.maps_):
            raise ValueError(f"{len(blocks)} blocks for {len(self.maps_)} per-block maps")
        return [clutter.apply_tgc(b, self.map_for(k), self.domain) for k, b in enumerate(blocks)]


class ClutterFilter(TransformerMixin, BaseEstimator):
    """Complete rejection path: filter, build gain maps, normalise the raw
    blocks and filter them again with the very same thresholds."""

    def __init__(self, low_cut: Optional[int] = None, high_cut: Optional[int] = None,
                 knee_db: float = 3.0, floor_db: float = 3.0, tgc: bool = True,
                 sigma_lambda: float = 9.0, floor_ratio: float = 1e-3, domain: str = "amplitude",
                 scope: str = "block"):
        self.low_cut = low_cut
        self.high_cut = high_cut
        self.knee_db = knee_db
        self.floor_db = floor_db
        self.tgc = tgc
        self.sigma_lambda = sigma_lambda
        self.floor_ratio = floor_ratio
        self.domain = domain
        self.scope = scope

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        blocks = check_blocks(X)
        self.svd_ = SvdClutterFilter(self.low_cut, self.high_cut, self.knee_db, self.floor_db).fit(blocks)
        self.thresholds_ = self.svd_.thresholds_
        first = self.svd_.transform(blocks)
        if not self.tgc:
            self.tgc_ = None
            return first
        self.tgc_ = SpatialTgc(self.sigma_lambda, self.floor_ratio, self.domain, self.scope).fit(first)
        return self.svd_.transform(self.tgc_.transform(blocks))

    def transform(self, X):
        check_is_fitted(self, "svd_")
        blocks = check_blocks(X)
        if self.tgc_ is not None:
            blocks = self.tgc_.transform(blocks)
        return self.svd_.transform(blocks)


class BubbleLocalizer(TransformerMixin, BaseEstimator):
    """Enhanced envelope, spherical local maxima and sub-voxel Gaussian fits."""

    def __init__(self, ensemble_window: int = 5, gate_db: float = 40.0, cap: int = 2048,
                 radius_lambda: float = 2.5, kernel_lambda: float = 3.0, method: str = "kernel",
                 workers: int = 1):
        self.ensemble_window = ensemble_window
        self.gate_db = gate_db
        self.cap = cap
        self.radius_lambda = radius_lambda
        self.kernel_lambda = kernel_lambda
        self.method = method
        self.workers = workers

    def fit(self, X=None, y=None):
        check_choice("method", self.method, ("kernel", "profile"))
        check_positive("cap", self.cap)
        check_positive("ensemble_window", self.ensemble_window)
        self.n_detections_ = 0
        return self

    def transform(self, X):
        if not hasattr(self, "n_detections_"):
            self.fit()
        out = []
        for b in check_blocks(X):
            env = localize.enhance(b, self.ensemble_window)
            out.extend(localize.detect_block(env, self.workers, gate_db=self.gate_db, cap=self.cap,
                                             radius_lambda=self.radius_lambda,
                                             kernel_lambda=self.kernel_lambda, method=self.method))
        self.n_detections_ = len(out)
        return out


class BubbleTracker(TransformerMixin, BaseEstimator):
    """Gated Hungarian linking with length and displacement filters.

    Gates are expressed on the beamforming grid: ``max_link_voxels`` voxels
    and ``min_displacement_lambda`` wavelengths, converted to mm by ``fit``.
    """

    def __init__(self, max_link_voxels: float = 1.0, min_length: int = 10,
                 min_displacement_lambda: float = 2.0, displacement: str = "net"):
        self.max_link_voxels = max_link_voxels
        self.min_length = min_length
        self.min_displacement_lambda = min_displacement_lambda
        self.displacement = displacement

    def fit(self, X=None, y=None, grid: Optional[GridSpec] = None):
        grid = check_grid(grid)
        check_positive("max_link_voxels", self.max_link_voxels)
        check_choice("displacement", self.displacement, ("net", "path"))
        self.max_link_mm_ = self.max_link_voxels * max(grid.spacing)
        self.min_displacement_mm_ = self.min_displacement_lambda * grid.wavelength
        return self

    def transform(self, X):
        check_is_fitted(self, "max_link_mm_")
        return track.track_detections(check_detections(X), self.max_link_mm_, self.min_length,
                                      self.min_displacement_mm_, self.displacement)

    def max_velocity(self, volume_rate: float) -> float:
        check_is_fitted(self, "max_link_mm_")
        return track.max_velocity(self.max_link_mm_, volume_rate)


class UlmRenderer(TransformerMixin, BaseEstimator):
    """Density and velocity maps on a ``wavelength / grid_fraction`` grid.

    ``fit`` fixes the rendering grid: the refinement of the beamforming
    grid passed as ``grid``, or ``render_grid`` when given.
    """

    def __init__(self, grid_fraction: float = 10, volume_rate: Optional[float] = None,
                 normalize: str = "tracks", workers: int = 1):
        self.grid_fraction = grid_fraction
        self.volume_rate = volume_rate
        self.normalize = normalize
        self.workers = workers

    def fit(self, X=None, y=None, grid: Optional[GridSpec] = None,
            render_grid: Optional[GridSpec] = None):
        check_choice("normalize", self.normalize, ("tracks", "samples"))
        self.grid_ = render_grid if render_grid is not None else check_grid(grid).refine(self.grid_fraction)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        return render.render_tracks(check_tracks(X), self.grid_, self.volume_rate, self.workers,
                                    self.normalize)


class DriftCorrector(TransformerMixin, BaseEstimator):
    """Rigid per-bin drift from density maps, undone on track positions."""

    def __init__(self, window: int = 20, reference: str = "first", whiten: bool = False,
                 workers: int = 1):
        self.window = window
        self.reference = reference
        self.whiten = whiten
        self.workers = workers

    def fit(self, X, y=None, grid: Optional[GridSpec] = None):
        grid = check_grid(grid)
        check_choice("reference", self.reference, ("first", "middle", "highest-count"))
        tracks = check_tracks(X)
        bins = register.bin_tracks(tracks, self.window)
        maps = {}
        for b, ts in bins.items():
            processed = render.process_tracks(ts, min(grid.spacing), None, self.workers)
            maps[b] = render.accumulate_density(processed, grid).density
        self.drift_ = register.estimate_drift(maps, grid, self.window, self.reference, self.whiten,
                                              self.workers)
        return self

    def transform(self, X):
        check_is_fitted(self, "drift_")
        return register.correct_tracks(check_tracks(X), self.drift_)
