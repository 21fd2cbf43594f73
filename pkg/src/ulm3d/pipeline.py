"""File-based stages chained by the command line driver.

Every stage reads from and writes to a directory. ``meta.json`` travels
with the data and records the beamforming grid and the volume rate.
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io, localize, metrics, register, render
from .beamform import ChannelDataBlock, beamform_events
from .config import PipelineConfig
from .core import AcquisitionGeometry, FormatError, GridSpec, IQVolumeBlock, ScalarVolume
from .estimators import (BubbleLocalizer, BubbleTracker, DriftCorrector, SpatialTgc,
                         SvdClutterFilter, UlmRenderer)
from .phantom import Scene, export_ground_truth, point_scatterer_channels

META = "meta.json"


class UsageError(Exception):
    """Missing or inconsistent inputs to a stage."""


def write_meta(directory, grid: GridSpec, volume_rate: float, **extra) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"grid": grid.to_dict(), "volume_rate": float(volume_rate), **extra}
    path = d / META
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def read_meta(directory) -> dict:
    path = Path(directory) / META
    if not path.exists():
        raise UsageError(f"{directory}: no {META}; run the previous stage first")
    with open(path) as fh:
        meta = json.load(fh)
    try:
        meta["grid"] = GridSpec.from_dict(meta["grid"])
        meta["volume_rate"] = float(meta["volume_rate"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed metadata") from exc
    return meta


def _copy_meta(src, dst) -> Path:
    Path(dst).mkdir(parents=True, exist_ok=True)
    return Path(shutil.copyfile(Path(src) / META, Path(dst) / META))


def block_paths(directory, prefix: str = "block") -> list:
    paths = sorted(Path(directory).glob(f"{prefix}_*.ulm"))
    if not paths:
        raise UsageError(f"{directory}: no {prefix}_*.ulm volumes found")
    return paths


def read_block(path) -> IQVolumeBlock:
    vol = io.read_volume(path)
    if not isinstance(vol, IQVolumeBlock):
        raise FormatError(f"{path}: expected complex IQ data")
    return vol


def write_block(block: IQVolumeBlock, directory, prefix: str = "block") -> Path:
    path = Path(directory) / f"{prefix}_{block.block_index:04d}.ulm"
    io.write_volume(block, path)
    return path


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing input {p}")
    return p


# --- stages -----------------------------------------------------------------

def run_simulate(scene: Scene, out_dir, workers: int = 1, channels: bool = False) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events = scene.events()
    outputs = [write_block(b, out) for b in scene.render(events, workers)]
    gt = out / "ground_truth.csv"
    export_ground_truth(events, scene.segments, gt)
    outputs += [gt, gt.with_name(gt.stem + "_segments.csv")]
    if channels:
        first = [ev.positions[0] for ev in events if len(ev.frames) and ev.frames[0] == 0]
        ch = point_scatterer_channels(scene.geometry(), np.asarray(first).reshape(-1, 3))
        outputs += write_channels(ch, out / "channels.ulm")
    outputs.append(write_meta(out, scene.grid, scene.volume_rate, seed=scene.seed,
                              block_length=scene.block_length))
    return outputs


def write_channels(ch: ChannelDataBlock, path) -> list:
    """Channel data as a complex container ``(channel, sample, event, 1)`` plus a JSON sidecar."""
    path = Path(path)
    data = ch.samples.astype(np.complex64)
    grid = GridSpec((0, 0, 0), (1, 1, 1), data.shape, ch.geometry.wavelength)
    io.write_volume(IQVolumeBlock(grid, data[..., None], 0, ch.sample_rate), path)
    side = path.with_suffix(".json")
    with open(side, "w") as fh:
        json.dump({"geometry": ch.geometry.to_dict(), "sample_rate": ch.sample_rate,
                   "start_time": ch.start_time, "demod_frequency": ch.demod_frequency,
                   "event_angles": [list(a) for a in ch.event_angles]}, fh, indent=2, sort_keys=True)
    return [path, side]


def read_channels(path) -> ChannelDataBlock:
    path = _require(path)
    side = _require(Path(path).with_suffix(".json"))
    vol = read_block(path)
    with open(side) as fh:
        meta = json.load(fh)
    geom = AcquisitionGeometry.from_dict(meta["geometry"])
    return ChannelDataBlock(geom, vol.frames[..., 0], meta["sample_rate"], meta["start_time"],
                            meta.get("demod_frequency"), tuple(map(tuple, meta["event_angles"])))


def run_beamform(channels_path, grid: GridSpec, out_dir, cfg: PipelineConfig) -> list:
    ch = read_channels(channels_path)
    vol = beamform_events(ch, grid, interpolation=cfg["beamform.interpolation"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    block = IQVolumeBlock(grid, vol.astype(np.complex64)[..., None], 0, ch.geometry.volume_rate)
    return [write_block(block, out), write_meta(out, grid, ch.geometry.volume_rate)]


def run_filter(in_dir, out_dir, cfg: PipelineConfig) -> list:
    paths = block_paths(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.stage("clutter")
    first = read_block(paths[0])
    svd = SvdClutterFilter(c["lowCut"], c["highCut"], c["kneeDb"], c["floorDb"]).fit(first)
    tgc_kw = dict(sigma_lambda=c["tgcSigmaLambda"], floor_ratio=c["tgcFloorRatio"],
                  domain=c["tgcDomain"], scope=c["powerDopplerScope"])
    outputs = []
    shared = None
    if c["tgc"] and c["powerDopplerScope"] == "all":
        shared = SpatialTgc(**tgc_kw).fit([svd.transform(read_block(p))[0] for p in paths])
        outputs.append(_write_map(shared.maps_[0], out / "tgc_map_all.ulm"))
    for p in paths:
        raw = read_block(p)
        if c["tgc"]:
            tgc = shared
            if tgc is None:
                tgc = SpatialTgc(**tgc_kw).fit(svd.transform(raw))
                outputs.append(_write_map(tgc.maps_[0], out / f"tgc_map_{raw.block_index:04d}.ulm",
                                          raw.block_index))
            raw = tgc.transform(raw)[0]
        outputs.append(write_block(svd.transform(raw)[0], out))
    side = out / "thresholds.json"
    with open(side, "w") as fh:
        json.dump(svd.thresholds_.to_dict(), fh, indent=2, sort_keys=True)
    outputs += [side, _copy_meta(in_dir, out)]
    return outputs


def _write_map(amap, path, block_index: int = 0) -> Path:
    io.write_volume(ScalarVolume(amap.grid, amap.values.astype(np.float32), block_index), path)
    return Path(path)


def run_localize(in_dir, out_dir, cfg: PipelineConfig, workers: int = 1) -> list:
    c = cfg.stage("localize")
    loc = BubbleLocalizer(c["ensembleWindow"], c["gateDb"], c["cap"], c["dilationRadiusLambda"],
                          c["kernelLambda"], c["fitMethod"], workers).fit()
    dets = []
    for p in block_paths(in_dir):
        dets.extend(loc.transform(read_block(p)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "detections.csv"
    io.write_detections(dets, path)
    return [path, _copy_meta(in_dir, out)]


def run_track(in_dir, out_dir, cfg: PipelineConfig) -> list:
    meta = read_meta(in_dir)
    c = cfg.stage("track")
    dets = io.read_detections(_require(Path(in_dir) / "detections.csv"))
    tracker = BubbleTracker(c["maxLinkVoxels"], c["minLength"], c["minDisplacementLambda"],
                            c["displacement"]).fit(grid=meta["grid"])
    tracks = tracker.transform(dets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "tracks.csv"
    io.write_tracks(tracks, path)
    return [path, _copy_meta(in_dir, out)]


def render_grid(meta: dict, cfg: PipelineConfig) -> GridSpec:
    return meta["grid"].refine(cfg["render.gridFractionDensity"])


def run_register(in_dir, out_dir, cfg: PipelineConfig, workers: int = 1) -> list:
    meta = read_meta(in_dir)
    c = cfg.stage("register")
    tracks = io.read_tracks(_require(Path(in_dir) / "tracks.csv"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    drift_path, track_path = out / "drift.csv", out / "tracks.csv"
    if tracks:
        corr = DriftCorrector(c["binWindow"], c["reference"], c["whiten"], workers)
        corr.fit(tracks, grid=render_grid(meta, cfg))
        corr.drift_.to_csv(drift_path)
        io.write_tracks(corr.transform(tracks), track_path)
    else:
        register.DriftEstimate(render_grid(meta, cfg), c["binWindow"], 0).to_csv(drift_path)
        io.write_tracks([], track_path)
    return [drift_path, track_path, _copy_meta(in_dir, out)]


def _mip_images(volume: np.ndarray, out: Path, stem: str, kind: str) -> list:
    outputs = []
    for axis, name in enumerate("xyz"):
        path = out / f"{stem}_mip_{name}.{'pgm' if kind == 'gray' else 'ppm'}"
        if kind == "gray":
            io.write_pgm16(render.mip(volume, axis), path)
        elif kind == "signed":
            proj = render.signed_mip(volume, axis)
            io.write_ppm16(io.signed_colormap(proj, float(np.abs(volume).max())), path)
        else:
            proj = render.mip(volume, axis)
            io.write_ppm16(io.hot_colormap(proj, float(volume.max())), path)
        outputs.append(path)
    return outputs


def run_render(in_dir, out_dir, cfg: PipelineConfig, workers: int = 1) -> list:
    meta = read_meta(in_dir)
    tracks = io.read_tracks(_require(Path(in_dir) / "tracks.csv"))
    r = cfg.stage("render")
    grid = render_grid(meta, cfg)
    rm = UlmRenderer(r["gridFractionDensity"], meta["volume_rate"], r["velocityNormalization"],
                     workers).fit(render_grid=grid).transform(tracks)
    sigma = r["blurSigmaVoxels"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vel = rm.rendered_velocity(sigma)
    volumes = {
        "density": rm.density.astype(np.float32),
        "density_rendered": rm.rendered_density(sigma),
        "count": rm.count.astype(np.float32),
        "velocity_axial": vel[..., 2].astype(np.float32),
        "velocity_magnitude": np.linalg.norm(vel, axis=-1).astype(np.float32),
    }
    outputs = []
    for name, data in volumes.items():
        path = out / f"{name}.ulm"
        io.write_volume(ScalarVolume(grid, data, 0, meta["volume_rate"]), path)
        outputs.append(path)
    outputs += _mip_images(volumes["density_rendered"], out, "density", "gray")
    outputs += _mip_images(volumes["velocity_axial"], out, "velocity_axial", "signed")
    outputs += _mip_images(volumes["velocity_magnitude"], out, "velocity_magnitude", "hot")
    shutil.copyfile(Path(in_dir) / "tracks.csv", out / "tracks.csv")
    outputs += [out / "tracks.csv", write_meta(out, meta["grid"], meta["volume_rate"],
                                               render_grid=grid.to_dict(), n_tracks=len(tracks))]
    return outputs


FSC_VOXEL_BUDGET = 1 << 24


def fsc_grid(meta: dict, cfg: PipelineConfig, tracks: Sequence) -> GridSpec:
    """Fine grid for the resolution measurement, cropped to a region of interest.

    The region is ``metrics.roi`` (``[[x0, y0, z0], [x1, y1, z1]]`` in mm) or
    else the bounding box of the tracks, shrunk about its centre until it
    fits the voxel budget.
    """
    k = cfg["metrics.gridFractionFsc"]
    wl = meta["grid"].wavelength
    roi = cfg["metrics.roi"]
    if roi is not None:
        lo, hi = np.asarray(roi[0], float), np.asarray(roi[1], float)
    else:
        pts = np.concatenate([t.positions for t in tracks]) if tracks else np.zeros((1, 3))
        lo, hi = pts.min(axis=0) - wl, pts.max(axis=0) + wl
        lo = np.maximum(lo, meta["grid"].origin)
        hi = np.minimum(hi, meta["grid"].upper)
    step = wl / k
    extent = np.maximum(hi - lo, step)
    n = extent / step
    if np.prod(n) > FSC_VOXEL_BUDGET:
        shrink = (FSC_VOXEL_BUDGET / np.prod(n)) ** (1 / 3)
        centre = (lo + hi) / 2
        extent = extent * shrink
        lo, hi = centre - extent / 2, centre + extent / 2
    return GridSpec.covering(k, wl, lo, hi)


def run_fsc(in_dir, out_dir, cfg: PipelineConfig, workers: int = 1) -> list:
    meta = read_meta(in_dir)
    tracks = io.read_tracks(_require(Path(in_dir) / "tracks.csv"))
    if len(tracks) < 2:
        raise UsageError("resolution measurement needs at least two tracks")
    grid = fsc_grid(meta, cfg, tracks)
    half_a, half_b = metrics.split_tracks(tracks, cfg["metrics.splitSeed"])
    maps = [render.accumulate_density(render.process_tracks(h, min(grid.spacing), None, workers), grid)
            for h in (half_a, half_b)]
    curve = metrics.fsc_on_grid(maps[0].density, maps[1].density, grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, img_path, json_path = out / "fsc.csv", out / "fsc.png", out / "fsc.json"
    curve.to_csv(csv_path)
    plot_fsc(curve, img_path)
    with open(json_path, "w") as fh:
        json.dump({"resolution_um": curve.resolution_um, "resolved": curve.resolved,
                   "n_tracks": len(tracks), "grid": grid.to_dict()}, fh, indent=2, sort_keys=True)
    return [csv_path, img_path, json_path]


def plot_fsc(curve: metrics.FscCurve, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(curve.radii, curve.correlation, label="FSC")
    ax.plot(curve.radii, curve.threshold, "--", label="half-bit")
    if curve.resolved:
        ax.axvline(1 / curve.resolution, color="k", lw=0.8)
    ax.set_xlabel("spatial frequency (1/mm)")
    ax.set_ylabel("correlation")
    ax.set_title(f"resolution {curve.resolution_um:.1f} um" + ("" if curve.resolved else " (not resolved)"))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def parse_box(text: str) -> tuple:
    """``name=x0,y0,z0:x1,y1,z1`` -> (name, lower, upper)."""
    try:
        name, spec = text.split("=", 1)
        a, b = spec.split(":")
        lo = np.array([float(v) for v in a.split(",")])
        hi = np.array([float(v) for v in b.split(",")])
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError
    except ValueError:
        raise UsageError(f"cannot parse {text!r}; expected name=x0,y0,z0:x1,y1,z1") from None
    return name, lo, hi


def track_mean_speeds(tracks: Sequence, volume_rate: float) -> tuple:
    """Mean speed (mm/s) of each track's smoothed path and its mean position."""
    speeds, centres = [], []
    for t in tracks:
        st = render.track_velocities(render.smooth_track(t), volume_rate)
        speeds.append(float(np.linalg.norm(st.velocities, axis=1).mean()) if len(st.velocities) else 0.0)
        centres.append(t.positions.mean(axis=0))
    return np.asarray(speeds), np.asarray(centres).reshape(-1, 3)


def run_report(maps_dir, out_path, regions: Sequence[str] = (), lines: Sequence[str] = (),
               fsc_dir: Optional[Path] = None) -> list:
    maps_dir = Path(maps_dir)
    if not (maps_dir / "density.ulm").exists():
        raise UsageError(f"{maps_dir}: no rendered maps (density.ulm) found")
    meta = read_meta(maps_dir)
    tracks = io.read_tracks(_require(maps_dir / "tracks.csv"))
    density = io.read_volume(maps_dir / "density_rendered.ulm")
    speeds, centres = track_mean_speeds(tracks, meta["volume_rate"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report: dict = {"n_tracks": len(tracks)}
    per_block: dict = {}
    for t in tracks:
        per_block[t.block] = per_block.get(t.block, 0) + 1
    report["tracks_per_block"] = {str(k): v for k, v in sorted(per_block.items())}
    fsc_json = (fsc_dir or maps_dir.parent / "fsc") / "fsc.json"
    if fsc_json.exists():
        with open(fsc_json) as fh:
            f = json.load(fh)
        report["resolution_um"] = f["resolution_um"]
        report["resolved"] = f["resolved"]
    region_samples = {}
    for text in regions:
        name, lo, hi = parse_box(text)
        inside = np.all((centres >= lo) & (centres <= hi), axis=1) if len(centres) else np.zeros(0, bool)
        region_samples[name] = speeds[inside]
    report["regions"] = {}
    bins = np.linspace(0, max(float(speeds.max()) if speeds.size else 1.0, 1e-9), 21)
    for name, s in region_samples.items():
        hist = np.histogram(s, bins)[0].tolist()
        report["regions"][name] = {"n_tracks": int(s.size),
                                   "median_speed_mm_s": float(np.median(s)) if s.size else None,
                                   "histogram_edges": bins.tolist(), "histogram_counts": hist}
    report["ks"] = []
    names = list(region_samples)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = region_samples[names[i]], region_samples[names[j]]
            if a.size and b.size:
                r = metrics.ks_2samp(a, b)
                report["ks"].append({"a": names[i], "b": names[j], "D": r.statistic, "p": r.pvalue})
    outputs = [out_path]
    report["profiles"] = []
    for text in lines:
        name, p0, p1 = parse_box(text)
        dist, vals = metrics.profile_along_line(density.values, density.grid, p0, p1)
        prof = out_path.with_name(f"profile_{name}.csv")
        metrics.write_profile_csv(prof, dist, vals)
        report["profiles"].append(prof.name)
        outputs.append(prof)
    json_path = out_path.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(out_path, "w") as fh:
        fh.write(format_report(report))
    outputs.append(json_path)
    return outputs


def format_report(report: dict) -> str:
    lines = ["# ULM report", ""]
    if "resolution_um" in report:
        flag = "" if report["resolved"] else " (not resolved, grid limit)"
        lines.append(f"resolution: {report['resolution_um']:.1f} um{flag}")
    lines.append(f"tracks: {report['n_tracks']}")
    for b, n in report["tracks_per_block"].items():
        lines.append(f"  block {b}: {n}")
    for name, r in report["regions"].items():
        med = "n/a" if r["median_speed_mm_s"] is None else f"{r['median_speed_mm_s']:.2f} mm/s"
        lines.append(f"region {name}: {r['n_tracks']} tracks, median speed {med}")
    for k in report["ks"]:
        lines.append(f"KS {k['a']} vs {k['b']}: D = {k['D']:.4f}, p = {k['p']:.3g}")
    for p in report["profiles"]:
        lines.append(f"profile: {p}")
    return "\n".join(lines) + "\n"


def run_pipeline(scene: Scene, out_dir, cfg: PipelineConfig, workers: int = 1,
                 regions: Sequence[str] = (), lines: Sequence[str] = ()) -> dict:
    """All stages from phantom to report; returns the outputs per stage."""
    out = Path(out_dir)
    d = {k: out / k for k in ("sim", "filtered", "detections", "tracks", "registered", "maps", "fsc")}
    res = {"simulate": run_simulate(scene, d["sim"], workers)}
    res["filter"] = run_filter(d["sim"], d["filtered"], cfg)
    res["localize"] = run_localize(d["filtered"], d["detections"], cfg, workers)
    res["track"] = run_track(d["detections"], d["tracks"], cfg)
    src = d["tracks"]
    if cfg["register.enabled"]:
        res["register"] = run_register(d["tracks"], d["registered"], cfg, workers)
        src = d["registered"]
    res["render"] = run_render(src, d["maps"], cfg, workers)
    n_tracks = len(io.read_tracks(src / "tracks.csv"))
    if n_tracks >= 2:
        res["fsc"] = run_fsc(src, d["fsc"], cfg, workers)
    res["report"] = run_report(d["maps"], out / "report.md", regions, lines, d["fsc"])
    return res
