"""Command line driver: ``ulm3d <stage> ...``.

Exit codes: 0 success, 2 usage, 3 file format, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import io, pipeline
from .config import ConfigError, PipelineConfig
from .core import FormatError, GridSpec, NumericalError
from .phantom import Scene

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("ulm3d")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of stage.key values")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="STAGE.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="threads per stage (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ulm3d", description="3D ultrasound localization microscopy")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a phantom scene into IQ blocks")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--channels", action="store_true", help="also write point-scatterer channel data")

    p = sub.add_parser("beamform", help="delay-and-sum channel data onto a grid")
    _common(p)
    p.add_argument("--channels", type=Path, required=True, help="channel container (with .json sidecar)")
    p.add_argument("--grid", type=Path, required=True, help="JSON grid, or a meta.json holding one")
    p.add_argument("--out", type=Path, required=True)

    for name, text in (("filter", "SVD clutter filter with spatial gain compensation"),
                       ("localize", "detect and localize microbubbles"),
                       ("track", "link detections into tracks"),
                       ("register", "estimate and undo inter-bin drift"),
                       ("render", "density and velocity maps"),
                       ("fsc", "resolution by Fourier shell correlation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--in", dest="input", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="summarise rendered maps")
    _common(p)
    p.add_argument("--maps", type=Path, required=True)
    p.add_argument("--fsc", type=Path, help="directory holding fsc.json")
    p.add_argument("--out", type=Path, required=True, help="report file (a .json twin is written too)")
    p.add_argument("--region", action="append", default=[], metavar="NAME=X0,Y0,Z0:X1,Y1,Z1")
    p.add_argument("--line", action="append", default=[], metavar="NAME=X0,Y0,Z0:X1,Y1,Z1")

    p = sub.add_parser("pipeline", help="every stage from phantom scene to report")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--region", action="append", default=[], metavar="NAME=X0,Y0,Z0:X1,Y1,Z1")
    p.add_argument("--line", action="append", default=[], metavar="NAME=X0,Y0,Z0:X1,Y1,Z1")
    return ap


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.apply_overrides(args.overrides)


def _load_scene(path: Path) -> Scene:
    if not path.exists():
        raise pipeline.UsageError(f"scene file {path} not found")
    try:
        return Scene.load(path)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _load_grid(path: Path) -> GridSpec:
    if not path.exists():
        raise pipeline.UsageError(f"grid file {path} not found")
    with open(path) as fh:
        d = json.load(fh)
    try:
        return GridSpec.from_dict(d.get("grid", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: not a grid description") from exc


def _inputs(args) -> list:
    paths = []
    for attr in ("scene", "channels", "grid", "input", "maps", "config", "fsc"):
        p = getattr(args, attr, None)
        if isinstance(p, Path) and p.exists():
            paths.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    return paths


def write_manifest(args, cfg: PipelineConfig, outputs, seconds: float) -> Path:
    out = args.out if args.out.suffix == "" else args.out.parent
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for o in outputs:
        files.extend(o if isinstance(o, list) else [o])
    manifest = {
        "stage": args.command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "workers": args.workers,
        "inputs": {str(p): io.sha256_file(p) for p in _inputs(args)},
        "outputs": {str(p): io.sha256_file(p) for p in files if Path(p).exists()},
        "wall_time_s": round(seconds, 3),
    }
    path = out / f"manifest_{args.command}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def run(args) -> tuple:
    cfg = load_config(args)
    w = args.workers
    if w < 1:
        raise pipeline.UsageError("--workers must be >= 1")
    cmd = args.command
    if cmd == "simulate":
        scene = _load_scene(args.scene)
        return cfg, pipeline.run_simulate(scene, args.out, w, args.channels)
    if cmd == "beamform":
        return cfg, pipeline.run_beamform(args.channels, _load_grid(args.grid), args.out, cfg)
    if cmd in ("filter", "localize", "track", "register", "render", "fsc"):
        if not args.input.exists():
            raise pipeline.UsageError(f"{cmd}: input {args.input} does not exist")
        fn = {"filter": lambda: pipeline.run_filter(args.input, args.out, cfg),
              "localize": lambda: pipeline.run_localize(args.input, args.out, cfg, w),
              "track": lambda: pipeline.run_track(args.input, args.out, cfg),
              "register": lambda: pipeline.run_register(args.input, args.out, cfg, w),
              "render": lambda: pipeline.run_render(args.input, args.out, cfg, w),
              "fsc": lambda: pipeline.run_fsc(args.input, args.out, cfg, w)}[cmd]
        return cfg, fn()
    if cmd == "report":
        return cfg, pipeline.run_report(args.maps, args.out, args.region, args.line, args.fsc)
    if cmd == "pipeline":
        scene = _load_scene(args.scene)
        res = pipeline.run_pipeline(scene, args.out, cfg, w, args.region, args.line)
        return cfg, [p for v in res.values() for p in v]
    raise pipeline.UsageError(f"unknown command {cmd}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg, outputs = run(args)
        write_manifest(args, cfg, outputs, time.perf_counter() - t0)
    except (pipeline.UsageError, ConfigError) as exc:
        print(f"ulm3d {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"ulm3d {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"ulm3d {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
