"""Pipeline configuration: every stage tunable under a ``stage.name`` key."""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Iterable, Optional

DEFAULTS: dict = {
    "beamform.gridFraction": 2,
    "beamform.interpolation": "linear",
    "clutter.lowCut": None,
    "clutter.highCut": None,
    "clutter.kneeDb": 3.0,
    "clutter.floorDb": 3.0,
    "clutter.tgc": True,
    "clutter.tgcSigmaLambda": 9,
    "clutter.tgcFloorRatio": 1e-3,
    "clutter.tgcDomain": "amplitude",
    "clutter.powerDopplerScope": "block",
    "localize.gateDb": 40,
    "localize.cap": 2048,
    "localize.ensembleWindow": 5,
    "localize.dilationRadiusLambda": 2.5,
    "localize.kernelLambda": 3,
    "localize.fitMethod": "kernel",
    "track.maxLinkVoxels": 1,
    "track.minLength": 10,
    "track.minDisplacementLambda": 2,
    "track.displacement": "net",
    "render.gridFractionDensity": 10,
    "render.blurSigmaVoxels": 1,
    "render.velocityNormalization": "tracks",
    "register.enabled": True,
    "register.binWindow": 20,
    "register.reference": "first",
    "register.whiten": False,
    "metrics.gridFractionFsc": 20,
    "metrics.splitSeed": 0,
    "metrics.roi": None,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


class PipelineConfig:
    """Flat ``stage.name -> value`` mapping with validated keys."""

    def __init__(self, values: Optional[dict] = None):
        self._values = copy.deepcopy(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict) -> "PipelineConfig":
        for key, val in _flatten(values).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            self._values[key] = val
        return self

    def apply_overrides(self, overrides: Iterable[str]) -> "PipelineConfig":
        """Apply ``stage.key=value`` strings; values are parsed as JSON when possible."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form stage.key=value")
            key, raw = item.split("=", 1)
            self.update({key.strip(): _coerce(raw.strip())})
        return self

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def get(self, key: str, default=None) -> Any:
        return self._values.get(key, default)

    def stage(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def to_dict(self) -> dict:
        return dict(sorted(self._values.items()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("configuration file must hold a JSON object")
        return cls(data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _flatten(d: dict, prefix: str = "") -> dict:
    """Accept both flat ``{"stage.key": v}`` and nested ``{"stage": {"key": v}}`` forms."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in DEFAULTS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out
