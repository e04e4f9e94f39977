"""Layered run configuration: defaults, optional JSON file, key=value overrides.

Unknown keys are rejected. The resolved snapshot plus the seed reproduces a
run; an architecture hash guards checkpoints against mismatched model shapes.
"""

from __future__ import annotations

import copy
import hashlib
import json

DEFAULTS = {
    "seed": 0,
    "dtype": "float64",
    "num_classes": 15,
    "backbone.stage_widths": [32, 64, 128, 256],
    "fpn.channels": 256,
    "sea.enabled": True,
    "sea.uniform_level": 3,
    "sea.fusion": "MULTIPLY",
    "sea.width": 256,
    "scmb.enabled": True,
    "scmb.branches": [7, 14, 28],
    "scmb.fusion": "CONCATE",
    "scmb.width": 256,
    "head.hidden": 1024,
    "proposals.mode": "GT_JITTER",
    "proposals.replicas": 4,
    "proposals.background": 8,
    "proposals.jitter_center": 0.1,
    "proposals.jitter_size": 0.1,
    "proposals.rpn_topk": 64,
    "train.lr": 0.005,
    "train.schedule": "constant",
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.epochs": 12,
    "train.sample_rois": 64,
    "train.fg_fraction": 0.25,
    "train.checkpoint_every": 200,
    "train.multi_scale": False,
    "train.scales": [192, 256, 320],
    "infer.nms": 0.5,
    "infer.mask_threshold": 0.5,
    "infer.max_dets": 1000,
    "infer.score_floor": 0.05,
    "synth.num_images": 16,
    "synth.image_size": 256,
    "synth.classes": ["disc", "rectangle", "bar"],
    "synth.scale_range": [0.08, 0.7],
    "synth.instances": [2, 5],
    "synth.clutter": 6,
    "synth.texture": 0.15,
    "synth.placement_retries": 30,
}

# keys that determine parameter shapes; they feed the checkpoint guard hash
ARCH_KEYS = (
    "dtype",
    "num_classes",
    "backbone.stage_widths",
    "fpn.channels",
    "sea.enabled",
    "sea.uniform_level",
    "sea.fusion",
    "sea.width",
    "scmb.enabled",
    "scmb.branches",
    "scmb.fusion",
    "scmb.width",
    "head.hidden",
    "proposals.mode",
)

_FUSION_MODES = ("MULTIPLY", "CONCATE")
_PROPOSAL_MODES = ("GT_JITTER", "RPN_LITE")
_SCHEDULES = ("constant", "step_decay")


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values; carries the key path."""


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = copy.deepcopy(DEFAULTS)
        if values:
            self.update(values)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key: {key}")
        return self._values[key]

    def update(self, values: dict) -> "RunConfig":
        for key, val in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            self._values[key] = _coerce(key, val)
        self.validate()
        return self

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Parse "key=value" strings (CLI layer)."""
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            key, raw = item.split("=", 1)
            parsed[key.strip()] = _parse_literal(key.strip(), raw.strip())
        return self.update(parsed)

    def validate(self) -> None:
        v = self._values
        if v["sea.uniform_level"] not in (3, 4, 5, 6):
            raise ConfigError("sea.uniform_level: must be one of 3..6 (level 2 exceeds the memory budget)")
        if v["sea.fusion"] not in _FUSION_MODES or v["scmb.fusion"] not in _FUSION_MODES:
            raise ConfigError("sea.fusion/scmb.fusion: must be MULTIPLY or CONCATE")
        branches = v["scmb.branches"]
        if not branches or not set(branches) <= {7, 14, 28} or 14 not in branches:
            raise ConfigError("scmb.branches: nonempty subset of {7,14,28} containing 14")
        v["scmb.branches"] = sorted(set(branches))
        if v["proposals.mode"] not in _PROPOSAL_MODES:
            raise ConfigError("proposals.mode: must be GT_JITTER or RPN_LITE")
        if v["train.schedule"] not in _SCHEDULES:
            raise ConfigError("train.schedule: must be constant or step_decay")
        if len(v["backbone.stage_widths"]) != 4:
            raise ConfigError("backbone.stage_widths: exactly four stage widths")
        if v["dtype"] not in ("float64", "float32"):
            raise ConfigError("dtype: float64 or float32")
        lo, hi = v["synth.scale_range"]
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("synth.scale_range: must satisfy 0 < min <= max <= 1")
        if v["num_classes"] < 1:
            raise ConfigError("num_classes: must be >= 1")

    def snapshot(self) -> dict:
        return copy.deepcopy(self._values)

    def arch_hash(self) -> str:
        payload = json.dumps({k: self._values[k] for k in ARCH_KEYS}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.snapshot(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls(json.load(f))


def _coerce(key: str, val):
    ref = DEFAULTS[key]
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{key}: expected a boolean, got {val!r}")
        return val
    if isinstance(ref, int) and not isinstance(val, bool):
        if isinstance(val, float) and val.is_integer():
            return int(val)
        if not isinstance(val, int):
            raise ConfigError(f"{key}: expected an integer, got {val!r}")
        return val
    if isinstance(ref, float):
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"{key}: expected a number, got {val!r}")
        return float(val)
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"{key}: expected a string, got {val!r}")
        return val
    if isinstance(ref, list):
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {val!r}")
        return list(val)
    raise ConfigError(f"{key}: unsupported config type")


def _parse_literal(key: str, raw: str):
    ref = DEFAULTS.get(key)
    if ref is None:
        raise ConfigError(f"unknown config key: {key}")
    if isinstance(ref, bool):
        if raw.lower() in ("true", "on", "1", "yes"):
            return True
        if raw.lower() in ("false", "off", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(ref, int):
        return int(raw)
    if isinstance(ref, float):
        return float(raw)
    if isinstance(ref, list):
        items = [s for s in raw.split(",") if s]
        if ref and isinstance(ref[0], str):
            return items
        if ref and isinstance(ref[0], float):
            return [float(s) for s in items]
        return [int(float(s)) for s in items]
    return raw
