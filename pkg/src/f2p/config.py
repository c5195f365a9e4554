"""Pipeline configuration: one JSON document with every seed and geometry constant spelled out.

Keys (all optional; missing keys take the values in ``DEFAULTS``)::

    schema        path to a schema JSON, relative to the config file; null = toy schema
    canvas        [h, w] of rendered and registered frames
    crops         {boxes: {region: [x0, y0, x1, y1]}, size: [h, w], background, eyes: [[x, y], [x, y]]}
    augmentation  {background, rotation, translation, brightness, noise}
    data          {normalize, train: {n, seed, style_levels}, eval: {n, seed, style_levels}}
    features      {n, sizes, epochs, seed, lr}
    training      TrainConfig fields shared by every cell (seed, patience, decay, ...)
    ensemble      {split: train | holdout}
    adapter       adapter id used for inference (identity, posterize:<L>, external:<cmd>)
    ablation      {regions, seed}
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from ._imaging import sha256_bytes, sha256_file
from .codec import ParameterSchema
from .synthfaces import DEFAULT_CANVAS, FEATURE_REGIONS, AugmentationRanges, CropConfig, toy_schema

DEFAULTS = {
    "schema": None,
    "canvas": list(DEFAULT_CANVAS),
    "crops": CropConfig().to_dict(),
    "augmentation": AugmentationRanges().to_dict(),
    "data": {
        "normalize": True,
        "train": {"n": 2000, "seed": 1, "style_levels": 4},
        "eval": {"n": 500, "seed": 2, "style_levels": None},
    },
    "features": {"n": 3000, "sizes": [64, 32], "epochs": 12, "seed": 0, "lr": 0.02},
    "training": {"seed": 0},
    "ensemble": {"split": "train"},
    "adapter": "posterize:4",
    "ablation": {"regions": list(FEATURE_REGIONS), "seed": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("crops",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        unknown = set(self.raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if self.raw["ensemble"]["split"] not in ("train", "holdout"):
            raise ConfigError("ensemble.split must be 'train' or 'holdout'")
        for split in ("train", "eval"):
            if "seed" not in self.raw["data"][split]:
                raise ConfigError(f"data.{split}.seed must be set explicitly")
        if self.raw["schema"] is not None and not self.schema_path.exists():
            raise ConfigError(f"schema file not found: {self.schema_path}")

    @classmethod
    def default(cls) -> "PipelineConfig":
        return cls(copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls.default()
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls(_merge(DEFAULTS, doc), p.parent)

    @property
    def schema_path(self) -> Path:
        return (self.base_dir / self.raw["schema"]).resolve()

    def schema(self) -> ParameterSchema:
        if self.raw["schema"] is None:
            return toy_schema()
        return ParameterSchema.load(self.schema_path)

    @property
    def canvas(self) -> tuple[int, int]:
        return tuple(self.raw["canvas"])

    def crops(self) -> CropConfig:
        d = dict(self.raw["crops"])
        d["canvas"] = self.raw["canvas"]
        return CropConfig.from_dict(d)

    def augmentation(self) -> AugmentationRanges:
        return AugmentationRanges.from_dict(self.raw["augmentation"])

    def data(self, split: str) -> dict:
        if split not in ("train", "eval"):
            raise ConfigError(f"unknown data split {split!r}")
        return self.raw["data"][split]

    @property
    def training(self) -> dict:
        return dict(self.raw["training"])

    @property
    def adapter(self) -> str:
        return self.raw["adapter"]

    def resolved(self) -> dict:
        """The config with the schema path replaced by the schema file's digest."""
        out = copy.deepcopy(self.raw)
        if out["schema"] is not None:
            out["schema"] = {"sha256": sha256_file(self.schema_path)}
        return out

    def digest(self) -> str:
        return sha256_bytes(json.dumps(self.resolved(), sort_keys=True).encode())

    def dump(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"
