"""Flat run configuration: defaults < key=value file < command-line flags.

Every knob of a run lives in one flat dataclass so a run directory can echo
the fully resolved values as JSON and a file of ``key = value`` lines can
reproduce it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .attn_augment import AUGMENTATIONS, AugmentConfig
from .backbone import BackboneConfig
from .preprocess import AUG_ORDER, PreprocessConfig, StochasticAugConfig
from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    manifest: str = ""
    out: str = "runs"
    # preprocessing
    clahe: bool = True
    clip_limit: float = 2.0
    tiles: tuple[int, ...] = (8, 8)
    input_size: int = 224
    zscore: bool = True
    # stochastic augmentation
    stochastic: tuple[str, ...] = ("brightness", "contrast", "crop")
    max_ops: int = 2
    brightness_range: tuple[float, ...] = (0.5, 1.0)
    contrast_range: tuple[float, ...] = (0.7, 1.0)
    rotation_range: tuple[float, ...] = (0.0, 120.0)
    crop_scale: tuple[float, ...] = (0.8, 1.0)
    # network
    stage_channels: tuple[int, ...] = (32, 64, 128)
    stem_channels: int = 16
    blocks_per_stage: tuple[int, ...] = (1, 1, 1)
    num_maps: int = 32
    scales: tuple[int, ...] = (2, 3)
    pooling: str = "attention"
    # attention-guided augmentation
    augs: tuple[str, ...] = AUGMENTATIONS
    theta_m: float = 0.5
    theta_d: float = 0.5
    gamma: tuple[float, ...] = (0.5,)
    dim_factor: float = 0.1
    # optimization (desk-scale defaults; see README for the reference schedule)
    epochs: int = 15
    batch_size: int = 32
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    theta: float = 0.7
    consistency: str = "soft"
    seed: int = 0
    deterministic: bool = True
    float64: bool = False
    # cross-validation
    k: int = 5
    folds: int = 0  # how many folds to run, starting at fold 0; 0 = all k

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(clip_limit=self.clip_limit, tiles=self.tiles,
                                target_size=(self.input_size, self.input_size),
                                zscore=self.zscore, clahe_enabled=self.clahe)

    def stochastic_config(self) -> StochasticAugConfig:
        return StochasticAugConfig(brightness_range=self.brightness_range, contrast_range=self.contrast_range,
                                   rotation_range=self.rotation_range, crop_scale=self.crop_scale,
                                   enabled=self.stochastic, max_ops_per_sample=self.max_ops)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(stage_channels=self.stage_channels, stem_channels=self.stem_channels,
                              blocks_per_stage=self.blocks_per_stage, input_size=self.input_size)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes, self.backbone_config(), self.num_maps, tuple(self.scales),
                           self.pooling, self.zscore)

    def augment_config(self) -> AugmentConfig:
        gamma = self.gamma[0] if len(self.gamma) == 1 else tuple(self.gamma)
        return AugmentConfig(theta_m=self.theta_m, theta_d=self.theta_d, gamma=gamma,
                             dim_factor=self.dim_factor, enabled=self.augs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, theta=self.theta, consistency=self.consistency,
                           seed=self.seed, deterministic=self.deterministic, float64=self.float64)

    def validate(self) -> "RunConfig":
        """Build every sub-config once so bad values fail before any work starts."""
        if len(self.tiles) != 2:
            raise ConfigError("tiles takes two integers, e.g. 8,8")
        for name in ("brightness_range", "contrast_range", "rotation_range", "crop_scale"):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"{name} takes two numbers lo,hi")
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ConfigError("stage_channels and blocks_per_stage take three integers")
        if len(self.gamma) not in (1, 2):
            raise ConfigError("gamma takes one value or an interval lo,hi")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not 0 <= self.folds <= self.k:
            raise ConfigError(f"folds must lie in [0, k={self.k}]")
        if not math.isfinite(self.lr):
            raise ConfigError("lr must be finite")
        try:
            self.preprocess_config()
            self.stochastic_config()
            self.backbone_config()
            self.augment_config()
            self.train_config()
            if self.pooling not in ("attention", "gap", "gmp"):
                raise ValueError(f"unknown pooling {self.pooling!r}")
            if not self.scales or any(s not in (1, 2, 3) for s in self.scales) or len(set(self.scales)) != len(self.scales):
                raise ValueError("scales must be distinct values from 1,2,3")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def fold_indices(self) -> list[int]:
        return list(range(self.folds or self.k))

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CHOICES = {
    "pooling": ("attention", "gap", "gmp"),
    "consistency": ("soft", "l2", "none"),
}
_ITEM_CHOICES = {"augs": AUGMENTATIONS, "stochastic": AUG_ORDER}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def parse_value(key: str, text: str) -> Any:
    """Convert the string form of ``key`` into its typed value."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            value = text
            if key in _CHOICES and value not in _CHOICES[key]:
                raise ValueError(f"choose from {', '.join(_CHOICES[key])}")
            return value
        items = [t.strip() for t in text.replace("x", ",").split(",")] if key == "tiles" else \
            [t.strip() for t in text.split(",")]
        items = [t for t in items if t]
        if kind == "tuple[int, ...]":
            return tuple(int(t) for t in items)
        if kind == "tuple[float, ...]":
            return tuple(float(t) for t in items)
        if key in _ITEM_CHOICES:
            bad = [t for t in items if t not in _ITEM_CHOICES[key]]
            if bad:
                raise ValueError(f"unknown item(s) {bad}; choose from {', '.join(_ITEM_CHOICES[key])}")
        return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; '#' starts a comment. Unknown keys fail."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        return _from_json(path)
    out: dict[str, Any] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = parse_value(key, value)
    return out


def _from_json(path: Path) -> dict[str, Any]:
    """Accept a resolved config.json echoed by a previous run."""
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for key, value in raw.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        out[key] = tuple(value) if isinstance(value, list) else value
    return out


def write_config_file(config: RunConfig, path: str | Path) -> None:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(file_values: dict[str, Any] | None = None, flag_values: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then file values, then explicit flags (later wins)."""
    merged: dict[str, Any] = {}
    for layer in (file_values or {}, flag_values or {}):
        for key, value in layer.items():
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    return RunConfig(**merged).validate()
