"""Experiment configuration: typed blocks, strict parsing, lossless round-trip.

Config files are TOML with dotted keys (``contrast.tau_gg = 0.2``) or the
equivalent nested JSON document. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for schema violations; names the offending key."""


@dataclass
class AugmentConfig:
    global_side: int = 224
    patch_side: int = 64
    jigsaw_intermediate_side: int = 255
    global_crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_area_min: float = 0.6
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    randaug_ops: int = 2
    randaug_magnitude: int = 9

    @property
    def cell_side(self) -> int:
        return self.jigsaw_intermediate_side // 3

    def validate(self) -> None:
        _check(self.global_side >= 1, "augment.global_side", "positive int", self.global_side)
        _check(self.patch_side >= 1, "augment.patch_side", "positive int", self.patch_side)
        _check(
            self.patch_side <= self.cell_side,
            "augment.patch_side",
            f"<= jigsaw cell side {self.cell_side}",
            self.patch_side,
        )
        lo, hi = self.global_crop_scale
        _check(0 < lo <= hi <= 1, "augment.global_crop_scale", "0 < lo <= hi <= 1", self.global_crop_scale)
        _check(0 < self.crop_area_min <= 1, "augment.crop_area_min", "value in (0, 1]", self.crop_area_min)
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, name)
            _check(0 <= v <= 1, f"augment.{name}", "probability in [0, 1]", v)
        _check(0 <= self.hue <= 0.5, "augment.hue", "value in [0, 0.5]", self.hue)
        _check(self.randaug_ops >= 0, "augment.randaug_ops", "int >= 0", self.randaug_ops)
        _check(0 <= self.randaug_magnitude <= 30, "augment.randaug_magnitude", "int in [0, 30]", self.randaug_magnitude)


@dataclass
class ModelConfig:
    arch: str = "toy-cnn"
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_strides: tuple[int, int, int, int] = (4, 8, 16, 32)
    embed_dim: int = 128
    # None: hidden width equals the stage's channel count
    head_hidden_dim: int | None = None
    norm_groups: int = 8

    def validate(self) -> None:
        _check(self.arch in ("toy-cnn", "resnet50-like"), "model.arch", "'toy-cnn' or 'resnet50-like'", self.arch)
        _check(len(self.stage_channels) == 4, "model.stage_channels", "4 positive ints", self.stage_channels)
        _check(all(c > 0 for c in self.stage_channels), "model.stage_channels", "4 positive ints", self.stage_channels)
        _check(
            tuple(self.stage_strides) == (4, 8, 16, 32),
            "model.stage_strides",
            "(4, 8, 16, 32)",
            self.stage_strides,
        )
        _check(self.embed_dim >= 2, "model.embed_dim", "int >= 2", self.embed_dim)
        _check(
            self.head_hidden_dim is None or self.head_hidden_dim > 0,
            "model.head_hidden_dim",
            "positive int or null",
            self.head_hidden_dim,
        )
        _check(self.norm_groups >= 1, "model.norm_groups", "positive int", self.norm_groups)


@dataclass
class MemoryConfig:
    queue_size: int = 4096

    def validate(self) -> None:
        _check(self.queue_size >= 1, "memory.queue_size", "positive int", self.queue_size)


@dataclass
class ContrastConfig:
    tau_gg: float = 0.2
    tau_ll: float = 0.15
    tau_gl: float = 0.5
    weights: tuple[float, float, float, float] = (0.1, 0.4, 0.7, 1.0)

    def validate(self) -> None:
        for name in ("tau_gg", "tau_ll", "tau_gl"):
            v = getattr(self, name)
            _check(v > 0, f"contrast.{name}", "float > 0", v)
        _check(len(self.weights) == 4, "contrast.weights", "4 non-negative floats", self.weights)
        _check(all(w >= 0 for w in self.weights), "contrast.weights", "4 non-negative floats", self.weights)


@dataclass
class TrainerConfig:
    batch_size: int = 32
    total_steps: int = 300
    # None: 0.03 * batch_size / 256
    learning_rate: float | None = None
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    momentum: float = 0.999
    seed: int = 0
    mls_enabled: bool = True
    glc_enabled: bool = True
    checkpoint_every: int = 100

    @property
    def lr(self) -> float:
        if self.learning_rate is None:
            return 0.03 * self.batch_size / 256
        return self.learning_rate

    def validate(self) -> None:
        _check(self.batch_size >= 2, "trainer.batch_size", "int >= 2", self.batch_size)
        _check(self.total_steps >= 0, "trainer.total_steps", "int >= 0", self.total_steps)
        _check(
            self.learning_rate is None or self.learning_rate >= 0,
            "trainer.learning_rate",
            "float >= 0 or null",
            self.learning_rate,
        )
        _check(self.lr_schedule in ("cosine", "constant"), "trainer.lr_schedule", "'cosine' or 'constant'", self.lr_schedule)
        _check(self.weight_decay >= 0, "trainer.weight_decay", "float >= 0", self.weight_decay)
        _check(0 <= self.momentum <= 1, "trainer.momentum", "float in [0, 1]", self.momentum)
        _check(self.checkpoint_every >= 1, "trainer.checkpoint_every", "positive int", self.checkpoint_every)


@dataclass
class DataConfig:
    num_classes: int = 8
    samples_per_class: int = 100
    image_side: int = 96
    seed: int = 1

    def validate(self) -> None:
        _check(self.num_classes >= 2, "data.num_classes", "int >= 2", self.num_classes)
        _check(self.samples_per_class >= 1, "data.samples_per_class", "positive int", self.samples_per_class)
        _check(self.image_side >= 64, "data.image_side", "int >= 64", self.image_side)


@dataclass
class EvalConfig:
    probe_type: str = "linear-softmax"
    train_fraction: float = 0.7
    epochs: int = 300
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    stages: tuple[int, ...] = (2, 3, 4, 5)
    seed: int = 0

    def validate(self) -> None:
        _check(
            self.probe_type in ("linear-softmax", "linear-svm"),
            "eval.probe_type",
            "'linear-softmax' or 'linear-svm'",
            self.probe_type,
        )
        _check(0 < self.train_fraction < 1, "eval.train_fraction", "float in (0, 1)", self.train_fraction)
        _check(self.epochs >= 1, "eval.epochs", "positive int", self.epochs)
        _check(self.learning_rate > 0, "eval.learning_rate", "float > 0", self.learning_rate)
        _check(
            len(self.stages) > 0 and all(s in (2, 3, 4, 5) for s in self.stages),
            "eval.stages",
            "non-empty subset of {2, 3, 4, 5}",
            self.stages,
        )


@dataclass
class ExperimentConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> ExperimentConfig:
        _check(self.schema_version == SCHEMA_VERSION, "schema_version", str(SCHEMA_VERSION), self.schema_version)
        for block in BLOCKS:
            getattr(self, block).validate()
        side = self.augment.global_side
        _check(side % 32 == 0, "augment.global_side", "multiple of 32 (encoder stride)", side)
        _check(
            self.augment.patch_side % 32 == 0,
            "augment.patch_side",
            "multiple of 32 (encoder stride)",
            self.augment.patch_side,
        )
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


BLOCKS = ("augment", "model", "memory", "contrast", "trainer", "data", "eval")
_BLOCK_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def desk_config(**overrides: Any) -> ExperimentConfig:
    """Small-image defaults that train on a laptop CPU in minutes.

    ``overrides`` are dotted keys, e.g. ``desk_config(**{"trainer.seed": 3})``.
    """
    cfg = ExperimentConfig()
    cfg.augment = AugmentConfig(
        global_side=64,
        patch_side=32,
        jigsaw_intermediate_side=126,
        blur_sigma=(0.1, 0.6),
    )
    # a short queue stays consistent with the fast-moving key encoder over 300 steps
    cfg.memory = MemoryConfig(queue_size=64)
    cfg.trainer = TrainerConfig(momentum=0.99, learning_rate=0.03)
    for key, value in overrides.items():
        _assign(cfg, key, value)
    return cfg.validate()


def _check(ok: bool, key: str, expected: str, received: Any) -> None:
    if not ok:
        raise ConfigError(f"{key}: expected {expected}, received {received!r}")


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _known_keys() -> list[str]:
    return list(_flatten(ExperimentConfig().to_dict()).keys())


def _coerce(key: str, value: Any, default: Any, annotation: str) -> Any:
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: expected {annotation}, received None")
    if isinstance(default, bool) or annotation == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected bool, received {value!r}")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, received {value!r}")
        if "int" in annotation and "float" not in annotation:
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{key}: expected list of int, received {value!r}")
            return tuple(int(v) for v in value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected list of numbers, received {value!r}")
        return tuple(float(v) for v in value)
    if annotation.startswith("int"):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected int, received {value!r}")
    if annotation.startswith("float"):
        if isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value):
            return float(value)
        raise ConfigError(f"{key}: expected float, received {value!r}")
    if annotation.startswith("str"):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected str, received {value!r}")
    return value


def _assign(cfg: ExperimentConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    if key == "schema_version":
        cfg.schema_version = _coerce(key, value, 1, "int")
        return
    if len(parts) != 2 or parts[0] not in BLOCKS:
        _unknown(key)
    block = getattr(cfg, parts[0])
    annotations = {f.name: str(f.type) for f in fields(block)}
    if parts[1] not in annotations:
        _unknown(key)
    default = getattr(type(block)(), parts[1])
    setattr(block, parts[1], _coerce(key, value, default, annotations[parts[1]]))


def _unknown(key: str) -> None:
    close = difflib.get_close_matches(key, _known_keys(), n=1)
    hint = f"; did you mean '{close[0]}'?" if close else ""
    raise ConfigError(f"unknown key '{key}'{hint}")


def from_dict(d: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    cfg = dataclasses.replace(cfg, **{b: dataclasses.replace(getattr(cfg, b)) for b in BLOCKS})
    for key, value in _flatten(d).items():
        _assign(cfg, key, value)
    return cfg.validate()


def parse_config(path: str | os.PathLike, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read a TOML (dotted keys) or JSON config file; missing keys take defaults."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text) if text.strip() else {}
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, base)


def _toml_value(v: Any) -> str:
    if v is None:
        raise ValueError("None has no TOML encoding")
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r}")


def dumps(cfg: ExperimentConfig) -> str:
    """Flat dotted-key TOML; null values are written as comments (TOML has no null)."""
    lines = []
    for key, value in _flatten(cfg.to_dict()).items():
        if value is None:
            lines.append(f"# {key} = null")
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    else:
        path.write_text(dumps(cfg))
    return path
