"""Experiment configuration and its key-value file format.

One ``key = value`` per line, ``#`` starts a comment. Top-level keys are bare
(``seed = 3``); nested ones are dotted by section (``oim.lambda_oim = 0.1``).
Tuples are comma-separated, booleans are ``true``/``false``, unset paths are
``none``. ``ExperimentConfig().to_text()`` prints the full schema with defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..kd import KdDetConfig, KdMode
from ..oim import OimConfig
from ..psmodel import BackboneSize, ModelConfig
from ..synthscene import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.7
    lr_decay: float = 0.1
    warmup_steps: int = 200
    rpn_batch: int = 16
    rcn_batch: int = 16
    flip: bool = False
    grad_clip: float = 10.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_seed: int = 0
    dataset_path: str | None = None
    backbone: BackboneSize = BackboneSize.LARGE
    kd_mode: KdMode = KdMode.NONE
    teacher_checkpoint: str | None = None
    teacher_lut: str | None = None
    data: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    oim: OimConfig = field(default_factory=OimConfig)
    kd: KdDetConfig = field(default_factory=KdDetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, need_files: bool = True) -> None:
        if self.oim.num_labeled != self.data.num_labeled:
            raise ConfigError(f"oim.num_labeled={self.oim.num_labeled} != data.num_labeled={self.data.num_labeled}")
        if self.oim.embed_dim != self.model.embed_dim:
            raise ConfigError(f"oim.embed_dim={self.oim.embed_dim} != model.embed_dim={self.model.embed_dim}")
        if (self.data.image_size, self.data.channels) != (self.model.image_size, self.model.channels):
            raise ConfigError("data and model disagree on image size / channels")
        if need_files and self.kd_mode.uses_det and not self.teacher_checkpoint:
            raise ConfigError(f"kd_mode={self.kd_mode.value} needs teacher_checkpoint")
        if need_files and self.kd_mode.uses_reid and not self.teacher_lut:
            raise ConfigError(f"kd_mode={self.kd_mode.value} needs teacher_lut")
        if self.train.steps < 1 or self.train.batch_size < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"oim.lambda_oim": 0.3})``."""
        cfg = from_mapping(to_mapping(self))
        for key, value in changes.items():
            _assign(cfg, key, value)
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in to_mapping(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_SECTIONS = {"data": SceneConfig, "model": ModelConfig, "oim": OimConfig, "kd": KdDetConfig,
             "train": TrainConfig}


def to_mapping(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(value):
                out[f"{f.name}.{g.name}"] = getattr(value, g.name)
        else:
            out[f.name] = value
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if text.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
        return _parse(text, tp)
    if origin is tuple:
        parts = [p for p in text.split(",") if p.strip()]
        inner = args[0] if args and (len(args) == 2 and args[1] is Ellipsis) else None
        if inner is None:
            return tuple(_parse(p, a) for p, a in zip(parts, args))
        return tuple(_parse(p, inner) for p in parts)
    if tp is bool:
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if isinstance(tp, type) and issubclass(tp, str):  # str-valued enums
        return tp(text.upper())
    raise ValueError(f"unsupported field type {tp}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _assign(cfg: ExperimentConfig, key: str, value) -> None:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        target, cls = getattr(cfg, section), _SECTIONS[section]
    else:
        target, cls, name = cfg, ExperimentConfig, key
    hints = _hints(cls)
    if name not in hints or name in _SECTIONS and target is cfg:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(value, str):
        try:
            value = _parse(value, hints[name])
        except (ValueError, StopIteration) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    elif hints[name] is float and isinstance(value, int):
        value = float(value)
    object.__setattr__(target, name, value)
    if hasattr(target, "__post_init__"):
        try:
            target.__post_init__()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None


def from_mapping(mapping: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in mapping.items():
        _assign(cfg, key, value if not isinstance(value, (list,)) else tuple(value))
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            _assign(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
