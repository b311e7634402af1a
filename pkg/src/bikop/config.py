"""Run configuration: defaults <- key-value file <- command-line overrides.

The file format is one ``section.key = value`` per line. A ``[section]``
header prefixes the keys that follow it. ``#`` starts a comment. Example::

    [loss]
    gamma = 0.0
    bkp.mu = 0.1
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .backbone import BackboneConfig
from .bkp import BKPConfig
from .data import DataConfig
from .evaluation import EvalConfig
from .head import LossConfig
from .model import ModelConfig
from .sad import SADConfig
from .text import TextConfig
from .training import TrainConfig

# backbone fields that are filled in from the data section
_DERIVED = {"backbone": {"patch_size", "image_size", "channels", "ln_eps"}}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    text: TextConfig = field(default_factory=TextConfig)
    bkp: BKPConfig = field(default_factory=BKPConfig)
    sad: SADConfig = field(default_factory=SADConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def backbone_config(self) -> BackboneConfig:
        s = self.data.image_size
        return replace(self.backbone, patch_size=self.data.patch_size, image_size=(s, s),
                       channels=self.data.channels)

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        if vocab_size is None:
            vocab_size = len(self.data.shape_vocab) + len(self.data.palette_vocab)
        return ModelConfig(
            backbone=self.backbone_config(), text=self.text, bkp=self.bkp, sad=self.sad,
            loss=self.loss, vocab_size=vocab_size, n_slots=self.train.n_way, seed=self.train.seed,
        )

    @property
    def n_samples(self) -> int:
        return self.sad.resolved_samples(self.backbone.dim)

    def items(self) -> Iterable[tuple[str, object]]:
        for section in fields(self):
            sub = getattr(self, section.name)
            for f in fields(sub):
                if f.name in _DERIVED.get(section.name, ()):
                    continue
                yield f"{section.name}.{f.name}", getattr(sub, f.name)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def with_overrides(self, overrides: dict[str, object] | Iterable[str]) -> "RunConfig":
        pairs = _pairs(overrides)
        cfg = _apply(self, pairs)
        validate(cfg)
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, raw, annotation) -> object:
    if not isinstance(raw, str):
        raw_str = None
    else:
        raw_str = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin in (typing.Union, types.UnionType) and type(None) in args:
            if raw is None or (raw_str is not None and raw_str.lower() in ("none", "null", "")):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse_value(key, raw, inner)
        if annotation is bool:
            if isinstance(raw, bool):
                return raw
            low = raw_str.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(raw_str) if raw_str is not None else int(raw)
        if annotation is float:
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw_str) if raw_str is not None else float(raw)
        if annotation is str:
            if raw_str is None:
                raise ValueError(raw)
            return raw_str
        if origin is tuple:
            if raw_str is None:
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in raw_str.replace(" ", "").split(",") if v)
    except (ValueError, TypeError):
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}") from None
    raise ConfigError(key, f"unsupported field type {annotation}")


def _pairs(source) -> list[tuple[str, object]]:
    if isinstance(source, dict):
        return list(source.items())
    out = []
    for item in source:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        k, v = item.split("=", 1)
        out.append((k.strip(), v))
    return out


def _apply(cfg: RunConfig, pairs: list[tuple[str, object]]) -> RunConfig:
    updates: dict[str, dict[str, object]] = {}
    sections = {f.name for f in fields(cfg)}
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(key, "unknown key")
        sub = getattr(cfg, section)
        hints = typing.get_type_hints(type(sub))
        if name not in hints or name in _DERIVED.get(section, ()):
            raise ConfigError(key, "unknown key")
        updates.setdefault(section, {})[name] = _parse_value(key, raw, hints[name])
    return replace(cfg, **{s: replace(getattr(cfg, s), **u) for s, u in updates.items()})


def read_config_file(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    pairs, prefix = [], ""
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{lineno}", f"expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        pairs.append((k if "." in k else prefix + k, v.strip()))
    return pairs


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; raises ConfigError naming the offending key."""
    checks = [
        ("data", cfg.data.validate),
        ("backbone", cfg.backbone_config().validate),
        ("bkp", cfg.bkp.validate),
        ("sad", cfg.sad.validate),
        ("loss", cfg.loss.validate),
        ("train", cfg.train.validate),
    ]
    for section, check in checks:
        try:
            check()
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None
    if cfg.bkp.fusion != "cross_attention" and cfg.bkp.direction != "bi":
        raise ConfigError("bkp.direction", "unidirectional permeation requires bkp.fusion = cross_attention")
    if cfg.text.token_dim < 1:
        raise ConfigError("text.token_dim", "must be >= 1")
    if cfg.text.prompt_length < 0:
        raise ConfigError("text.prompt_length", "must be >= 0")
    if cfg.eval.n_way > cfg.train.n_way:
        raise ConfigError("eval.n_way", "cannot exceed train.n_way (number of prompt slots)")
    n_split = {"base": cfg.data.n_base, "val": cfg.data.n_val, "novel": cfg.data.n_novel}
    if cfg.eval.split not in n_split:
        raise ConfigError("eval.split", f"must be one of {sorted(n_split)}")
    if cfg.train.n_way > cfg.data.n_base:
        raise ConfigError("train.n_way", "exceeds number of base classes")
    if cfg.eval.n_way > n_split[cfg.eval.split]:
        raise ConfigError("eval.n_way", f"exceeds number of {cfg.eval.split} classes")
    if cfg.train.k_shot + cfg.train.n_query > cfg.data.images_per_class:
        raise ConfigError("train.n_query", "k_shot + n_query exceeds images_per_class")
    if cfg.eval.k_shot + cfg.eval.n_query > cfg.data.images_per_class:
        raise ConfigError("eval.n_query", "k_shot + n_query exceeds images_per_class")
    if cfg.eval.n_episodes < 1:
        raise ConfigError("eval.n_episodes", "must be >= 1")


def parse_config(path: str | Path | None = None, overrides: Iterable[str] | dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = _apply(cfg, read_config_file(path))
    if overrides:
        cfg = _apply(cfg, _pairs(overrides))
    validate(cfg)
    return cfg
