"""Run configuration: flat ``section.key = value`` text files.

Example::

    # imbalanced toy run
    model.widths = 2, 64, 32, 2
    data.imb_factor = 200
    strategy.kind = am_mixup
    strategy.beta = 0.34
    run.seed = 3

Lines starting with ``#`` are comments. Unknown sections or keys and values
that do not parse are :class:`ConfigError` carrying the offending key path.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import augment as aug
from .network import Cosine, ModelSpec, StepDecay, WarmupStep, validate_schedule


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    encoder: str = "mlp"
    widths: tuple[int, ...] = (2, 64, 32, 2)
    in_shape: tuple[int, ...] = (3, 32, 32)
    channels: tuple[int, ...] = (32, 64, 128)
    feature_dim: int = 2


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step"
    milestones: tuple[int, ...] = (30, 60, 80)
    factor: float = 0.2
    warmup_epochs: int = 5
    warmup_start: float = 0.02
    t_max: int = 100


@dataclass
class DataConfig:
    source: str = "gaussian"
    classes: int = 4
    per_class_n: int = 2500
    dim: int = 2
    spread: float = 0.5
    noise: float = 0.5
    image_size: int = 8
    seed: int = 0
    train_path: str = ""
    test_path: str = ""
    imb_factor: float = 1.0
    coarse_map: tuple[int, ...] = ()
    split_thresholds: tuple[float, ...] = ()


@dataclass
class StrategyConfig:
    kind: str = "none"
    alpha: float = 1.0
    eligible_layers: tuple[int, ...] = ()
    beta: float = 0.34
    rate_mode: str = "scheduled"
    fixed_value: float = 0.51
    one_sided: bool = True
    last_layer_only: bool = True


@dataclass
class RunSection:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    output_dir: str = ""
    metrics_split: str = "test"
    uniformity_k: tuple[int, ...] = (1,)
    dump_features: bool = False
    grid_resolution: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    run: RunSection = field(default_factory=RunSection)

    # -- derived objects -------------------------------------------------

    def model_spec(self, num_classes: int, in_shape: tuple[int, ...] | None = None) -> ModelSpec:
        m = self.model
        widths = m.widths
        if m.encoder == "mlp" and in_shape is not None and widths[0] != in_shape[0]:
            raise ConfigError("model.widths", f"input width {widths[0]} does not match data width {in_shape[0]}")
        return ModelSpec(m.encoder, widths, in_shape if m.encoder == "cnn_vis2d" and in_shape else m.in_shape,
                         m.channels, m.feature_dim, num_classes)

    def schedule(self):
        o = self.optim
        if o.schedule == "step":
            return StepDecay(o.lr, o.milestones, o.factor)
        if o.schedule == "warmup_step":
            return WarmupStep(o.lr, o.warmup_epochs, o.warmup_start, o.milestones, o.factor)
        if o.schedule == "cosine":
            return Cosine(o.lr, o.t_max)
        raise ConfigError("optim.schedule", f"unknown schedule {o.schedule!r}")

    def augment_strategy(self) -> aug.AugmentStrategy:
        s = self.strategy
        try:
            if s.kind == "none":
                return aug.NoAugment()
            if s.kind == "mixup":
                return aug.Mixup(s.alpha)
            if s.kind == "manifold_mixup":
                return aug.ManifoldMixup(s.alpha, s.eligible_layers or None)
            if s.kind == "am_mixup":
                return aug.AMMixup(s.beta, s.rate_mode, s.alpha, s.fixed_value, s.one_sided, s.last_layer_only)
        except ValueError as e:
            raise ConfigError("strategy", str(e)) from e
        raise ConfigError("strategy.kind", f"unknown strategy {s.kind!r}")

    def validate(self) -> "RunConfig":
        if self.model.encoder not in ("mlp", "cnn_vis2d"):
            raise ConfigError("model.encoder", f"unknown encoder {self.model.encoder!r}")
        try:
            validate_schedule(self.schedule())
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError("optim", str(e)) from e
        if not 0 <= self.optim.momentum < 1:
            raise ConfigError("optim.momentum", "must be in [0, 1)")
        if self.optim.weight_decay < 0:
            raise ConfigError("optim.weight_decay", "must be >= 0")
        strategy = self.augment_strategy()
        if self.run.epochs < 0:
            raise ConfigError("run.epochs", "must be >= 0")
        if self.run.batch_size < 1:
            raise ConfigError("run.batch_size", "must be >= 1")
        if not isinstance(strategy, aug.NoAugment) and self.run.batch_size < 2:
            raise ConfigError("run.batch_size", "mixing strategies need batch_size >= 2")
        if self.data.source not in ("gaussian", "patterns", "file"):
            raise ConfigError("data.source", f"unknown source {self.data.source!r}")
        if self.data.source == "file" and not self.data.train_path:
            raise ConfigError("data.train_path", "required when data.source = file")
        if self.data.imb_factor < 1:
            raise ConfigError("data.imb_factor", "must be >= 1")
        if self.data.split_thresholds and len(self.data.split_thresholds) != 2:
            raise ConfigError("data.split_thresholds", "expected two values: many, few")
        if self.run.metrics_split not in ("test", "train"):
            raise ConfigError("run.metrics_split", "must be test or train")
        return self

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{sec.name}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(strategy={"kind": "mixup"}, run={"seed": 2})``."""
        out = self
        for sec, values in sections.items():
            out = replace(out, **{sec: replace(getattr(out, sec), **values)})
        return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_SECTION_TYPES = {f.name: f for f in fields(RunConfig)}


def _field_types(section_cls) -> dict[str, type]:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in fields(section_cls)}


def _parse_scalar(kind, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got {raw!r}") from None


def _parse_value(tp, raw: str, key: str):
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        parts = [p.strip() for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
        return tuple(_parse_scalar(inner, p, key) for p in parts)
    return _parse_scalar(tp, raw, key)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    sections = {name: {} for name in _SECTION_TYPES}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(key, "keys must be dotted: section.name")
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(key, f"unknown section {sec!r}")
        sec_cls = typing.get_type_hints(RunConfig)[sec]
        types = _field_types(sec_cls)
        if name not in types:
            raise ConfigError(key, "unknown key")
        if name in sections[sec]:
            raise ConfigError(key, "duplicate key")
        sections[sec][name] = _parse_value(types[name], raw, key)
    cfg = base or RunConfig()
    for sec, values in sections.items():
        if values:
            cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **values)})
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text())


def config_from_dict(d: dict) -> RunConfig:
    """``{"strategy.kind": "mixup", ...}`` -> validated RunConfig."""
    return parse_config("\n".join(f"{k} = {_format(v) if not isinstance(v, str) else v}" for k, v in d.items()))


__all__ = [
    "ConfigError", "RunConfig", "ModelConfig", "OptimConfig", "DataConfig", "StrategyConfig",
    "RunSection", "parse_config", "load_config", "save_config", "config_from_dict",
]
