"""Run configuration: typed sections loaded from / saved to INI-style text.

Sections are ``[data]``, ``[backbone]``, ``[exits]``, ``[train]`` and
``[infer]``. Every key maps onto a dataclass field; unknown sections or keys
raise :class:`ConfigError`. Tuples are written comma-separated.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    frame_size: int = 128
    levels: int = 5
    seq_length: int = 40
    train_per_level: int = 40
    val_per_level: int = 6
    test_per_level: int = 10
    target_size_min: float = 12.0
    target_size_max: float = 22.0


@dataclass
class BackboneConfig:
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 8
    template_size: int = 32
    search_size: int = 64
    exit_layers: tuple[int, ...] = (2, 4, 6)


@dataclass
class ExitsConfig:
    adapter_depths: tuple[int, ...] = (2, 1, 0)
    reuse: str = "input_sum"
    head_channels: tuple[int, ...] = (32, 16, 8)


@dataclass
class TrainConfig:
    strategy: str = "joint"
    distill: str = "on"
    epochs_stage1: int = 80
    epochs_stage2: int = 40
    pairs_per_epoch: int = 256
    batch_size: int = 16
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    decay_at: float = 0.8
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_score: float = 5.0
    lambda_imit: float = 10.0
    max_frame_gap: int = 20
    center_jitter: float = 1.0
    scale_jitter: float = 0.2


@dataclass
class InferConfig:
    policy: str = "adaptive"
    tau: tuple[float, ...] = (0.5, 0.5)
    warmup_frames: int = 20
    grid_step: float = 0.05
    refine_step: float = 0.05
    refine_radius: int = 2
    budget: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    exits: ExitsConfig = field(default_factory=ExitsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self) -> "RunConfig":
        b, e = self.backbone, self.exits
        if b.dim % b.heads:
            raise ConfigError(f"backbone.dim {b.dim} not divisible by heads {b.heads}")
        if not b.exit_layers:
            raise ConfigError("backbone.exit_layers must name at least one layer")
        if list(b.exit_layers) != sorted(set(b.exit_layers)):
            raise ConfigError(f"backbone.exit_layers must be strictly increasing, got {b.exit_layers}")
        if b.exit_layers[0] < 1 or b.exit_layers[-1] != b.depth:
            raise ConfigError(f"backbone.exit_layers must lie in [1, {b.depth}] and end at {b.depth}")
        for size in (b.template_size, b.search_size):
            if size % b.patch:
                raise ConfigError(f"input size {size} not divisible by patch {b.patch}")
        if len(e.adapter_depths) != len(b.exit_layers):
            raise ConfigError("exits.adapter_depths needs one entry per exit layer")
        if e.reuse not in REUSE_MODES:
            raise ConfigError(f"exits.reuse must be one of {REUSE_MODES}, got {e.reuse!r}")
        if e.reuse == "concat" and len(b.exit_layers) > 1 and min(e.adapter_depths[1:]) == 0:
            raise ConfigError("exits.reuse=concat needs an adapter at every exit after the first")
        if self.train.distill not in ("on", "off", "plain"):
            raise ConfigError(f"train.distill must be on|off|plain, got {self.train.distill!r}")
        if self.train.strategy not in ("joint", "fixed-backbone", "one-by-one"):
            raise ConfigError(f"unknown train.strategy {self.train.strategy!r}")
        t = self.train
        if t.epochs_stage1 < 1 or t.epochs_stage2 < 0:
            raise ConfigError("train.epochs_stage1 must be >= 1 and train.epochs_stage2 >= 0")
        if t.pairs_per_epoch < 1 or t.batch_size < 1:
            raise ConfigError("train.pairs_per_epoch and train.batch_size must be positive")
        if t.lr_head <= 0 or t.lr_backbone <= 0 or not 0 < t.decay_at <= 1:
            raise ConfigError("learning rates must be positive and train.decay_at in (0, 1]")
        if self.data.levels < 1 or self.data.levels > 5:
            raise ConfigError(f"data.levels must be in 1..5, got {self.data.levels}")
        if self.data.target_size_max * 1.5 > self.data.frame_size:
            raise ConfigError("data.target_size_max too large for data.frame_size")
        if len(self.infer.tau) not in (0, len(b.exit_layers) - 1):
            raise ConfigError(f"infer.tau needs {len(b.exit_layers) - 1} thresholds")
        return self


REUSE_MODES = ("none", "residual", "input_sum", "concat", "gated_sum")


def _parse_value(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            (inner, _) = typing.get_args(tp)
            return tuple(inner(v) for v in raw.split(",") if v.strip()) if raw else ()
        if tp is bool:
            if raw.lower() in ("true", "on", "yes", "1"):
                return True
            if raw.lower() in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}") from exc


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(cfg, name)
        hints = typing.get_type_hints(type(section))
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, _parse_value(raw, hints[key], f"{name}.{key}"))
    return cfg.validate()


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {p}")
    return loads(p.read_text())


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        parser[f.name] = {k: _format_value(v) for k, v in dataclasses.asdict(section).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg))


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy ``cfg`` with per-section overrides, e.g. ``replace(cfg, train={"distill": "off"})``."""
    out = loads(dumps(cfg))
    for name, updates in sections.items():
        section = getattr(out, name)
        for key, value in updates.items():
            if not hasattr(section, key):
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, value)
    return out.validate()
