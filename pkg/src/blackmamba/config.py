"""Run configuration files.

A run config is YAML with four optional sections and a top-level seed::

    seed: 0
    model:
      preset: tiny-mamba-moe     # any ModelConfig field may follow and overrides the preset
      n_experts: 8
    train:
      task: copy
      steps: 2000
    bench:
      lengths: [128, 512, 2048]
    paths:
      checkpoint_dir: ckpt
      metrics_dir: metrics

Parsing is strict: unknown keys, wrong types and constraint violations are
errors that name the key and its line.
"""

from __future__ import annotations

import difflib
import os
import re
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .model import ModelConfig, PRESETS, preset
from .train import TrainConfig

PATH_ENV = {"checkpoint_dir": "BLACKMAMBA_CHECKPOINT_DIR", "metrics_dir": "BLACKMAMBA_METRICS_DIR"}


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [128, 512, 2048])
    repeats: int = 5
    warmup: int = 3
    variants: list = field(default_factory=lambda: ["mamba-moe", "transformer"])
    route_batches: int = 4
    route_batch_size: int = 8
    route_seq_len: int = 64

    def __post_init__(self):
        if self.repeats < 5:
            raise ValueError(f"repeats must be >= 5, got {self.repeats}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        if not self.lengths or any(int(n) < 1 for n in self.lengths):
            raise ValueError(f"lengths must be positive integers, got {self.lengths}")
        if list(self.lengths) != sorted(set(self.lengths)):
            raise ValueError(f"lengths must be strictly increasing, got {self.lengths}")


@dataclass
class PathsConfig:
    checkpoint_dir: str = "checkpoints"
    metrics_dir: str = "metrics"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig | None = None
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    preset: str | None = None
    source: str | None = None


_SECTIONS = {"model", "train", "bench", "paths", "seed"}


def _where(node, source) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def _suggest(key: str, options) -> str:
    options = list(options)
    parts = set(key.lower().split("_")) - {"n", "num"}
    shared = [o for o in options if parts & (set(o.split("_")) - {"n"})]
    close = shared[:1] if len(shared) == 1 else difflib.get_close_matches(key, shared or options, n=1, cutoff=0.5)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _scalar(node, expected, key: str, source: str):
    if not isinstance(node, yaml.ScalarNode):
        if expected is list and isinstance(node, yaml.SequenceNode):
            return [_scalar(n, None, key, source) for n in node.value]
        raise ConfigError(f"{_where(node, source)}: {key} must be a scalar")
    value = yaml.safe_load(node.value) if node.style is None else node.value
    if expected is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is float and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if expected is list or not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigError(f"{_where(node, source)}: {key} expects {expected.__name__}, got {value!r}")
    return value


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in fields(cls):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        if typing.get_origin(t) is list or t is list:
            out[f.name] = list
        elif args:
            out[f.name] = args[0]
        else:
            out[f.name] = t
    return out


def _section(node, cls, name: str, source: str, extra: tuple = ()) -> tuple[dict, dict]:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(node, source)}: section {name!r} must be a mapping")
    types = _field_types(cls)
    values, lines = {}, {}
    for knode, vnode in node.value:
        key = knode.value
        if key in extra:
            values[key] = _scalar(vnode, str, f"{name}.{key}", source)
            lines[key] = knode.start_mark.line + 1
            continue
        if key not in types:
            raise ConfigError(f"{_where(knode, source)}: unknown key {name}.{key}"
                              f"{_suggest(key, list(types) + list(extra))}")
        if key in values:
            raise ConfigError(f"{_where(knode, source)}: duplicate key {name}.{key}")
        values[key] = _scalar(vnode, types[key], f"{name}.{key}", source)
        lines[key] = knode.start_mark.line + 1
    return values, lines


def _build(cls, values: dict, lines: dict, name: str, source: str, node):
    try:
        return cls(**values)
    except ValueError as exc:
        msg = str(exc)
        mentioned = [(m.start(), k) for k in lines for m in [re.search(rf"\b{k}\b", msg)] if m]
        line = lines[min(mentioned)[1]] if mentioned else None
        where = f"{source}:{line}" if line else _where(node, source)
        raise ConfigError(f"{where}: invalid {name} section: {msg}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from None
    if root is None:
        return RunConfig(source=source)
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{_where(root, source)}: top level must be a mapping")
    run = RunConfig(source=source)
    seen = set()
    for knode, vnode in root.value:
        key = knode.value
        if key not in _SECTIONS:
            raise ConfigError(f"{_where(knode, source)}: unknown key {key}{_suggest(key, _SECTIONS)}")
        if key in seen:
            raise ConfigError(f"{_where(knode, source)}: duplicate key {key}")
        seen.add(key)
        if key == "seed":
            run.seed = _scalar(vnode, int, "seed", source)
        elif key == "model":
            values, lines = _section(vnode, ModelConfig, "model", source, extra=("preset",))
            name = values.pop("preset", None)
            base = ModelConfig()
            if name is not None:
                if name not in PRESETS:
                    raise ConfigError(f"{source}:{lines['preset']}: unknown preset {name!r}"
                                      f"{_suggest(name, PRESETS)}")
                base = preset(name)
                run.preset = name
            merged = {**base.to_dict(), **values}
            run.model = _build(ModelConfig, merged, lines, "model", source, vnode)
        elif key == "train":
            values, lines = _section(vnode, TrainConfig, "train", source)
            run.train = _build(TrainConfig, values, lines, "train", source, vnode)
        elif key == "bench":
            values, lines = _section(vnode, BenchConfig, "bench", source)
            run.bench = _build(BenchConfig, values, lines, "bench", source, vnode)
        elif key == "paths":
            values, lines = _section(vnode, PathsConfig, "paths", source)
            run.paths = PathsConfig(**values)
    if run.train is not None and "seed" in seen:
        run.train.seed = run.seed
    for name, env in PATH_ENV.items():
        if os.environ.get(env):
            setattr(run.paths, name, os.environ[env])
    return run


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


__all__ = ["ConfigError", "RunConfig", "BenchConfig", "PathsConfig", "parse_config", "parse_config_text"]
