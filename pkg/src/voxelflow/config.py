"""JSON run configuration.

A config file is one JSON object whose sections mirror RunConfig. Every key
is optional and falls back to the dataclass default, but unknown sections or
keys are rejected with the offending dotted path, so typos fail loudly
instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
import json

from .errors import ConfigError
from .evaluation import EvalConfig
from .pipeline import (
    BackboneConfig,
    DataConfig,
    DffmConfig,
    FsmConfig,
    HeadConfig,
    RunConfig,
    TrainConfig,
)
from .voxelizer import AugmentConfig, VoxelConfig

_SECTIONS: dict[str, type] = {
    "voxel": VoxelConfig,
    "augment": AugmentConfig,
    "data": DataConfig,
    "backbone": BackboneConfig,
    "dffm": DffmConfig,
    "fsm": FsmConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls: type, payload, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    kwargs = {
        name: _build_section(cls, data[name], name)
        for name, cls in _SECTIONS.items()
        if name in data
    }
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(config: RunConfig) -> dict:
    """Inverse of config_from_dict, suitable for json.dump."""
    out = {}
    for name in _SECTIONS:
        section = getattr(config, name)
        out[name] = dataclasses.asdict(section)
    return out


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")
