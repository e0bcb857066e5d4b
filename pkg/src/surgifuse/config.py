"""Strict config loading: YAML/dict to nested dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

import yaml


class ConfigurationError(ValueError):
    """A config value or structure is invalid."""


def build_config(cls, data: dict, *, context: str = ""):
    """Construct dataclass ``cls`` from a mapping, recursing into dataclass fields.

    Unknown keys raise instead of being ignored: a typo in a config file
    should fail loudly, not silently train with a default.
    """
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{context or cls.__name__}: expected a mapping, got {type(data).__name__}")

    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(
            f"{context or cls.__name__}: unknown keys {unknown}; valid keys are {sorted(fields)}"
        )

    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{context + '.' if context else ''}{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{context or cls.__name__}: {exc}") from exc


def _coerce(hint, value, context: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return build_config(hint, value, context=context)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, context) if len(args) == 1 else value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{context}: expected a sequence, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{context}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"{context}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{context}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if hint in (int, float, str, bool) and not isinstance(value, hint):
        raise ConfigurationError(f"{context}: expected {hint.__name__}, got {type(value).__name__} {value!r}")
    return value


def load_yaml(path: Path | str) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data
