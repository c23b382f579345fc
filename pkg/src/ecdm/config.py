"""Flat ``key = value`` config files with dotted keys into nested dataclasses."""

from __future__ import annotations

import dataclasses
import os
import typing
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _parse_scalar(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = text.strip()
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_scalar(text, inner[0], key)
    if origin in (tuple, list):
        items = [s for s in text.strip("[]()").replace(",", " ").split() if s]
        elem = args[0] if args else str
        return tuple(_parse_scalar(s, elem, key) for s in items)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            f = float(text)
            if not f.is_integer():
                raise ValueError(text)
            return int(f)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    return text


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_overrides(obj, items: dict[str, str], _prefix: str = ""):
    """Return a copy of dataclass ``obj`` with dotted-key string overrides applied."""
    grouped: dict[str, dict[str, str]] = {}
    direct: dict[str, Any] = {}
    types = _field_types(type(obj))
    for key, raw in items.items():
        head, _, rest = key.partition(".")
        if head not in types:
            raise ConfigError(f"unknown config key {_prefix + key!r}")
        if rest:
            if not dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"unknown config key {_prefix + key!r}")
            grouped.setdefault(head, {})[rest] = raw
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"{_prefix + key!r} is a section; set one of its fields instead")
            direct[head] = _parse_scalar(raw, types[head], _prefix + key)
    for head, sub in grouped.items():
        direct[head] = apply_overrides(getattr(obj, head), sub, f"{_prefix}{head}.")
    try:
        return dataclasses.replace(obj, **direct)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_prefix or 'config'}: {exc}") from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def parse_set_args(pairs: Iterable[str]) -> dict[str, str]:
    return parse_lines(pairs, source="--set")


def load_config(path: str | os.PathLike, base, overrides: Iterable[str] = ()):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    items = parse_lines(path.read_text().splitlines(), source=str(path))
    items.update(parse_set_args(overrides))
    return apply_overrides(base, items)


def dump_config(obj) -> str:
    lines = []
    for key, value in flatten(obj).items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
