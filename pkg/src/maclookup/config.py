"""Flat ``key = value`` text form of nested config dataclasses.

Nested dataclass fields become dotted keys (``model.maae.channels = 8``).
Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _is_dc(obj) -> bool:
    return dataclasses.is_dataclass(obj) and not isinstance(obj, type)


def flatten(cfg, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if _is_dc(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(cfg).items())


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def read_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_lines(text, str(path))


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(text: str, hint, current, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0], current, key)
    try:
        if hint is bool:
            return _BOOL[text.lower()]
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            return tuple(_convert(t.strip(), args[0], None, key) for t in text.split(",") if t.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def apply(cfg, values: dict[str, str]):
    """Return a copy of ``cfg`` with the dotted ``values`` applied (validated by the dataclasses)."""
    known = flatten(cfg)
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    return _rebuild(cfg, values, "")


def _rebuild(cfg, values: dict[str, str], prefix: str):
    hints = typing.get_type_hints(type(cfg))
    changes = {}
    for f in dataclasses.fields(cfg):
        key = prefix + f.name
        current = getattr(cfg, f.name)
        if _is_dc(current):
            changes[f.name] = _rebuild(current, values, key + ".")
        elif key in values:
            changes[f.name] = _convert(values[key], hints[f.name], current, key)
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def loads(cfg_type, text: str):
    return apply(cfg_type(), parse_lines(text))
