"""Flat ``key = value`` config files with dotted section prefixes.

Values are JSON literals (numbers, lists, ``true``/``false``) or bare strings.
Lines starting with ``#`` are comments.  Example::

    experiment.variant = SMCA_QDN
    decoder.d_model = 32
    polg.max_drop_rate = 0.2
    rig.grid = [8, 20]
"""

from __future__ import annotations

import enum
import json
from dataclasses import fields, is_dataclass, replace
from typing import Any


class ConfigError(ValueError):
    pass


def format_value(v: Any) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, str):
        return v
    if isinstance(v, tuple):
        v = [format_value_raw(x) for x in v]
    return json.dumps(v)


def format_value_raw(v):
    if isinstance(v, tuple):
        return [format_value_raw(x) for x in v]
    if isinstance(v, enum.Enum):
        return v.value
    return v


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_flat(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def dump_flat(flat: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flat.items())


def dataclass_to_flat(obj, prefix: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if is_dataclass(v):
            out.update(dataclass_to_flat(v, key))
        else:
            out[key] = format_value_raw(v)
    return out


def _coerce(default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(default, enum.Enum):
        try:
            return type(default)(value)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        if default and len(value) == len(default):
            return tuple(_coerce(d, v, key) for d, v in zip(default, value))
        proto = default[0] if default else None
        return tuple(_coerce(proto, v, key) if proto is not None else v for v in value)
    if isinstance(default, str):
        return str(value)
    return value


def dataclass_from_flat(default, flat: dict[str, Any], prefix: str):
    """Override the fields of ``default`` from ``flat`` entries under ``prefix``."""
    changes = {}
    for f in fields(default):
        v = getattr(default, f.name)
        key = f"{prefix}.{f.name}"
        if is_dataclass(v):
            if any(k.startswith(key + ".") for k in flat):
                changes[f.name] = dataclass_from_flat(v, flat, key)
        elif key in flat:
            changes[f.name] = _coerce(v, flat[key], key)
    try:
        return replace(default, **changes) if changes else default
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix}: {e}") from None
