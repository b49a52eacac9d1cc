"""Flat key=value config files with typed round-trips into dataclasses.

One option per line, `key=value`; blank lines and `#` comments allowed.
Values are coerced by the dataclass field types (int, float, bool, str, and
comma-separated tuples).  Unknown keys are rejected so typos fail loudly, and
every run writes back its resolved config through format_flat for
reproducibility.
"""

from __future__ import annotations

import dataclasses
import typing

_TRUE = {"true", "1", "on", "yes"}
_FALSE = {"false", "0", "off", "no"}


class ConfigError(Exception):
    pass


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key=value lines into a string dict; names the line on errors."""
    out: dict[str, str] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {i}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}: line {i}: empty key")
        if key in out:
            raise ConfigError(f"{source}: line {i}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_flat(values: dict) -> str:
    lines = [f"{k}={_to_text(v)}" for k, v in sorted(values.items())]
    return "\n".join(lines) + "\n"


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_to_text(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _coerce(key: str, raw: str, target_type):
    origin = typing.get_origin(target_type)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if raw == "":
            return None
        return _coerce(key, raw, args[0])
    if origin is tuple:
        elem = typing.get_args(target_type)[0]
        parts = [p for p in raw.split(",") if p.strip() != ""]
        return tuple(_coerce(key, p.strip(), elem) for p in parts)
    if target_type is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    if target_type is str:
        return raw
    raise ConfigError(f"{key}: unsupported config field type {target_type}")


def dataclass_to_flat(obj) -> dict[str, str]:
    return {f.name: _to_text(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def flat_to_dataclass(cls, flat: dict[str, str], base=None):
    """Build (or update a copy of) a dataclass from string key-value pairs.

    Unknown keys raise ConfigError; values are coerced by field annotation.
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in flat.items()}
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def load_config(cls, path=None, overrides: dict[str, str] | None = None, base=None):
    """File values first, then overrides, applied to `base` or cls defaults."""
    flat: dict[str, str] = {}
    if path is not None:
        with open(path) as f:
            flat.update(parse_flat(f.read(), source=str(path)))
    if overrides:
        flat.update(overrides)
    return flat_to_dataclass(cls, flat, base=base)
