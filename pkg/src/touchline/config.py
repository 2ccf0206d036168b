"""Flat ``key = value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _convert(raw: str, current, hint):
    raw = raw.strip().strip("\"'")
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.strip("()[]").replace(",", " ").split()]
        kinds = [type(c) for c in current] or [float]
        if len(parts) != len(current):
            raise ValueError(f"expected {len(current)} values")
        return tuple(k(p) for k, p in zip(kinds, parts))
    return raw


def parse_kv(text: str, cls, base=None):
    """Build ``cls`` from ``key = value`` lines over the defaults (or ``base``).

    ``#`` starts a comment. Unknown keys and bad values raise ConfigError
    naming the line number and key.
    """
    base = base if base is not None else cls()
    values = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in values:
            raise ConfigError(f"line {no}: unknown config key {key!r}")
        try:
            values[key] = _convert(val, values[key], hints.get(key))
        except ValueError as e:
            raise ConfigError(f"line {no}: bad value for {key!r}: {val!r}") from e
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_kv(path, cls, base=None):
    return parse_kv(Path(path).read_text(encoding="utf-8"), cls, base)


def dump_kv(obj) -> str:
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        out.append(f"{f.name} = {v}\n")
    return "".join(out)
