"""Plain-text key/value config files.

Format: one `key = value` per line, `#` starts a comment. Values are parsed
as bool/int/float/string; comma-separated values become tuples. The schedule
syntax `20:0.1, 30:0.01` becomes a tuple of (int, float) pairs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigurationError


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def _parse_value(text: str):
    t = text.strip()
    if ":" in t and not any(c.isalpha() for c in t):
        pairs = []
        for item in t.split(","):
            if not item.strip():
                continue
            left, right = item.split(":")
            pairs.append((int(left), float(right)))
        return tuple(pairs)
    if "," in t:
        return tuple(_parse_scalar(x) for x in t.split(",") if x.strip())
    return _parse_scalar(t)


def parse_kv_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    return values


def coerce_into(cls, values: dict, ignore_extra: bool = False):
    """Build dataclass `cls` from a parsed key/value mapping, coercing field types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    extra = {}
    for key, value in values.items():
        if key not in fields:
            extra[key] = value
            continue
        target = fields[key].type
        if isinstance(target, str):
            target = target.split("[")[0]
        if value is not None:
            if target in (float, "float") and isinstance(value, int):
                value = float(value)
            elif target in (tuple, "tuple") and not isinstance(value, tuple):
                value = (value,)
        kwargs[key] = value
    if extra and not ignore_extra:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**kwargs), extra


def split_known_keys(values: dict, *classes) -> list[dict]:
    """Partition a flat mapping by which dataclass owns each key (first match wins)."""
    buckets = [dict() for _ in classes]
    leftovers = {}
    field_sets = [{f.name for f in dataclasses.fields(c)} for c in classes]
    for key, value in values.items():
        for bucket, names in zip(buckets, field_sets):
            if key in names:
                bucket[key] = value
                break
        else:
            leftovers[key] = value
    return buckets + [leftovers]
