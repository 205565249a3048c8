"""Flat ``key = value`` run-config files mapped onto nested dataclasses.

Nested dataclass fields use dotted keys (``model.width = 128``).  Unknown keys
are rejected; values are parsed with the type of the dataclass default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from .errors import ParameterError


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            return type(default)(float(x) for x in raw.strip("()[]").split(",") if x.strip())
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_overrides(obj, values: dict[str, Any]):
    """Return a copy of dataclass ``obj`` with dotted-key ``values`` applied."""
    known = flatten(obj)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ParameterError(f"unknown config key(s): {', '.join(unknown)}")
    obj = _deep_copy(obj)
    for key, value in values.items():
        if isinstance(value, str):
            value = _parse_value(value, known[key], key)
        target = obj
        *path, leaf = key.split(".")
        for part in path:
            target = getattr(target, part)
        setattr(target, leaf, value)
    return obj


def _deep_copy(obj):
    kwargs = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        kwargs[f.name] = _deep_copy(v) if dataclasses.is_dataclass(v) else v
    return type(obj)(**kwargs)


def parse_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config(path, base):
    return apply_overrides(base, parse_text(Path(path).read_text()))


def format_config(obj) -> str:
    lines = []
    for key, value in flatten(obj).items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_config(obj, path) -> None:
    Path(path).write_text(format_config(obj))


def config_hash(obj, exclude: tuple[str, ...] = ()) -> str:
    flat = {k: v for k, v in flatten(obj).items() if k not in exclude}
    blob = json.dumps(flat, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
