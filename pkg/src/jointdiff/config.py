"""Plain-text training configs: one `key = value` per line, versioned.

The first non-blank line must be the header ``jointdiff-config v1``.
Keys mirror TrainConfig fields; missing keys fall back to the dataclass
defaults, unknown keys are rejected (catching typos beats guessing).
`#` starts a comment, blank lines are ignored.  Tuples are
comma-separated, ``none`` encodes None.
"""
from __future__ import annotations

from dataclasses import fields

from .train import TrainConfig

FORMAT_HEADER = "jointdiff-config v1"


class ConfigError(ValueError):
    """Raised on malformed config files."""


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _decode(raw: str, py_type: str, key: str):
    if raw == "none":
        return None
    try:
        if py_type == "int":
            return int(raw)
        if py_type == "float":
            return float(raw)
        if py_type == "str":
            return raw
        if py_type.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if py_type.startswith("str | None"):
            return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None
    raise ConfigError(f"unsupported field type {py_type!r} for {key!r}")


def write_config(path: str, config: TrainConfig):
    lines = [FORMAT_HEADER]
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_encode(getattr(config, f.name))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path: str) -> TrainConfig:
    with open(path) as fh:
        raw_lines = fh.read().splitlines()
    lines = [ln.strip() for ln in raw_lines]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ConfigError(f"missing header {FORMAT_HEADER!r}")
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise ConfigError(f"expected 'key = value', got {ln!r}")
        key, raw = (part.strip() for part in ln.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r}")
        values[key] = _decode(raw, types[key], key)
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None
