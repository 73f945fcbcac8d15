"""Flat TOML-style `key = value` config files mirroring TrainConfig."""

from __future__ import annotations

import dataclasses

from .scene import InvalidInputError
from .trainer import TrainConfig


class ConfigParseError(InvalidInputError):
    pass


def _parse_value(raw: str, line_no: int):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == '"' and raw[-1] == '"':
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigParseError(f"line {line_no}: cannot parse value {raw!r}")


def parse_config(text: str) -> TrainConfig:
    """Parse `key = value` lines into a TrainConfig. Unknown keys error."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParseError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ConfigParseError(f"line {line_no}: unknown config key {key!r}")
        if key in kwargs:
            raise ConfigParseError(f"line {line_no}: duplicate config key {key!r}")
        value = _parse_value(raw, line_no)
        if fields[key].type in ("float", float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    return TrainConfig(**kwargs)


def serialize_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, str):
            rendered = f'"{value}"'
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(path, config: TrainConfig) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(config))
