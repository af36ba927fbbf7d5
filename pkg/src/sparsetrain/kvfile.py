"""Flat `key: value` text files for configs and run manifests.

One entry per line, `#` comments and blank lines ignored. Values are kept as
strings; callers coerce them (the CLI reuses its flag parsers for that, so a
config file and a command line accept identical spellings).
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

__all__ = ["loads", "dumps", "read_kv", "write_kv"]


def loads(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def dumps(mapping: dict) -> str:
    """Entries in insertion order; bools lowercase, floats via repr."""
    lines = []
    for key, value in mapping.items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_kv(path, mapping: dict) -> None:
    Path(path).write_text(dumps(mapping), encoding="utf-8")
