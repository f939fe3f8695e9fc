"""Flat key = value config files used for manifests and run settings.

One assignment per line, # comments, blank lines ignored. Values stay
strings; callers coerce. Keys are written in insertion order so files
diff cleanly.
"""

from __future__ import annotations

import os
from typing import Mapping

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(pairs: Mapping[str, object]) -> str:
    lines = []
    for key, value in pairs.items():
        if "=" in key or "\n" in key or not key.strip():
            raise ConfigError(f"unwritable key {key!r}")
        text = str(value)
        if "\n" in text:
            raise ConfigError(f"value for {key!r} contains a newline")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n" if lines else ""


def load_kv(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def save_kv(path: str, pairs: Mapping[str, object]) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(format_kv(pairs))
    os.replace(tmp, path)
