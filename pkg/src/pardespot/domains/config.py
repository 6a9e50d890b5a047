"""Plain-text ``key = value`` domain configuration files.

Blank lines and ``#`` comments are ignored. Values are read as int, float,
bool (``true``/``false``) or left as strings. The reserved key ``domain``
names the registered domain; every other key is passed to its factory.

Example::

    # 13x13 navigation with a quieter sensor
    domain = navigation
    size = 13
    obs_error = 0.01
"""
from __future__ import annotations

from pathlib import Path


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key.isidentifier():
            raise ValueError(f"line {lineno}: bad key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def dump_config(params: dict) -> str:
    lines = []
    for k, v in params.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
