"""Flat ``key = value`` config files.

Values are JSON literals (numbers, booleans, strings, lists); anything that
does not parse as JSON is kept as a bare string. ``#`` starts a comment.
"""

from __future__ import annotations

import json
import math
from pathlib import Path


def parse_value(text: str):
    text = text.strip()
    if text in ("inf", "+inf", "Infinity"):
        return math.inf
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text


def format_value(value) -> str:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if hasattr(value, "value") and isinstance(value.value, str):  # enums
        value = value.value
    return json.dumps(value)


def loads(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key.isidentifier():
            raise ValueError(f"config line {lineno}: bad key {key!r}")
        out[key] = parse_value(value)
    return out


def dumps(d: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in d.items())


def load_config(path) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"))


def save_config(path, d: dict) -> None:
    Path(path).write_text(dumps(d), encoding="utf-8")
