"""Flat key-value configuration files.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines ignored. Values are plain strings here; consumers coerce them. CLI
flags override file values which override package defaults.
"""

from __future__ import annotations

from .errors import ParseError


def load_kv_config(path) -> dict:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {raw.strip()!r}", row=line_no)
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("empty key", row=line_no)
            values[key] = value.strip()
    return values


def coerce_bool(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ParseError(f"cannot interpret {value!r} as a boolean")
