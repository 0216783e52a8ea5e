"""Flat ``key = value`` text dialect shared by run configs and dataset manifests.

One pair per line, ``#`` starts a comment, blank lines are ignored, and a
key may appear only once.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .errors import ParseError


def parse_kv(text: str, path=None) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    return out


def render_kv(pairs: Mapping[str, object], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines.extend(f"{k} = {v}" for k, v in pairs.items())
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), path)
