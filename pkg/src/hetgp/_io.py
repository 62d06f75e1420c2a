"""Atomic file writes and JSON helpers shared by serialization code."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import FormatError

FORMAT_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file + rename, never partial."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def dump_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON ({e})") from None


def check_version(doc: dict, what: str, path=None) -> None:
    """Reject documents whose format_version we cannot read."""
    where = f"{path}: " if path else ""
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatError(f"{where}{what} document has no format_version field")
    v = doc["format_version"]
    if v != FORMAT_VERSION:
        raise FormatError(
            f"{where}{what} format_version {v!r} is not supported (expected {FORMAT_VERSION})"
        )


def fmt_float(v: float) -> str:
    """Shortest exact decimal form, byte-stable across runs."""
    return repr(float(v))
