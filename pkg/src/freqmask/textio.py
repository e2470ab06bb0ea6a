"""Shared helpers for the line-delimited JSON artifacts.

Floats are always written with 17 significant digits so files round-trip
bit-exactly and are byte-stable across runs.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterator

import numpy as np


class LoadError(Exception):
    """An artifact file is missing, unreadable or malformed."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


def fmt_float(v: float) -> str:
    v = float(v)
    if not np.isfinite(v):
        raise ValueError(f"refusing to serialize non-finite value {v!r}")
    return format(v, ".17g")


def dumps(obj: Any) -> str:
    """Compact JSON with floats at 17 significant digits, keys kept in insertion order."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def write_lines(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def read_lines(path) -> Iterator[dict]:
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise LoadError(path, f"cannot open ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(path, f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise LoadError(path, f"line {lineno}: expected an object")
            yield rec


def require(rec: dict, key: str, path, lineno: int | None = None):
    if key not in rec:
        where = f"record {lineno}: " if lineno is not None else ""
        raise LoadError(path, f"{where}missing field '{key}'")
    return rec[key]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:12]
