"""File helpers: atomic writes, CSV tables and JSON loading with diagnostics."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError
from .se3 import ObservationSet


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str):
    return atomic_write_bytes(path, text.encode("utf-8"))


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, doc):
    return atomic_write_text(path, json.dumps(doc, indent=2, default=_plain) + "\n")


def write_csv(path, header, rows):
    """Rows of numbers under a header line; floats keep full precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _check_trajectory(doc, where):
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected a JSON object")
    for key in ("dt", "bodies"):
        if key not in doc:
            raise ParseError(f"{where}: missing field '{key}'")
    if not isinstance(doc["dt"], (int, float)) or not doc["dt"] > 0:
        raise ParseError(f"{where}: field 'dt' must be a positive number")
    if not isinstance(doc["bodies"], list) or not doc["bodies"]:
        raise ParseError(f"{where}: field 'bodies' must be a non-empty list")
    for k, b in enumerate(doc["bodies"]):
        for key in ("id", "poses"):
            if key not in b:
                raise ParseError(f"{where}: bodies[{k}] missing field '{key}'")
        poses = b["poses"]
        if not isinstance(poses, list):
            raise ParseError(f"{where}: bodies[{k}].poses must be a list")
        if len(poses) < 2:
            raise ParseError(f"{where}: bodies[{k}].poses has {len(poses)} frame(s); at least 2 required")
        for t, row in enumerate(poses):
            if not isinstance(row, list) or len(row) != 6:
                raise ParseError(f"{where}: bodies[{k}].poses[{t}] must hold 6 numbers")
            if not all(isinstance(v, (int, float)) and np.isfinite(v) for v in row):
                raise ParseError(f"{where}: bodies[{k}].poses[{t}] contains a non-finite value")


def load_trajectory(path) -> ObservationSet:
    doc = read_json(path)
    _check_trajectory(doc, str(path))
    try:
        return ObservationSet.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_trajectory(path, obs: ObservationSet):
    return write_json(path, obs.to_json())
