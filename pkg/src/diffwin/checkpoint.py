"""diffwin-ckpt-v1 files: one JSON header line, then raw little-endian float64 data.

The header lists every tensor with its shape and byte offset relative to the
start of the data block, plus free-form metadata (model config, vocabulary).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = "diffwin-ckpt-v1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-version checkpoint."""


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _LE_F64.itemsize
    header = {"version": VERSION, "meta": dict(meta or {}), "tensors": entries, "data_bytes": offset}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    tmp.replace(path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(line, path)


def _parse_header(line: bytes, path) -> dict:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON") from exc
    if not isinstance(header, dict) or header.get("version") != VERSION:
        found = header.get("version") if isinstance(header, dict) else None
        raise CheckpointError(f"{path}: expected version {VERSION!r}, found {found!r}")
    if not isinstance(header.get("tensors"), list):
        raise CheckpointError(f"{path}: header has no tensor table")
    return header


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)``; raises :class:`CheckpointError` on any inconsistency."""
    with open(path, "rb") as fh:
        header = _parse_header(fh.readline(), path)
        blob = fh.read()
    if len(blob) != header.get("data_bytes"):
        raise CheckpointError(f"{path}: data block is {len(blob)} bytes, header says {header.get('data_bytes')}")
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        try:
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
            count = int(np.prod(shape, dtype=np.int64))
            stop = start + count * _LE_F64.itemsize
            if start < 0 or stop > len(blob):
                raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past the data block")
            arr = np.frombuffer(blob, dtype=_LE_F64, count=count, offset=start).astype(np.float64)
            out[entry["name"]] = arr.reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: malformed tensor entry {entry!r}") from exc
    return out, header["meta"]
