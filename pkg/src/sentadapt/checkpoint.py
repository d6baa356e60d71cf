"""Checkpoint container shared by base models and adapters.

Layout: one line of compact JSON (terminated by ``\\n``) followed by the raw
tensor payload. The header holds the container ``kind``, a free-form
``config``/``meta`` and a manifest of ``{path, shape, offset, nbytes}``
entries; offsets are relative to the first payload byte and every tensor is
stored as little-endian float64 in C order.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "sentadapt-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, kind: str, config: Mapping, tensors: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> Path:
    path = Path(path)
    manifest = []
    payload = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        manifest.append({"path": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        payload.append(buf)
        offset += len(buf)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": dict(config),
        "meta": dict(meta or {}),
        "tensors": manifest,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(line.encode("ascii") + b"\n")
        for buf in payload:
            fh.write(buf)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(path, line)


def _parse_header(path, line: bytes) -> dict:
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: not a checkpoint (unreadable header)") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    split = raw.find(b"\n")
    if split < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = _parse_header(path, raw[:split])
    payload = memoryview(raw)[split + 1:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize or start + nbytes > len(payload):
            raise CheckpointError(f"{path}: corrupt manifest entry for {entry['path']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPE).reshape(shape)
        tensors[entry["path"]] = arr.astype(np.float64, copy=True)
    return Checkpoint(kind=header["kind"], config=header["config"], tensors=tensors, meta=header["meta"])
