"""Binary tensor container.

Layout: 8-byte magic ``FIDW0001``, 8-byte little-endian unsigned header
length, UTF-8 JSON header ``{name: {"shape": [...], "offset": int}}``, then a
packed little-endian float32 payload. Offsets are relative to the payload
start. An optional ``__metadata__`` header entry carries free-form JSON
(the model config, for weight files).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"FIDW0001"
METADATA_KEY = "__metadata__"


class ContainerError(ValueError):
    """Malformed or truncated container file."""


def write_container(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> None:
    header: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        data = arr.tobytes()
        chunks.append(data)
        offset += len(data)
    if metadata is not None:
        header[METADATA_KEY] = dict(metadata)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for chunk in chunks:
            f.write(chunk)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(tensors, metadata)``; raises ContainerError naming the bad tensor."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a FIDW0001 container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: header is not valid JSON ({exc})") from exc
    payload = memoryview(blob)[16 + hlen :]
    metadata = header.pop(METADATA_KEY, {}) or {}
    tensors = {}
    for name, entry in header.items():
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(payload):
            raise ContainerError(f"{path}: tensor {name!r} is truncated")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return tensors, metadata
