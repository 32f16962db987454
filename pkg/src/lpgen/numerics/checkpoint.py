"""Checkpoint files: a JSON header followed by a little-endian float32 payload.

Layout::

    uint64 (little-endian)  header length in bytes
    header                  UTF-8 JSON
    payload                 concatenated float32 tensors

The header holds ``format_version``, ``component``, ``tensors`` mapping each
name to ``{"shape", "byte_offset"}`` (offset into the payload) and a free-form
``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, component: str, params: dict[str, Tensor], meta: dict | None = None) -> None:
    tensors = {}
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "byte_offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "component": component,
        "tensors": tensors,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks))


def load_checkpoint(path, component: str | None = None) -> tuple[dict[str, Tensor], dict]:
    """Return ``(params, header)``; params come back as float64 tensors."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    try:
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8 : 8 + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    if component is not None and header.get("component") != component:
        raise CheckpointError(f"{path}: expected component {component!r}, found {header.get('component')!r}")
    payload = raw[8 + hlen :]
    params = {}
    for name, info in header["tensors"].items():
        n = int(np.prod(info["shape"], dtype=np.int64))
        start = info["byte_offset"]
        if start + 4 * n > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=start)
        params[name] = Tensor(arr.astype(np.float64).reshape(info["shape"]))
    return params, header
