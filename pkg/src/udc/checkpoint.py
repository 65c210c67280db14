"""Flat key -> array checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the raw little-endian payload. The header records the format version,
per-key dtype/shape/offset and a sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from udc.errors import ContractError, MissingCheckpointError, ParseError

MAGIC = b"UDCCKPT\x00"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write atomically; returns the payload sha256."""
    entries, chunks, offset = [], [], 0
    for key in sorted(arrays):
        arr = np.asarray(arrays[key])
        kind = "int64" if np.issubdtype(arr.dtype, np.integer) else "float64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"key": key, "dtype": kind, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = json.dumps({"version": VERSION, "sha256": digest, "entries": entries,
                         "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC or len(blob) < 16:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = blob[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ParseError(f"{path}: checksum mismatch, file is corrupt")
    arrays = {}
    for e in header["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["key"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, header.get("meta", {})


def array_checksum(arrays: Mapping[str, np.ndarray], keys=None) -> str:
    """sha256 over the selected arrays' keys, shapes and bytes (order independent)."""
    h = hashlib.sha256()
    for key in sorted(keys if keys is not None else arrays):
        if key not in arrays:
            raise ContractError(f"no array named {key!r}")
        arr = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
