"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic    8 bytes  b"FOGCKPT\\0"
    version  u32
    hlen     u64      length of the JSON header
    header   hlen bytes of UTF-8 JSON (metadata + array table)
    buffers  raw array bytes at the offsets listed in the header
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FOGCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, arrays: dict):
    """Write ``arrays`` (name -> ndarray) and JSON-serialisable ``meta`` atomically."""
    table, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, arrays)``; refuses foreign files and other versions."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        raw = body[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated buffer {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"]))
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays
