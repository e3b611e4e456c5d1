"""Named-array container used for every checkpoint written by the package.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"MMST"
    4       4     uint32 format version (currently 1)
    8       8     uint64 header length H in bytes
    16      H     UTF-8 JSON header
    16+H    ...   raw array payload, C order, little-endian

The JSON header has two keys. ``"arrays"`` is a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` records whose offsets are
relative to the start of the payload, in write order. ``"meta"`` is a free
JSON object (config snapshots, layout descriptors, version tags).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MMST"
VERSION = 1


class ContainerError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write ``arrays`` atomically (temp file + rename) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        records.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": records, "meta": dict(meta or {})}, sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".bin")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        buf = data[start:start + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise ContainerError(f"{path}: truncated array {rec['name']!r}")
        arr = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]
