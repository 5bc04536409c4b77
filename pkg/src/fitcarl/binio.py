"""Versioned binary containers: magic, JSON header, then raw little-endian arrays.

Layout::

    MAGIC | u64 header_len | header JSON (utf-8) | array bytes ...

The header lists each array's name, dtype, shape and byte offset so files are
readable without numpy's pickle machinery and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np


class FormatError(ValueError):
    pass


def dumps(magic: bytes, header: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": dict(header), "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def loads(magic: bytes, payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not payload.startswith(magic):
        raise FormatError(f"bad magic: expected {magic!r}, got {payload[:len(magic)]!r}")
    pos = len(magic)
    (n,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    head = json.loads(payload[pos:pos + n].decode())
    pos += n
    arrays = {}
    for e in head["arrays"]:
        start = pos + e["offset"]
        buf = payload[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return head["meta"], arrays


def save(path, magic: bytes, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, header, arrays))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(magic, Path(path).read_bytes())
