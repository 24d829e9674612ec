"""Deterministic binary container for named arrays plus a JSON header.

Layout: 8-byte magic, uint32 format version, uint64 header length, UTF-8
JSON header, then the raw array payloads in header order (C-contiguous,
little-endian). Byte output depends only on the content, so identical
saves hash identically; torch.save does not give that guarantee.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .errors import FileFormatError

_PREFIX = struct.Struct("<8sIQ")


def write_arrays(path, magic: bytes, version: int, meta: dict[str, Any],
                 arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_arrays(path, magic: bytes, max_version: int):
    """Return (version, meta, arrays). Raises FileFormatError on any damage."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise FileFormatError(f"{path}: truncated before header")
        file_magic, version, header_len = _PREFIX.unpack(prefix)
        if file_magic != magic:
            raise FileFormatError(f"{path}: bad magic {file_magic!r}, expected {magic!r}")
        if version < 1 or version > max_version:
            raise FileFormatError(f"{path}: unsupported format version {version}")
        header = fh.read(header_len)
        if len(header) < header_len:
            raise FileFormatError(f"{path}: truncated header")
        try:
            parsed = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"{path}: corrupt header ({exc})") from exc
        arrays = {}
        for entry in parsed["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            if shape == ():
                nbytes = dtype.itemsize
            blob = fh.read(nbytes)
            if len(blob) < nbytes:
                raise FileFormatError(f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after payload")
    return version, parsed["meta"], arrays
