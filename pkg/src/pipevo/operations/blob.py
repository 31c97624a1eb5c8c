"""Binary wire form of fitted operations.

Layout::

    b"FOP1" | u8 registry version | u32 header length | header JSON
    then per parameter (sorted by name):
    u16 name length | name | u16 dtype length | dtype | u8 ndim | u64 * ndim shape | u64 nbytes | raw

The header holds the operation name, hyperparameters, backend, input width
and class count. Everything is little-endian and deterministic, so
``dumps(loads(b)) == b``.
"""

from __future__ import annotations

import json
import struct
from typing import Any, Mapping

import numpy as np

from pipevo.errors import BlobFormatError

MAGIC = b"FOP1"
FORMAT_VERSION = 1


def dumps(header: Mapping[str, Any], params: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(head)), head]
    for name in sorted(params):
        arr = np.asarray(params[name])  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        dtype = arr.dtype.str.encode()
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<H", len(dtype)) + dtype)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes(order="C")
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


def loads(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise BlobFormatError("bad magic")
    try:
        version, hlen = struct.unpack_from("<BI", view, 4)
        if version != FORMAT_VERSION:
            raise BlobFormatError(f"blob version {version}, expected {FORMAT_VERSION}")
        pos = 9
        header = json.loads(bytes(view[pos:pos + hlen]))
        pos += hlen
        params: dict[str, np.ndarray] = {}
        while pos < len(view):
            (klen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + klen]).decode()
            pos += klen
            (dlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            dtype = np.dtype(bytes(view[pos:pos + dlen]).decode())
            pos += dlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", view, pos)
            pos += 8
            if pos + nbytes > len(view):
                raise BlobFormatError("truncated parameter payload")
            params[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise BlobFormatError(str(exc)) from exc
    return header, params
