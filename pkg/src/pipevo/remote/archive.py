"""Result archives: a deflated zip behind a 16-byte integrity header.

Header layout (big endian): ``b"RRA1"``, u64 zip length, u32 CRC-32 of the
zip bytes. The zip holds ``metrics.json`` and, for full results,
``pipeline.json`` with base64 node blobs.
"""

from __future__ import annotations

import base64
import io
import json
import struct
import zipfile
import zlib
from typing import Any

from pipevo.errors import ChecksumMismatch, DecodeError

MAGIC = b"RRA1"
HEADER = struct.Struct(">4sQI")
# fixed timestamp so equal payloads give equal bytes
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, doc: Any) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, json.dumps(doc, sort_keys=True).encode())


def encode_archive(metrics: dict[str, Any], pipeline: dict[str, Any] | None = None) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        _member(zf, "metrics.json", metrics)
        if pipeline is not None:
            _member(zf, "pipeline.json", pipeline)
    body = buf.getvalue()
    return HEADER.pack(MAGIC, len(body), zlib.crc32(body)) + body


def decode_archive(data: bytes) -> tuple[dict[str, Any], dict[str, Any] | None]:
    """Verify and unpack an archive into ``(metrics, pipeline or None)``."""
    if len(data) < HEADER.size:
        raise DecodeError("archive shorter than its header")
    magic, length, crc = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(f"bad archive magic {magic!r}")
    body = data[HEADER.size:]
    if len(body) != length:
        raise ChecksumMismatch(f"archive length {len(body)} != header length {length}")
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("archive CRC mismatch")
    try:
        with zipfile.ZipFile(io.BytesIO(body)) as zf:
            names = set(zf.namelist())
            metrics = json.loads(zf.read("metrics.json"))
            pipeline = json.loads(zf.read("pipeline.json")) if "pipeline.json" in names else None
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DecodeError(f"cannot decode archive: {exc}") from exc
    return metrics, pipeline


def pack_blobs(graph_doc: dict[str, Any], blobs: dict[str, bytes]) -> dict[str, Any]:
    return {"graph": graph_doc, "blobs": {nid: base64.b64encode(b).decode("ascii") for nid, b in sorted(blobs.items())}}


def unpack_blobs(pipeline: dict[str, Any]) -> dict[str, bytes]:
    try:
        return {nid: base64.b64decode(text) for nid, text in pipeline["blobs"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise DecodeError(f"bad pipeline.json: {exc}") from exc
