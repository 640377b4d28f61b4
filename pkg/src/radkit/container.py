"""Binary tensor container underlying the RADF / RADB file formats.

Layout, all little-endian:

    bytes 0..3    magic (``RADF`` for per-image artifacts, ``RADB`` for banks)
    bytes 4..5    format version, u16
    bytes 6..9    header length, u32
    then          UTF-8 JSON header (metadata + tensor directory)
    then          raw tensor payload, concatenated in directory order

The header JSON is serialized canonically (sorted keys, compact separators)
and tensors are written as raw C-order little-endian arrays, so writing the
same logical content twice produces byte-identical files on any host.
Directory offsets are relative to the start of the payload.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import (
    BadMagicError,
    ContainerError,
    TruncatedTensorError,
    VersionMismatchError,
)

FORMAT_VERSION = 1

MAGIC_PACK = b"RADF"
MAGIC_BANK = b"RADB"

# dtypes are pinned to explicit little-endian codes; float32 is the only
# floating type the pack format emits, banks additionally store index arrays.
_DTYPE_CODES = {
    "float32": "<f4",
    "int32": "<i4",
    "int64": "<i8",
}
_CODE_NAMES = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(sink, magic: bytes, kind: str, meta: dict, tensors) -> int:
    """Write one container; ``tensors`` is an ordered (name, array) iterable.

    Returns the number of bytes written. Output is a pure function of the
    arguments.
    """
    if len(magic) != 4:
        raise ContainerError("magic must be exactly 4 bytes")
    directory = []
    blobs = []
    offset = 0
    for name, array in tensors:
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _CODE_NAMES:
            raise ContainerError(
                f"tensor {name!r} has unsupported dtype {arr.dtype.name}"
            )
        dtype_name = _CODE_NAMES[arr.dtype]
        blob = arr.astype(_DTYPE_CODES[dtype_name], copy=False).tobytes(order="C")
        directory.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = _canonical_json({"kind": kind, "meta": meta, "tensors": directory})
    written = 0
    written += sink.write(magic)
    written += sink.write(struct.pack("<H", FORMAT_VERSION))
    written += sink.write(struct.pack("<I", len(header)))
    written += sink.write(header)
    for blob in blobs:
        written += sink.write(blob)
    return written


def read_container(source, magic: bytes):
    """Read a container written by :func:`write_container`.

    Returns ``(kind, meta, tensors)`` where ``tensors`` maps name to array.
    Raises distinct errors for a wrong magic, an unsupported version, and a
    payload that ends mid-tensor.
    """
    raw_magic = source.read(4)
    if raw_magic != magic:
        raise BadMagicError(
            f"bad magic: expected {magic!r}, found {raw_magic!r}"
        )
    fixed = source.read(6)
    if len(fixed) < 6:
        raise ContainerError("truncated container header")
    (version,) = struct.unpack("<H", fixed[:2])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<I", fixed[2:6])
    header_bytes = source.read(header_len)
    if len(header_bytes) < header_len:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header JSON: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise ContainerError("header JSON missing tensor directory")

    payload = source.read()
    tensors = {}
    for entry in header["tensors"]:
        name = entry["name"]
        dtype_name = entry["dtype"]
        if dtype_name not in _DTYPE_CODES:
            raise ContainerError(f"tensor {name!r} has unknown dtype {dtype_name!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise TruncatedTensorError(f"truncated tensor {name!r}")
        dtype = np.dtype(_DTYPE_CODES[dtype_name])
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        shape = tuple(int(s) for s in entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"tensor {name!r} shape/size mismatch")
        tensors[name] = arr.reshape(shape).copy()
    return header.get("kind", ""), header.get("meta", {}), tensors


def container_to_bytes(magic: bytes, kind: str, meta: dict, tensors) -> bytes:
    buf = io.BytesIO()
    write_container(buf, magic, kind, meta, tensors)
    return buf.getvalue()
