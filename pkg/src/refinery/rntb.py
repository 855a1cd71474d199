"""RNTB tensor blobs and the named-entry checkpoint container.

Blob layout (little endian)::

    b"RNTB" | u32 version=1 | u8 dtype | u32 ndim | u32 dims[ndim] | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8.

Container layout::

    u32 count | count * (u32 name_len | name utf-8 | u64 offset) | blobs

``offset`` is measured from the first byte after the index.
"""

import struct
from typing import Dict

import numpy as np

from .errors import FormatError

MAGIC = b"RNTB"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def encode(array) -> bytes:
    a = np.asarray(array)
    dt = a.dtype.newbyteorder("<") if a.dtype.kind == "f" else a.dtype
    if dt not in _CODES:
        raise FormatError(f"dtype {a.dtype} not representable in RNTB")
    a = a.astype(dt, order="C", copy=False)  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<IBI", VERSION, _CODES[dt], a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode(buf: bytes, offset: int = 0):
    """Return ``(array, end_offset)`` for the blob starting at ``offset``."""
    mv = memoryview(buf)
    if bytes(mv[offset:offset + 4]) != MAGIC:
        raise FormatError(f"bad RNTB magic at offset {offset}")
    try:
        version, code, ndim = struct.unpack_from("<IBI", buf, offset + 4)
    except struct.error as exc:
        raise FormatError("truncated RNTB header") from exc
    if version != VERSION:
        raise FormatError(f"unsupported RNTB version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown RNTB dtype code {code}")
    pos = offset + 4 + 9
    try:
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    except struct.error as exc:
        raise FormatError("truncated RNTB dims") from exc
    pos += 4 * ndim
    dt = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("truncated RNTB payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
    return arr, pos + nbytes


def save_blob(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after RNTB blob")
    return arr


def pack(entries: Dict[str, np.ndarray]) -> bytes:
    names = list(entries)
    blobs = [encode(entries[k]) for k in names]
    index = struct.pack("<I", len(names))
    off = 0
    for name, blob in zip(names, blobs):
        raw = name.encode("utf-8")
        index += struct.pack("<I", len(raw)) + raw + struct.pack("<Q", off)
        off += len(blob)
    return index + b"".join(blobs)


def unpack(buf: bytes) -> Dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from("<I", buf, 0)
        pos = 4
        index = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = bytes(buf[pos:pos + ln]).decode("utf-8")
            pos += ln
            (off,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            index.append((name, off))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError("malformed checkpoint index") from exc
    out = {}
    for name, off in index:
        out[name], _ = decode(buf, pos + off)
    return out


def save_container(path, entries: Dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(pack(entries))


def load_container(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack(fh.read())
