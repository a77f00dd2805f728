"""Standalone STSCW writer.

Byte layout (little-endian):
  magic "STSCW001"
  entry count u32
  per entry: name length u16, UTF-8 name, dtype tag u8 (0=f32, 1=f64),
             ndim u8, dims u32 each, raw values
  trailing CRC32 u32 over all preceding bytes

Kept independent of the consumer so the two sides verify each other.
"""

import os
import struct
import zlib

import numpy as np

MAGIC = b"STSCW001"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def serialize(entries) -> bytes:
    """entries: ordered list of (name, ndarray) with float32/float64 data."""
    body = bytearray(MAGIC)
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAGS:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        enc = name.encode("utf-8")
        body += struct.pack("<H", len(enc)) + enc
        body += struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
        if arr.ndim:
            body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<" + arr.dtype.str[1:]).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return bytes(body) + struct.pack("<I", crc)


def write(entries, path) -> int:
    """Atomic write (temp + rename). Returns the CRC32 of the body."""
    blob = serialize(entries)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return struct.unpack("<I", blob[-4:])[0]
