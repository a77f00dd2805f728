"""Bit-exact file formats: P6 PPM images, the STSCW tensor container,
and paired-dataset directory scanning.

STSCW layout (little-endian throughout):
  magic "STSCW001" (8 bytes)
  entry count u32
  per entry: name length u16, UTF-8 name, dtype tag u8 (0=f32, 1=f64),
             ndim u8, dims u32 each, raw values
  trailing CRC32 (u32) of all preceding bytes

Checkpoints reuse the container with reserved name prefixes "adam.m.",
"adam.v." and "meta." (scalars stored as 1-element tensors).
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .layers import ParamStore
from .tensor import Tensor

MAGIC = b"STSCW001"
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


class CrcError(FormatError):
    pass


# -- PPM ----------------------------------------------------------------------


def read_image(path) -> Tensor:
    """Binary P6 PPM, maxval 255, to a [1,3,H,W] float32 tensor in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return data[start:pos]

    magic = token()
    if magic != b"P6":
        raise FormatError(f"{path}: not a P6 PPM (magic {magic!r} at byte 0)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise FormatError(f"{path}: malformed header near byte {pos}: {e}") from e
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (255 only)")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise FormatError(
            f"{path}: truncated payload at byte {pos + len(payload)} "
            f"(expected {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    chw = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    return Tensor(chw[None])


def write_image(t: Tensor, path):
    """Writes [1,3,H,W] or [3,H,W] as P6; values clamped to [0,1] and
    rounded half away from zero to 8 bit."""
    a = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise FormatError(f"write_image: expected 3xHxW, got {a.shape}")
    a = np.clip(a, 0.0, 1.0) * 255.0
    q = np.floor(a + 0.5).astype(np.uint8)  # half away from zero (values >= 0)
    h, w = q.shape[1], q.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


# -- STSCW --------------------------------------------------------------------


def write_weights(store: ParamStore, path):
    body = bytearray()
    body += MAGIC
    names = store.names()
    body += struct.pack("<I", len(names))
    for name in names:
        t = store[name]
        enc = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        tag = _DTYPE_TAGS[arr.dtype]
        body += struct.pack("<H", len(enc)) + enc
        body += struct.pack("<BB", tag, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        body += arr.astype("<" + arr.dtype.str[1:]).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_weights(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise FormatError(f"{path}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if body[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {body[:8]!r}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcError(f"{path}: CRC mismatch")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        tag, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", body, pos) if ndim else ()
        pos += 4 * ndim
        dtype = np.dtype(_DTYPES[tag])
        n_elem = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        nbytes = n_elem * dtype.itemsize
        raw = body[pos : pos + nbytes]
        if len(raw) < nbytes:
            raise FormatError(f"{path}: truncated payload for {name!r}")
        pos += nbytes
        arr = np.frombuffer(raw, dtype="<" + dtype.str[1:]).astype(dtype).reshape(dims)
        if name in store:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        store.add(name, Tensor(arr))
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} trailing bytes")
    return store


# -- dataset layout -------------------------------------------------------------


@dataclass
class DatasetLayout:
    root: str
    pairs: list = field(default_factory=list)  # (name, input_path, gt_path)
    warnings: list = field(default_factory=list)


def scan_dataset(root, min_size: int | None = None) -> DatasetLayout:
    """Expects root/input and root/gt with identical filenames."""
    in_dir, gt_dir = os.path.join(root, "input"), os.path.join(root, "gt")
    for d in (in_dir, gt_dir):
        if not os.path.isdir(d):
            raise FormatError(f"dataset layout error: missing directory {d}")
    in_names = {f for f in os.listdir(in_dir) if f.lower().endswith(".ppm")}
    gt_names = {f for f in os.listdir(gt_dir) if f.lower().endswith(".ppm")}
    layout = DatasetLayout(root=root)
    for name in sorted(in_names - gt_names):
        layout.warnings.append(f"input without gt partner: {name}")
    for name in sorted(gt_names - in_names):
        layout.warnings.append(f"gt without input partner: {name}")
    for name in sorted(in_names & gt_names):
        ip, gp = os.path.join(in_dir, name), os.path.join(gt_dir, name)
        if min_size is not None:
            t = read_image(ip)
            if t.shape[2] < min_size or t.shape[3] < min_size:
                layout.warnings.append(
                    f"image smaller than crop {min_size}: {name} "
                    f"({t.shape[2]}x{t.shape[3]})")
                continue
        layout.pairs.append((name, ip, gp))
    return layout
