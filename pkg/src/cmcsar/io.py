"""CMCT tensor container: a flat, named list of float32 arrays.

Layout (all integers little-endian)::

    b"CMCT"  u32 version(=1)  u32 count
    count × { u16 name_len, name (UTF-8), u32 rank, u32 × rank dims, f32 payload }

Used for checkpoints and for the on-disk scene dataset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"CMCT"
VERSION = 1


def encode_container(entries):
    """Serialise a mapping ``name -> array`` to bytes (insertion order kept)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4", order="C")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_container(buf):
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContainerError("not a CMCT container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported CMCT version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise ContainerError(f"truncated payload for entry {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def save_container(path, entries):
    Path(path).write_bytes(encode_container(entries))


def load_container(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from None
    return decode_container(buf)
