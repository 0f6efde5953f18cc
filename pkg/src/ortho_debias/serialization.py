"""Flat binary container for named float64 arrays.

Layout (little-endian)::

    magic   4 bytes  b"ODCK"
    version u32      1
    desc    u32 length + UTF-8 JSON (sorted keys)
    count   u32
    entry*  u16 name length + UTF-8 name | u8 ndim | ndim x u32 dims | prod(dims) x f64

Used for model checkpoints and probe dumps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ODCK"
VERSION = 1


class ContainerError(ValueError):
    pass


def encode_container(descriptor: dict, entries) -> bytes:
    desc = json.dumps(descriptor, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc]
    entries = list(entries)
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_container(path, descriptor: dict, entries) -> None:
    Path(path).write_bytes(encode_container(descriptor, entries))


def decode_container(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise ContainerError(f"truncated container: {what} needs {n} bytes at offset {off}")
        out = buf[off : off + n]
        off += n
        return out

    if take(4, "magic") != MAGIC:
        raise ContainerError("bad magic at offset 0")
    version, dlen = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    desc = json.loads(take(dlen, "descriptor").decode())
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * n, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        entries.append((name, arr))
    if off != len(buf):
        raise ContainerError(f"trailing bytes after offset {off}")
    return desc, entries


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    return decode_container(Path(path).read_bytes())
