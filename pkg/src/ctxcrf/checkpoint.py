"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"CTXCRF\\x00\\x01"
    version    u32
    hdr_len    u32, followed by hdr_len bytes of UTF-8 JSON (module configs)
    n_blocks   u32
    per block: u16 name length, name (UTF-8), u8 ndim, ndim x u32 extents,
               prod(extents) float64 values in row-major order
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CTXCRF\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(blocks: dict, header: dict) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hdr)), hdr, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(blocks, header)``."""
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", view, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(bytes(view[pos:pos + hlen]).decode())
        pos += hlen
        (n_blocks,) = struct.unpack_from("<I", view, pos)
        pos += 4
        blocks = {}
        for _ in range(n_blocks):
            (klen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + klen]).decode()
            pos += klen
            (ndim,) = struct.unpack_from("<B", view, pos)
            shape = struct.unpack_from(f"<{ndim}I", view, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(view):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(view, dtype="<f8", count=count, offset=pos).astype(np.float64)
            blocks[name] = arr.reshape(shape)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after last block")
    return blocks, header


def save(path, blocks: dict, header: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(blocks, header))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
