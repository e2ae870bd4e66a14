"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"EEDVCKPT"
    u32       format version (1)
    u32       length of the config block, then that many bytes of UTF-8 JSON
    u32       tensor count
    per tensor:
      u16     name length, then the UTF-8 name
      u8      ndim, then ndim x u32 extents
      f32[]   values in row-major order
    u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..errors import ChecksumMismatch, FormatError
from ..fileio import atomic_write_bytes

MAGIC = b"EEDVCKPT"
VERSION = 1


def encode_checkpoint(config: dict, tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError("not an eedvit checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("checkpoint checksum mismatch")
    off = 8
    try:
        (version,) = struct.unpack_from("<I", body, off)
        off += 4
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack_from("<I", body, off)
        off += 4
        config = json.loads(body[off : off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(body):
                raise FormatError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes after last tensor")
    return config, tensors


def save_checkpoint(path, config: dict, tensors: dict):
    return atomic_write_bytes(path, encode_checkpoint(config, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
