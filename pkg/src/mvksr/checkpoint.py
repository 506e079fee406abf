"""Binary checkpoint archive of named float32 tensors.

Layout (little endian)::

    b"MVKS" | u32 version=1 | u32 count
    count x { u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | float32 data }
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .imageio import atomic_write_bytes
from .optim import param_set
from .tensor import Tensor

MAGIC = b"MVKS"
VERSION = 1


class CheckpointError(Exception):
    code = 4


class BadMagicError(CheckpointError):
    code = 10


class BadVersionError(CheckpointError):
    code = 11


class CrcError(CheckpointError):
    code = 12


class FormatError(CheckpointError):
    code = 13


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes, requires_grad: bool = True) -> dict[str, Tensor]:
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    if len(blob) < 16:
        raise CrcError(f"checkpoint truncated ({len(blob)} bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcError("checkpoint CRC mismatch (corrupt or truncated file)")
    (count,) = struct.unpack_from("<I", body, 8)
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
            out[name] = Tensor(data, requires_grad=requires_grad)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed checkpoint body: {e}") from e
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes after last tensor")
    return param_set(out)


def save_checkpoint(tensors: dict, path) -> int:
    blob = encode_checkpoint(tensors)
    atomic_write_bytes(path, blob)
    return len(blob)


def load_checkpoint(path, requires_grad: bool = True) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes(), requires_grad)
