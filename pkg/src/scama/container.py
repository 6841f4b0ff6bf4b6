"""Binary container of named float32 arrays, shared by checkpoints and dataset blobs.

Layout (all integers little-endian uint32)::

    b"SCAMA1"
    repeated:  name_len | name (utf-8) | rank | extent * rank | float32 data
    crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SCAMA1"


class ContainerError(ValueError):
    """Raised for malformed or corrupted containers."""


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise ContainerError("not a SCAMA1 container")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body) & 0xFFFFFFFF:
        raise ContainerError("checksum mismatch")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = data.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ContainerError(f"truncated or malformed record at byte {pos}") from exc
    if pos != len(body):
        raise ContainerError("trailing bytes after last record")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_text(text: str) -> np.ndarray:
    """Store a short string as float32 code points (exact below 2**24)."""
    return np.array([ord(ch) for ch in text], dtype=np.float32)


def decode_text(arr: np.ndarray) -> str:
    return "".join(chr(int(v)) for v in np.asarray(arr).reshape(-1))
