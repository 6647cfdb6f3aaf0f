"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"ITKDCKPT"
    1 byte    version (1)
    uint32    number of records
    per record, sorted by parameter id:
      uint16  id length in bytes, then the UTF-8 id
      uint8   ndim, then ndim x uint32 dimension sizes
      float64 x prod(shape) raw values, little-endian, C order
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .optim import Parameter

MAGIC = b"ITKDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_parameters(params: Iterable[Parameter]) -> bytes:
    params = sorted(params, key=lambda p: p.id)  # canonical record order
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for p in params:
        key = p.id.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_parameters(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 5:
        raise CheckpointError("checkpoint truncated before header end")
    if blob[:8] != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<BI", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            key = blob[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(blob):
                raise CheckpointError(f"checkpoint truncated inside record {key!r}")
            out[key] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_parameters(path: str | Path, params: Iterable[Parameter]) -> None:
    Path(path).write_bytes(encode_parameters(params))


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    return decode_parameters(Path(path).read_bytes())


def assign_parameters(params: Iterable[Parameter], values: dict[str, np.ndarray], prefix_map=None) -> None:
    """Copy checkpoint values into live parameters, matching by id.

    ``prefix_map`` optionally rewrites stored id prefixes, e.g. ``{"teacher/": "student/"}``.
    """
    lookup = dict(values)
    if prefix_map:
        for old, new in prefix_map.items():
            for key in list(values):
                if key.startswith(old):
                    lookup[new + key[len(old):]] = values[key]
    for p in params:
        if p.id not in lookup:
            raise CheckpointError(f"checkpoint has no entry for {p.id!r}")
        arr = lookup[p.id]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{p.id!r}: checkpoint shape {arr.shape} != {p.data.shape}")
        p.data = arr.copy()
