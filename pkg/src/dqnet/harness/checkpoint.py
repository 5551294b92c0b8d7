"""Binary checkpoint archive.

Layout (little-endian)::

    b"DQNT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0 f32, 1 f64) | u8 rank | u32 dims... | values
    u32 CRC-32 of every preceding byte

Non-tensor metadata (config echo, step, generator states) travels as the
UTF-8 bytes of a JSON document stored in a rank-1 ``f32`` tensor named
``__meta__``; every byte value is exactly representable.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DQNT"
VERSION = 1
META = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        items[META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, value in items.items():
        arr = np.asarray(value)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: payload runs past end of file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    meta = {}
    if META in tensors:
        meta = json.loads(tensors.pop(META).astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(tensors, meta)


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
