"""Binary parameter files.

Layout, all little-endian: ``b"ATRL"``, version byte, tensor count (u32),
then per tensor: name length (u16), UTF-8 name, rank (u8), dims (u32 each),
values as float32.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ATRL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict, path) -> int:
    """Write ``name → array`` to ``path``; returns the number of bytes written."""
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(params))
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(out)
    return len(out)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = r.unpack("<BI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * size)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return params


def checkpoint_io(params, path, direction: str = "save"):
    if direction == "save":
        return save_checkpoint(params, path)
    if direction == "load":
        return load_checkpoint(path)
    raise ValueError(f"direction must be save or load, got {direction!r}")
