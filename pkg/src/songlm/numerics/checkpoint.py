"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    MAGIC (4 bytes) | u32 version | u32 count
    count x ( u32 name_len | name (UTF-8) | u32 rank | rank x u64 dim | float32 payload )
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .params import ParamStore
from .tensor import Tensor

MAGIC = b"LEVO"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def encode_tensors(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a checkpoint file")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save_tensors(tensors, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(params: ParamStore, path) -> None:
    save_tensors(params.arrays(), path)


def load_checkpoint(path) -> ParamStore:
    return ParamStore(OrderedDict((n, Tensor(a)) for n, a in load_tensors(path).items()))
