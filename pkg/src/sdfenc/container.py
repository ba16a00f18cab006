"""Binary tensor container used for checkpoints and prepared shapes.

Layout (all integers little-endian):

    magic "ZLSE" | u32 version | u32 json_len | config JSON (utf-8)
    | u32 tensor_count
    | per tensor: u32 name_len | name | u8 dtype (0=f32, 1=f64)
    |             u32 rank | u64 dims[rank] | row-major payload
    | u32 state_len | state JSON (utf-8)

The trailing state chunk carries the RNG bookkeeping (seed, iteration).
Files are written atomically (temp file + rename) and must round-trip
byte-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ZLSE"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerError(ValueError):
    """Corrupt or incompatible container file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Container:
    config: dict
    tensors: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)


def write_container(path, container: Container) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    config_bytes = json.dumps(container.config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    blob += struct.pack("<I", len(container.tensors))
    for name, arr in container.tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", _DTYPE_CODES[arr.dtype])
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        blob += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    state_bytes = json.dumps(container.state, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(state_bytes))
    blob += state_bytes

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise ContainerError(f"truncated file while reading {what}", self.offset)
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def read_container(path) -> Container:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ContainerError("bad magic: not a ZLSE container", 0)
    version = r.u32("version")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})", 4)
    config = json.loads(r.take(r.u32("config length"), "config JSON").decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        code = r.u8("tensor dtype")
        if code not in _DTYPES:
            raise ContainerError(f"tensor {name!r}: unknown dtype code {code}", r.offset - 1)
        dtype = _DTYPES[code]
        rank = r.u32("tensor rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "tensor dims")) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(count * dtype.itemsize, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    state = json.loads(r.take(r.u32("state length"), "state JSON").decode("utf-8"))
    if r.offset != len(data):
        raise ContainerError(f"{len(data) - r.offset} trailing bytes", r.offset)
    return Container(config=config, tensors=tensors, state=state)
