"""Versioned little-endian binary format shared by representation memories
and parameter checkpoints.

Common header: magic b"CLIFBIN\\x00", format version (u32), payload kind
(u32; 1 = representation memory, 2 = named parameter blocks). All integers
are little-endian u64 unless noted; all floats are little-endian float64.

Memory payload:    dim, weight_len, count, then per entry:
                   name_len, name utf-8 bytes, dim z floats, weight_len
                   snapshot floats.
Parameter payload: count, then per block: name_len, name utf-8 bytes,
                   ndim, ndim dims, prod(dims) floats.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"CLIFBIN\x00"
VERSION = 1
KIND_MEMORY = 1
KIND_PARAMS = 2


class FormatError(ValueError):
    pass


def _write_header(out: BinaryIO, kind: int) -> None:
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, kind))


def _read_header(data: memoryview, expect_kind: int) -> int:
    if bytes(data[:8]) != MAGIC:
        raise FormatError("bad magic; not a clif binary file")
    version, kind = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if kind != expect_kind:
        raise FormatError(f"payload kind {kind} does not match expected {expect_kind}")
    return 16


def _read_u64(data: memoryview, offset: int) -> tuple[int, int]:
    (value,) = struct.unpack_from("<Q", data, offset)
    return value, offset + 8


def _read_floats(data: memoryview, offset: int, count: int) -> tuple[np.ndarray, int]:
    end = offset + 8 * count
    arr = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64)
    return arr, end


def write_memory_bytes(dim: int, weight_len: int, entries) -> bytes:
    """entries: iterable of (name, z, snapshot) with matching lengths."""
    import io

    out = io.BytesIO()
    _write_header(out, KIND_MEMORY)
    entries = list(entries)
    out.write(struct.pack("<QQQ", dim, weight_len, len(entries)))
    for name, z, snapshot in entries:
        if z.shape != (dim,) or snapshot.shape != (weight_len,):
            raise FormatError(f"entry {name!r} has inconsistent vector lengths")
        raw = name.encode("utf-8")
        out.write(struct.pack("<Q", len(raw)))
        out.write(raw)
        out.write(np.ascontiguousarray(z, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(snapshot, dtype="<f8").tobytes())
    return out.getvalue()


def read_memory_bytes(blob: bytes) -> tuple[int, int, list[tuple[str, np.ndarray, np.ndarray]]]:
    data = memoryview(blob)
    offset = _read_header(data, KIND_MEMORY)
    dim, offset = _read_u64(data, offset)
    weight_len, offset = _read_u64(data, offset)
    count, offset = _read_u64(data, offset)
    entries = []
    for _ in range(count):
        name_len, offset = _read_u64(data, offset)
        name = bytes(data[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        z, offset = _read_floats(data, offset, dim)
        snapshot, offset = _read_floats(data, offset, weight_len)
        entries.append((name, z, snapshot))
    if offset != len(blob):
        raise FormatError("trailing bytes after last memory entry")
    return dim, weight_len, entries


def write_params_bytes(blocks: dict[str, np.ndarray]) -> bytes:
    import io

    out = io.BytesIO()
    _write_header(out, KIND_PARAMS)
    out.write(struct.pack("<Q", len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<Q", len(raw)))
        out.write(raw)
        out.write(struct.pack("<Q", arr.ndim))
        for n in arr.shape:
            out.write(struct.pack("<Q", n))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def read_params_bytes(blob: bytes) -> dict[str, np.ndarray]:
    data = memoryview(blob)
    offset = _read_header(data, KIND_PARAMS)
    count, offset = _read_u64(data, offset)
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, offset = _read_u64(data, offset)
        name = bytes(data[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        ndim, offset = _read_u64(data, offset)
        shape = []
        for _ in range(ndim):
            n, offset = _read_u64(data, offset)
            shape.append(n)
        flat, offset = _read_floats(data, offset, int(np.prod(shape)) if shape else 1)
        blocks[name] = flat.reshape(shape)
    if offset != len(blob):
        raise FormatError("trailing bytes after last parameter block")
    return blocks
