"""Binary checkpoint format for parameter sets.

Layout (little-endian)::

    b"FSLPCKPT" | u32 version | u8 precision (0 = float32, 1 = trained in float64)
    | u32 echo length | echo bytes (utf-8) | u32 tensor count
    | per tensor: u32 name length | name | u32 rank | u32 extents... | float32 values

Values are always stored as float32.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError, ShapeMismatchError
from .numerics import ParameterSet

MAGIC = b"FSLPCKPT"
VERSION = 1


def checkpoint_save(params: ParameterSet, echo: str, path) -> None:
    precision = 0 if all(v.dtype == np.float32 for v in params.entries.values()) else 1
    parts = [MAGIC, struct.pack("<IB", VERSION, precision)]
    eb = echo.encode("utf-8")
    parts += [struct.pack("<I", len(eb)), eb, struct.pack("<I", len(params))]
    for name in sorted(params.entries):
        arr = np.ascontiguousarray(params.entries[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointIntegrityError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, expected: ParameterSet | None = None):
    """Return ``(ParameterSet, echo, precision_flag)``.

    With ``expected``, every tensor it names must be present with the same
    shape.  Nothing is returned unless the whole file parses.
    """
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    r = _Reader(blob, path)
    r.take(len(MAGIC))
    version, precision = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    (elen,) = r.unpack("<I")
    echo = r.take(elen).decode("utf-8")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        entries[name] = arr
    if r.pos != len(blob):
        raise CheckpointIntegrityError(f"{path}: {len(blob) - r.pos} trailing bytes after last tensor")
    params = ParameterSet()
    for name, arr in entries.items():
        params.add(name, arr)
    if expected is not None:
        check_shapes(params, expected)
    return params, echo, precision


def check_shapes(params: ParameterSet, expected: ParameterSet, partitions=None) -> None:
    """Raise unless every tensor of ``expected`` (optionally limited to ``partitions``) matches."""
    for name, ref in expected.entries.items():
        if partitions is not None and expected.partition_of(name) not in partitions:
            continue
        if name not in params:
            raise CheckpointFormatError(f"checkpoint lacks tensor {name!r}")
        if params[name].shape != ref.shape:
            raise ShapeMismatchError(name, ref.shape, params[name].shape)
