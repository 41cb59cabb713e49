"""Binary model checkpoints.

Layout (all little-endian)::

    b"MTCA"                     magic
    u32  version                (1)
    u32  n_channels, bottleneck, layer1, layer2, local_hidden,
         global_hidden, n_classes
    f64  elu alpha
    u32  channel dims           (n_channels of them)
    u64  parameter count
    f64  parameters             (blocks in Architecture.layout() order)
    u32  crc32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import Architecture, MtcAeModel

MAGIC = b"MTCA"
VERSION = 1
_FIXED = struct.Struct("<4sI7Id")


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or inconsistent checkpoint files."""


def to_bytes(model: MtcAeModel) -> bytes:
    a = model.arch
    head = _FIXED.pack(MAGIC, VERSION, a.n_channels, a.bottleneck, a.layer1, a.layer2,
                       a.local_hidden, a.global_hidden, a.n_classes, a.alpha)
    dims = struct.pack(f"<{a.n_channels}I", *a.channel_dims)
    count = struct.pack("<Q", model.params.size)
    body = head + dims + count + model.params.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def _parse_header(data: bytes):
    if len(data) < _FIXED.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, n, b, l1, l2, lh, gh, k, alpha = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = _FIXED.size
    if len(data) < offset + 4 * n + 8:
        raise CheckpointError("truncated header")
    dims = struct.unpack_from(f"<{n}I", data, offset)
    offset += 4 * n
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    try:
        arch = Architecture(dims, l1, l2, b, lh, gh, k, alpha)
    except ValueError as exc:
        raise CheckpointError(f"inconsistent header: {exc}") from None
    if count != arch.n_params:
        raise CheckpointError(
            f"header declares {count} parameters, architecture needs {arch.n_params}")
    return arch, offset


def from_bytes(data: bytes) -> MtcAeModel:
    arch, offset = _parse_header(data)
    count = arch.n_params
    end = offset + 8 * count
    if len(data) != end + 4:
        raise CheckpointError(f"expected {end + 4} bytes, file has {len(data)}")
    (crc,) = struct.unpack_from("<I", data, end)
    if crc != zlib.crc32(data[:end]):
        raise CheckpointError("checksum mismatch")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return MtcAeModel(arch, params)


def save_checkpoint(model: MtcAeModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> MtcAeModel:
    return from_bytes(Path(path).read_bytes())


def read_header(path) -> dict:
    """Architecture fields declared in a checkpoint header."""
    with open(path, "rb") as fh:
        head = fh.read(_FIXED.size)
        if len(head) == _FIXED.size:
            n = _FIXED.unpack(head)[2]
            head += fh.read(4 * n + 8)
    arch, _ = _parse_header(head)
    return {"version": VERSION, "n_channels": arch.n_channels,
            "bottleneck": arch.bottleneck, "layer1": arch.layer1, "layer2": arch.layer2,
            "local_hidden": arch.local_hidden, "global_hidden": arch.global_hidden,
            "n_classes": arch.n_classes, "alpha": arch.alpha,
            "channel_dims": list(arch.channel_dims)}
