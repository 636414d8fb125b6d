"""Binary checkpoint container.

Layout (all integers unsigned little-endian, floats little-endian float64)::

    b"DKPOSE1"                     magic + format version
    mean[3], scale[3]              normalization statistics
    u32 tensor count
    per tensor:
        u16 name length, utf-8 name ("forward/sfem.w1", "backward/...", "meta/loss_curve")
        u8 ndim, u32 dims[ndim]
        float64 data, row-major
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import nets
from .errors import CheckpointVersionError, DataFormatError, InvalidInputError
from .filter import FilterModel
from .nets import NormStats

MAGIC = b"DKPOSE1"


def to_bytes(model: FilterModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(np.asarray(model.stats.mean, "<f8").tobytes())
    buf.write(np.asarray(model.stats.scale, "<f8").tobytes())
    tensors = [(f"forward/{k}", v) for k, v in model.forward.items()]
    tensors += [(f"backward/{k}", v) for k, v in model.backward.items()]
    tensors.append(("meta/loss_curve", np.asarray(model.loss_curve, float)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> FilterModel:
    if data[:len(MAGIC)] != MAGIC:
        found = data[:len(MAGIC)]
        raise CheckpointVersionError(f"bad checkpoint magic: expected {MAGIC!r}, found {found!r}")
    view = memoryview(data)
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    mean = np.frombuffer(take(24), "<f8").copy()
    scale = np.frombuffer(take(24), "<f8").copy()
    (count,) = struct.unpack("<I", take(4))
    branches = {"forward": {}, "backward": {}}
    curve = np.zeros(0)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), "<f8").reshape(shape).astype(float)
        group, _, key = name.partition("/")
        if group in branches:
            branches[group][key] = arr
        elif name == "meta/loss_curve":
            curve = arr
        else:
            raise DataFormatError(f"unknown checkpoint tensor {name!r}")
    if pos != len(data):
        raise DataFormatError(f"{len(data) - pos} trailing bytes in checkpoint")
    try:
        stats = NormStats(mean, scale)
        cfg = nets.config_from_params(branches["forward"])
        nets.check_params(branches["backward"], cfg)
    except InvalidInputError as exc:
        raise DataFormatError(f"checkpoint content mismatch: {exc}") from exc
    return FilterModel(branches["forward"], branches["backward"], stats, curve)


def save_checkpoint(model: FilterModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> FilterModel:
    return from_bytes(Path(path).read_bytes())
