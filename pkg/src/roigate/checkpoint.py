"""Flat binary parameter checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"RGCK"
    version u32      format version, currently 1
    confhash 32 bytes sha256 of the canonical config text
    count   u32      number of parameter records

followed by ``count`` records:

    name    u16 length + utf-8 bytes
    ndim    u8
    dims    u32 * ndim
    values  f64 little-endian, row-major

Values are stored as 64-bit floats regardless of the in-memory dtype;
float32 parameters round-trip bit-exactly through the widening.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"RGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config_text: str) -> bytes:
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def save_checkpoint(path, named_params: Iterable[tuple], config_text: str = "") -> None:
    records = list(named_params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_hash(config_text))
        fh.write(struct.pack("<I", len(records)))
        for name, value in records:
            arr = np.ascontiguousarray(
                value.data if hasattr(value, "data") else value,
                dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (ordered name->array dict, config hash)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint "
                              f"(magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:40]
    (count,) = struct.unpack_from("<I", blob, 40)
    off = 44
    params: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        params[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return params, digest


def restore_into(named_params: Iterable[tuple], stored: Mapping[str, np.ndarray]) -> None:
    """Copy stored values into live parameter tensors, checking shapes."""
    seen = set()
    for name, tensor in named_params:
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        value = stored[name]
        if tuple(value.shape) != tuple(tensor.data.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {value.shape} does not "
                f"match model shape {tensor.data.shape}")
        tensor.data[...] = value.astype(tensor.data.dtype)
        seen.add(name)
    extra = set(stored) - seen
    if extra:
        raise CheckpointError(
            f"checkpoint has {len(extra)} unused parameters, e.g. "
            f"{sorted(extra)[0]!r}")
