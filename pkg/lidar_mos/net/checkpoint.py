"""
Binary parameter checkpoints

Layout (all integers little-endian):

    magic      8 bytes  b"LMOSCKPT"
    version    uint32   CHECKPOINT_VERSION
    meta_len   uint32
    meta       meta_len bytes of UTF-8 JSON {"model": ModelConfig, "grid": grid spec}
    count      uint32   number of tensors
    per tensor:
      name_len uint16, name UTF-8
      ndim     uint8, dims uint32 * ndim
      data     float64 little-endian, row-major

Values are stored as doubles, so float32 and float64 models both round-trip
bit-exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from ..cylvoxel import CylindricalGridSpec
from ..errors import MalformedFile
from ..kitti_io import read_bytes, write_bytes
from .model import MosModel
from .params import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"LMOSCKPT"
CHECKPOINT_VERSION = 1
_VALUE_DTYPE = np.dtype("<f8")


def _grid_to_dict(spec: CylindricalGridSpec) -> dict:
    return {"bins": list(spec.bins), "rho_range": list(spec.rho_range), "z_range": list(spec.z_range)}


def encode_checkpoint(model: MosModel) -> bytes:
    meta = json.dumps({"model": model.config.to_dict(), "grid": _grid_to_dict(model.spec)},
                      sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    named = list(model.params.items())
    chunks.append(struct.pack("<I", len(named)))
    for name, param in named:
        encoded = name.encode("utf-8")
        shape = param.value.shape
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        chunks.append(param.value.astype(_VALUE_DTYPE).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFile(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> MosModel:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise MalformedFile(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise MalformedFile(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        config = ModelConfig.from_dict(meta["model"])
        grid = meta["grid"]
        spec = CylindricalGridSpec(bins=tuple(grid["bins"]), rho_range=tuple(grid["rho_range"]),
                                   z_range=tuple(grid["z_range"]))
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedFile(f"{source}: bad checkpoint header: {e}") from e

    (count,) = reader.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        values[name] = np.frombuffer(reader.take(size * _VALUE_DTYPE.itemsize), dtype=_VALUE_DTYPE).reshape(shape)
    if reader.pos != len(data):
        raise MalformedFile(f"{source}: {len(data) - reader.pos} trailing bytes after tensors")

    model = MosModel(config, spec)
    try:
        model.params.load_state(values)
    except ValueError as e:
        raise MalformedFile(f"{source}: {e}") from e
    return model


def save_checkpoint(path: Path, model: MosModel) -> None:
    write_bytes(Path(path), encode_checkpoint(model))
    logger.info("checkpoint written: %s (%d tensors)", path, len(model.params))


def load_checkpoint(path: Path) -> MosModel:
    return decode_checkpoint(read_bytes(Path(path)), source=str(path))
