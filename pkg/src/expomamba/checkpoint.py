"""Binary weight checkpoints.

Layout (all integers little-endian)::

    b"XPMB"  u32 version
    u32 len  config JSON (UTF-8, sorted keys)
    u32 count
    count x { u32 name_len, name, u32 rank, rank x u64 extent, float64 payload }
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from . import model
from .imageio import atomic_write

MAGIC = b"XPMB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(cfg: model.ModelConfig, weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    echo = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(echo)), echo, struct.pack("<I", len(weights))]
    for name, value in weights.items():
        value = np.asarray(value)
        if value.dtype != np.float64:
            raise CheckpointError(f"{name}: expected float64, got {value.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", value.ndim)]
        parts += [struct.pack(f"<{value.ndim}Q", *value.shape)]
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes) -> tuple[model.ModelConfig, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupted)")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg = model.ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    weights: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        weights[name] = np.frombuffer(r.take(8 * count), "<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last record")
    return cfg, weights


def save_checkpoint(path, cfg: model.ModelConfig, weights: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode(cfg, weights))


def load_checkpoint(path, cfg: model.ModelConfig | None = None):
    """Return ``(config, weights)``.

    With ``cfg`` the stored registry must match ``cfg``'s registry exactly.
    """
    stored_cfg, weights = decode(Path(path).read_bytes())
    expected = model.param_specs(cfg if cfg is not None else stored_cfg)
    got = [(k, tuple(v.shape)) for k, v in weights.items()]
    if got != [(n, tuple(s)) for n, s in expected]:
        missing = {n for n, _ in expected} ^ {n for n, _ in got}
        detail = f"differing names: {sorted(missing)[:5]}" if missing else "shapes or order differ"
        raise CheckpointError(f"{path}: parameter registry does not match the model config ({detail})")
    return (cfg if cfg is not None else stored_cfg), weights
