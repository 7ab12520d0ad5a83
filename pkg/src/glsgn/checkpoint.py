"""Versioned binary checkpoint container.

Layout (little-endian): magic "GLSG", u32 format version, u64 master seed,
u64 step count, u64 config-JSON length + payload, u32 tensor count, then per
tensor: u16 name length + UTF-8 name, u8 dtype code (0=f32, 1=f64, 2=u64),
u8 rank, u32 dims, raw row-major payload.  Tensor names are namespaced
("param:", "buffer:", "optim_g:", "optim_d:").  Round-trips are
byte-identical; loading validates magic, version, and every shape against
the embedded config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GlsgnConfig

MAGIC = b"GLSG"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: GlsgnConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    master_seed: int = 0
    step: int = 0

    def named(self, namespace: str) -> dict[str, np.ndarray]:
        prefix = namespace + ":"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<IQQ", VERSION, ckpt.master_seed, ckpt.step)]
    cfg_blob = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(cfg_blob)))
    parts.append(cfg_blob)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    version, master_seed, step = r.unpack("<IQQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (cfg_len,) = r.unpack("<Q")
    try:
        config = GlsgnConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dtype = _CODE_DTYPES[code]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape
                         else dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(config=config, tensors=tensors, master_seed=master_seed, step=step)


def validate_against_model(ckpt: Checkpoint, expected: dict[str, tuple[int, ...]]) -> None:
    """Check that checkpoint parameter names and shapes match a model's."""
    have = {k: v.shape for k, v in ckpt.named("param").items()}
    missing = expected.keys() - have.keys()
    extra = have.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}")
    for name, shape in expected.items():
        if tuple(have[name]) != tuple(shape):
            raise CheckpointError(
                f"parameter {name}: shape {have[name]} does not match config-built {shape}")
