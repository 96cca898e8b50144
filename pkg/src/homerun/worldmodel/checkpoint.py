"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes   b"HRCK"
    version    uint32    CHECKPOINT_VERSION
    meta_len   uint32    length of the UTF-8 JSON metadata that follows
    meta       bytes     {"model_config": ..., "epoch": ..., ...}
    n_tensors  uint32
    repeated n_tensors times:
        name_len  uint16, name (UTF-8)
        ndim      uint8,  shape (ndim x uint32)
        data      prod(shape) x float32 (little-endian, C order)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .model import WorldModel
from .networks import ModelConfig

MAGIC = b"HRCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: WorldModel, path: str | Path, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["model_config"] = model.cfg.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return meta, tensors


def load_checkpoint(path: str | Path) -> tuple[WorldModel, dict]:
    meta, tensors = read_checkpoint(path)
    model = WorldModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
