"""Binary checkpoint container.

Layout (all integers uint32 little-endian):

    b"ATSW1"
    config length, config as canonical JSON (sorted keys, compact separators)
    repeated until EOF, parameters in name order:
        name length, UTF-8 name, rank, extents..., float32 LE values (row-major)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import AttSwinUNet, ModelConfig

MAGIC = b"ATSW1"


class CheckpointError(ValueError):
    pass


def canonical_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: AttSwinUNet, path: str | Path) -> None:
    parts = [MAGIC]
    cfg = canonical_json(model.cfg.to_dict())
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    for name, p in sorted(model.named_parameters()):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an ATSW1 checkpoint")
    pos = len(MAGIC)

    def u32(count: int = 1):
        nonlocal pos
        vals = struct.unpack_from(f"<{count}I", buf, pos)
        pos += 4 * count
        return vals

    try:
        (n,) = u32()
        cfg = ModelConfig.from_dict(json.loads(buf[pos:pos + n].decode("utf-8")))
        pos += n
        params: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (n,) = u32()
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = u32()
            shape = u32(rank)
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return cfg, params


def load_checkpoint(path: str | Path) -> AttSwinUNet:
    cfg, params = read_checkpoint(path)
    model = AttSwinUNet(cfg, seed=0)
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointError(f"{path}: parameter set mismatch, e.g. {missing[:3]}")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {p.data.shape}")
        p.data = params[name].copy()
    return model
