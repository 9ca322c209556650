"""Binary checkpoint format.

Layout (all little-endian)::

    b"EVA1"  u32 version  u32 meta_len  meta (UTF-8 JSON: config, seed, epoch)
    u32 n_entries
    per entry: u32 name_len, name (UTF-8), u8 trainable, u32 ndim, ndim x u64 extents
    payload: float64 arrays in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EVA1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: list[tuple[str, tuple[int, ...], bool]]
    payload: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    @classmethod
    def from_model(cls, model, config: dict, epoch: int = 0) -> "Checkpoint":
        params = model.named_parameters()
        manifest = [(k, tuple(v.shape), bool(v.requires_grad)) for k, v in params.items()]
        payload = {k: v.data.copy() for k, v in params.items()}
        return cls(manifest, payload, config, model.seed, epoch)

    def load_into(self, model) -> None:
        params = model.named_parameters()
        names = [m[0] for m in self.manifest]
        if set(names) != set(params):
            missing = sorted(set(params) - set(names))[:3]
            extra = sorted(set(names) - set(params))[:3]
            raise CheckpointError(f"parameter sets differ (missing {missing}, unexpected {extra})")
        for name, shape, _ in self.manifest:
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(shape)} != model shape {params[name].shape}")
        for name, _, _ in self.manifest:
            params[name].data[...] = self.payload[name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config, "seed": ckpt.seed, "epoch": ckpt.epoch},
                      sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
             struct.pack("<I", len(ckpt.manifest))]
    for name, shape, trainable in ckpt.manifest:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", int(trainable), len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
    for name, shape, _ in ckpt.manifest:
        arr = np.asarray(ckpt.payload[name], dtype="<f8")
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{name}: payload shape {arr.shape} != manifest {tuple(shape)}")
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> Checkpoint:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4
    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if pos + meta_len > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        meta = json.loads(raw[pos: pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    pos += meta_len
    (n,) = take("<I")
    manifest = []
    for _ in range(n):
        (name_len,) = take("<I")
        if pos + name_len > len(raw):
            raise CheckpointError("truncated manifest")
        name = raw[pos: pos + name_len].decode()
        pos += name_len
        trainable, ndim = take("<BI")
        shape = take(f"<{ndim}Q") if ndim else ()
        manifest.append((name, tuple(int(s) for s in shape), bool(trainable)))
    payload = {}
    for name, shape, _ in manifest:
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(raw):
            raise CheckpointError(f"truncated payload for {name}")
        payload[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after payload")
    return Checkpoint(manifest, payload, meta.get("config", {}), meta.get("seed", 0),
                      meta.get("epoch", 0))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
