"""Binary checkpoints.

Layout (all integers little-endian)::

    b"PVQC"  u32 version
    u64 n    n bytes of UTF-8 JSON metadata (configs, step, Adam t, RNG keys)
    u32 k    k tensor entries, each:
             u32 name length, name (UTF-8), u32 rank, rank x u64 dims,
             prod(dims) float64 values

Tensor names are prefixed ``param/``, ``buffer/``, ``adam.m/`` or
``adam.v/``.  Metadata is serialised with sorted keys, so a
save -> load -> save cycle is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, PitVQANet
from .training import AdamState, TrainConfig

MAGIC = b"PVQC"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, or malformed metadata."""


class ConfigMismatchError(ValueError):
    """The checkpoint was written for a different model configuration."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam: AdamState
    step: int

    def net(self) -> PitVQANet:
        return PitVQANet(self.model_config, dict(self.params), dict(self.buffers))


def _entries(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield "param/" + name, arr
    for name, arr in ckpt.buffers.items():
        yield "buffer/" + name, arr
    for name, arr in ckpt.adam.m.items():
        yield "adam.m/" + name, arr
    for name, arr in ckpt.adam.v.items():
        yield "adam.v/" + name, arr


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": dataclasses.asdict(ckpt.train_config),
        "step": ckpt.step,
        "adam_t": ckpt.adam.t,
        "rng": {"seed": ckpt.train_config.seed, "next_step": ckpt.step},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries = list(_entries(ckpt))
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise OSError(f"{self.name}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes, name: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, name)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{name}: bad magic, not a PVQC checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"{name}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
        model_config = ModelConfig(**meta["model_config"])
        train_config = TrainConfig(**meta["train_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{name}: bad metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        full = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        kind, _, pname = full.partition("/")
        if kind not in tables:
            raise CheckpointFormatError(f"{name}: unknown entry {full!r}")
        tables[kind][pname] = arr
    if r.pos != len(raw):
        raise CheckpointFormatError(f"{name}: {len(raw) - r.pos} trailing bytes")
    adam = AdamState(tables["adam.m"], tables["adam.v"], int(meta["adam_t"]))
    return Checkpoint(model_config, train_config, tables["param"], tables["buffer"], adam, int(meta["step"]))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    ckpt = from_bytes(path.read_bytes(), str(path))
    if expected_config is not None and ckpt.model_config != expected_config:
        diffs = [
            f.name
            for f in dataclasses.fields(ModelConfig)
            if getattr(ckpt.model_config, f.name) != getattr(expected_config, f.name)
        ]
        raise ConfigMismatchError(f"{path}: model config differs in {', '.join(diffs)}")
    return ckpt
