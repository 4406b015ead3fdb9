"""Parameter checkpoints: a versioned binary blob plus a JSON manifest.

Blob layout (little-endian): b"MILCKPT\\0", u32 version, u32 tensor count,
then per tensor u16 name length, UTF-8 name, u8 ndim, ndim x u64 shape and
the float64 data in C order. The manifest sits next to the blob as
``<blob>.manifest.json``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .model import Checkpoint, ModelConfig

MAGIC = b"MILCKPT\0"
VERSION = 1


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            key = name.encode()
            f.write(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ParameterError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ParameterError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(n):
            (klen,) = struct.unpack("<H", f.read(2))
            name = f.read(klen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(f.read(8 * count), dtype="<f8").astype(float).reshape(shape)
    return out


def save_checkpoint(path, ckpt: Checkpoint, config: ModelConfig, **extra) -> None:
    write_tensors(path, ckpt.params)
    manifest = {
        "format": "milbench-checkpoint", "version": VERSION,
        "config": config.to_dict(), "epoch": ckpt.epoch,
        "train_auroc": ckpt.train_auroc, "val_auroc": ckpt.val_auroc,
        "constrained": ckpt.constrained,
        "tensors": {k: list(v.shape) for k, v in sorted(ckpt.params.items())},
        **extra,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> tuple[ModelConfig, Checkpoint, dict]:
    manifest = json.loads(manifest_path(path).read_text())
    params = read_tensors(path)
    ckpt = Checkpoint(params, manifest["epoch"], manifest["train_auroc"], manifest["val_auroc"],
                      manifest.get("constrained", True))
    return ModelConfig.from_dict(manifest["config"]), ckpt, manifest
