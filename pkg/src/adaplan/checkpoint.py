"""Portable checkpoint files.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ADPLCKPT"
    8       4     u32 format version (currently 1)
    12      4     u32 header length H in bytes
    16      H     UTF-8 JSON header
    16+H    ...   payload: float32 little-endian tensors, back to back

Header keys::

    format        "adaplan-checkpoint"
    version       1
    model_config  ModelConfig fields (switch_design as its string value)
    meta          free-form JSON (train config echo, arm, ...)
    tensors       [{"name", "shape", "offset", "count"}, ...]  offset in bytes from payload start

Tensor names are the torch ``state_dict`` keys of :class:`AdaptiveModel`, and
tensors are stored in row-major order. float64 models are written as float32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig

MAGIC = b"ADPLCKPT"
VERSION = 1
FORMAT = "adaplan-checkpoint"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        blobs.append(arr.tobytes(order="C"))
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.nbytes
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an adaplan checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: bad format tag")
    payload = memoryview(data)[16 + hlen :]
    arrays = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=t["count"], offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return header, arrays


def load_checkpoint(path):
    """Returns (AdaptiveModel, meta)."""
    from .adaptive import AdaptiveModel

    header, arrays = read_checkpoint(path)
    model = AdaptiveModel(ModelConfig.from_dict(header["model_config"]))
    state = model.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    model.load_state_dict({k: torch.from_numpy(v.copy()).to(state[k].dtype) for k, v in arrays.items()})
    return model, header["meta"]
