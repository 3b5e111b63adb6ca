"""Binary checkpoint container.

Layout (little-endian)::

    b"EM2F" | u32 version | u32 header_len | header_len bytes of UTF-8 JSON
    u32 n_tensors
    per tensor: u16 name_len | name | u8 ndim | ndim x u32 dims | prod(dims) x f64

The JSON header echoes the model config and free-form metadata (step, validation DER).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .model import EENDM2F, ModelConfig

MAGIC = b"EM2F"
CHECKPOINT_VERSION = 1
BACKBONE_PREFIX = "backbone."


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state_dict, model_cfg: ModelConfig | dict, meta: dict | None = None) -> None:
    cfg = model_cfg.to_dict() if isinstance(model_cfg, ModelConfig) else dict(model_cfg)
    header = json.dumps({"config": cfg, "meta": meta or {}}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header, struct.pack("<I", len(state_dict))]
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]", dict]:
    """Return (config dict, float64 state dict, meta)."""
    raw = memoryview(Path(path).read_bytes())
    if bytes(raw[:4]) != MAGIC:
        raise CheckpointError(f"{path}: not an EM2F checkpoint")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(bytes(raw[off : off + header_len]).decode())
    off += header_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = bytes(raw[off : off + name_len]).decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        state[name] = torch.from_numpy(arr.copy())
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header["config"], state, header.get("meta", {})


def load_model(path, dtype=torch.float32) -> tuple[EENDM2F, dict]:
    cfg, state, meta = load_checkpoint(path)
    model = EENDM2F(ModelConfig(**cfg)).to(dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return model, meta


def load_backbone(model: EENDM2F, state: dict) -> list[str]:
    """Copy backbone parameters only; everything else keeps its fresh initialization."""
    own = model.state_dict()
    loaded = []
    for name, tensor in state.items():
        if name.startswith(BACKBONE_PREFIX) and name in own:
            own[name] = tensor.to(own[name].dtype)
            loaded.append(name)
    model.load_state_dict(own)
    return loaded


def average_state_dicts(states: list[dict]) -> "OrderedDict[str, torch.Tensor]":
    """Uniform parameter-wise mean, accumulated in float64.

    Computed as first + mean(offsets from first), so identical inputs come back bitwise.
    """
    if not states:
        raise ValueError("nothing to average")
    avg = OrderedDict()
    for name in states[0]:
        first = states[0][name].to(torch.float64)
        offsets = torch.stack([s[name].to(torch.float64) - first for s in states])
        avg[name] = first + offsets.mean(0)
    return avg
