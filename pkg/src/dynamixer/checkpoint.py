"""Checkpoint container.

Layout::

    b"DYNAMIX1"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, see below
    payload                     little-endian float arrays, back to back

The header holds ``dtype`` ("<f4" or "<f8", the element type of the saved
model), ``manifest`` mapping each tensor name to ``{"shape", "offset"}``
(byte offset into the payload), the model config echo, the training config
echo and the training state. Optimizer moments are stored as tensors named
``optimizer.m.<param>`` and ``optimizer.v.<param>``. Serialization is
canonical, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from dynamixer.config import ModelConfig, TrainConfig, from_dict, to_dict
from dynamixer.errors import CheckpointError, ConfigError
from dynamixer.mixer import build_model, named_parameters

MAGIC = b"DYNAMIX1"
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: object
    train_config: TrainConfig | None = None
    optimizer: OptimizerState | None = None
    state: dict = field(default_factory=dict)


def _dtype_tag(dtype):
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return "<f4"
    if dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported parameter dtype {dtype}")


def save_checkpoint(path, weights, config, train_config=None, optimizer=None, state=None):
    named = list(named_parameters(weights))
    tag = _dtype_tag(named[0][1].dtype)
    arrays = [(name, t.data) for name, t in named]
    if optimizer is not None:
        arrays += [(f"optimizer.m.{name}", optimizer.m[name]) for name, _ in named]
        arrays += [(f"optimizer.v.{name}", optimizer.v[name]) for name, _ in named]

    manifest, chunks, offset = {}, [], 0
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype=tag).tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format": 1,
        "dtype": tag,
        "config": to_dict(config),
        "train_config": None if train_config is None else to_dict(train_config),
        "optimizer_step": None if optimizer is None else int(optimizer.step),
        "state": state or {},
        "manifest": manifest,
    }
    head = json.dumps(header, separators=(",", ":"), allow_nan=False).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for buf in chunks:
            fh.write(buf)
    os.replace(tmp, path)
    return path


def read_header(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (size,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(size).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: corrupt header ({err})") from None
    return header, 16 + size


def load_checkpoint(path):
    """Read a checkpoint, validating every tensor shape against its config."""
    header, start = read_header(path)
    tag = header.get("dtype")
    if tag not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported dtype {tag!r}")
    try:
        config = from_dict(ModelConfig, header["config"], "config")
        config.validate()
        train_config = None
        if header.get("train_config") is not None:
            train_config = from_dict(TrainConfig, header["train_config"], "train_config")
    except ConfigError as err:
        raise CheckpointError(f"{path}: invalid config echo: {err}") from None

    payload = np.fromfile(path, dtype=np.uint8, offset=start)
    manifest = header["manifest"]
    dtype = np.dtype(tag)

    def tensor(name, shape):
        entry = manifest.get(name)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(entry['shape'])}, config expects {tuple(shape)}")
        n = int(np.prod(shape)) * dtype.itemsize
        off = entry["offset"]
        if off + n > payload.size:
            raise CheckpointError(f"{path}: tensor {name} runs past end of payload")
        return payload[off:off + n].view(dtype).reshape(shape).astype(_DTYPES[tag], copy=True)

    weights = build_model(config, seed=0, dtype=_DTYPES[tag])
    named = list(named_parameters(weights))
    for name, t in named:
        t.data = tensor(name, t.shape)
    expected = {name for name, _ in named}
    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = OptimizerState(step=int(header["optimizer_step"]))
        for name, t in named:
            optimizer.m[name] = tensor(f"optimizer.m.{name}", t.shape)
            optimizer.v[name] = tensor(f"optimizer.v.{name}", t.shape)
            expected.update((f"optimizer.m.{name}", f"optimizer.v.{name}"))
    extra = sorted(set(manifest) - expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]} for this config")
    return Checkpoint(config, weights, train_config, optimizer, header.get("state") or {})

