"""Versioned checkpoint files holding named tensors plus model metadata.

Layout::

    8 bytes   magic b"EKDCKPT\\0"
    4 bytes   format version (little-endian uint32)
    8 bytes   header length H (little-endian uint64)
    H bytes   UTF-8 JSON header: metadata + tensor index (name, dtype, shape, offset, nbytes)
    ...       raw little-endian tensor bytes, concatenated in index order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    TruncatedCheckpointError,
)
from .models import BranchNet, ModelSpec

MAGIC = b"EKDCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model: BranchNet, path, config=None, extra=None):
    """Write every tensor of ``model.state_dict()`` along with the branch specs."""
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "branches": [s.to_dict() for s in model.specs],
        "config": config if config is None or isinstance(config, dict) else _config_dict(config),
        "extra": extra or {},
        "tensors": index,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def _config_dict(config):
    from dataclasses import asdict, is_dataclass

    return asdict(config) if is_dataclass(config) else dict(config)


def read_checkpoint(path):
    """Return ``(header, {name: tensor})``; raises before returning any partial state."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: file shorter than the fixed prefix")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads version {FORMAT_VERSION}"
        )
    body_start = _PREFIX.size + head_len
    if len(blob) < body_start:
        raise TruncatedCheckpointError(f"{path}: header cut short")
    header = json.loads(blob[_PREFIX.size:body_start])
    payload = blob[body_start:]
    if len(payload) != header["payload_bytes"]:
        raise TruncatedCheckpointError(
            f"{path}: expected {header['payload_bytes']} payload bytes, found {len(payload)}"
        )
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path, model: BranchNet | None = None):
    """Restore a model from ``path``.

    Without ``model`` the network is rebuilt from the stored branch specs.
    With ``model`` every stored tensor must match the target's shape; the
    first disagreement raises :class:`CheckpointShapeError` naming it and the
    target is left untouched. Returns ``(model, header)``.
    """
    header, tensors = read_checkpoint(path)
    if model is None:
        model = BranchNet.from_specs([ModelSpec.from_dict(d) for d in header["branches"]])
    target = model.state_dict()
    for name, tensor in tensors.items():
        if name not in target:
            raise CheckpointShapeError(f"tensor {name!r} has no counterpart in the target model", name)
        if tuple(target[name].shape) != tuple(tensor.shape):
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tuple(tensor.shape)} vs model "
                f"shape {tuple(target[name].shape)}",
                name,
            )
    missing = [n for n in target if n not in tensors]
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensor {missing[0]!r}", missing[0])
    model.load_state_dict({n: t.to(target[n].dtype) for n, t in tensors.items()})
    return model, header
