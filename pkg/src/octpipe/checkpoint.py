"""Checkpoint container: ``spec.json`` + flat f32 blob + JSON tensor manifest.

Layout of a checkpoint directory::

    spec.json       {"format_version", "kind", "seed", "spec": {...}, ...}
    manifest.json   [{"name", "shape", "offset", "nbytes", "trainable"}, ...]
    params.bin      little-endian float32 tensors, concatenated in manifest order

Offsets are byte offsets into ``params.bin``.  Buffers (batch-norm running
statistics) are stored alongside parameters with ``trainable: false``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
SPEC_FILE = "spec.json"
MANIFEST_FILE = "manifest.json"
BLOB_FILE = "params.bin"


class CheckpointError(ValueError):
    pass


def state_tensors(module: torch.nn.Module) -> list[tuple[str, torch.Tensor, bool]]:
    params = dict(module.named_parameters())
    out = []
    for name, t in module.state_dict().items():
        if t.dtype == torch.long:  # num_batches_tracked carries no information we use
            continue
        p = params.get(name)
        out.append((name, t, bool(p is not None and p.requires_grad)))
    return out


def save_checkpoint(path, module: torch.nn.Module, kind: str, spec: dict,
                    seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(path / BLOB_FILE, "wb") as fh:
        for name, t, trainable in state_tensors(module):
            arr = t.detach().cpu().numpy().astype("<f4")
            data = arr.tobytes(order="C")
            fh.write(data)
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                             "nbytes": len(data), "trainable": trainable})
            offset += len(data)
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1))
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "seed": seed, "spec": spec}
    if extra:
        meta.update(extra)
    (path / SPEC_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_spec(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / SPEC_FILE).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path} is not a checkpoint (no {SPEC_FILE})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    blob = (path / BLOB_FILE).read_bytes()
    out = {}
    for entry in manifest:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of blob")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def load_into(module: torch.nn.Module, path, strict: bool = True) -> torch.nn.Module:
    tensors = read_tensors(path)
    state = module.state_dict()
    missing = [k for k, t in state.items() if t.dtype != torch.long and k not in tensors]
    if strict and missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:5]}")
    new_state = {}
    for k, t in state.items():
        if k in tensors:
            src = torch.from_numpy(tensors[k])
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"{path}: shape mismatch for {k}: {tuple(src.shape)} vs {tuple(t.shape)}")
            new_state[k] = src.to(t.dtype)
        else:
            new_state[k] = t
    module.load_state_dict(new_state)
    return module
