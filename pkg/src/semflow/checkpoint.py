"""Binary checkpoint codec for named float tensors.

Layout (little endian): ``b"SFCK"``, u32 version, u32 entry count, then per
entry u32 name length, UTF-8 name, u32 rank, u32 dims..., f32 data.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .diffcore import ParamBlock

MAGIC = b"SFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, torch.Tensor | np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, t in tensors.items():
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode_tensors(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated at byte {pos} (need {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an SFCK checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name is not UTF-8") from e
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    return tensors


def _flatten(params) -> dict[str, torch.Tensor]:
    if isinstance(params, ParamBlock):
        return params.qualified()
    if isinstance(params, Mapping):
        flat = {}
        for key, value in params.items():
            if isinstance(value, ParamBlock):
                flat.update(value.qualified())
            else:
                flat[key] = value
        return flat
    flat = {}
    for block in params:
        flat.update(block.qualified())
    return flat


def save_checkpoint(path, params) -> Path:
    """Write ParamBlocks (or a mapping of names to tensors) atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(_flatten(params)))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from e
    return decode_tensors(data, str(path))


def load_checkpoint(path, params, strict: bool = True) -> None:
    """Copy tensors from ``path`` into ``params`` (ParamBlocks) in place.

    With ``strict`` every stored name must exist in ``params`` and every
    parameter must be present in the file.
    """
    stored = read_checkpoint(path)
    target = _flatten(params)
    unknown = sorted(set(stored) - set(target))
    missing = sorted(set(target) - set(stored))
    if strict and (unknown or missing):
        raise CheckpointError(f"{path}: unknown tensors {unknown[:3]}, missing {missing[:3]}")
    for name, arr in stored.items():
        if name not in target:
            continue
        dst = target[name]
        if tuple(dst.shape) != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(dst.shape)}")
        with torch.no_grad():
            dst.copy_(torch.from_numpy(arr).to(dst.dtype))
