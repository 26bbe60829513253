"""Binary checkpoint format.

Layout, all integers little-endian::

    b"ISDA"  u8 version=1  u64 record_count
    record:  u32 name_len  name(utf-8)  u8 dtype (1=f32, 2=f64)  u8 rank
             u64 dims[rank]  raw data (row-major, little-endian)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"ISDA"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {torch.float32: 1, torch.float64: 2}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BQ", VERSION, len(tensors)))
    for name, t in tensors.items():
        if t.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        tag = _TAGS[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.detach().cpu().contiguous().numpy().astype(_DTYPES[tag], copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    try:
        version, count = struct.unpack_from("<BQ", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 4 + 9
        out: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(data):
                raise CheckpointError(f"{name}: truncated data")
            arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims)
            pos += size
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, torch.Tensor]:
    return loads(Path(path).read_bytes())


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy ``tensors`` into ``module``'s state, raising on any name or shape mismatch."""
    state = module.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != model {tuple(state[name].shape)}")
    with torch.no_grad():
        for name, t in tensors.items():
            state[name].copy_(t.to(state[name].dtype))
