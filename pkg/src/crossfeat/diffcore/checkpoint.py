"""Named-tensor checkpoint files (magic ``MCHP``)."""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MCHP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(tensors: Mapping[str, torch.Tensor]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(tensors))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return out


def tensors_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    return hashlib.sha256(checkpoint_bytes(tensors)).hexdigest()[:16]
