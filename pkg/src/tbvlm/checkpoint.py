"""Binary checkpoint format.

Layout (all integers little-endian uint32, values little-endian float64)::

    b"CVLM" | version | header_len | header JSON (utf-8)
    | n_blobs | { name_len | name | ndim | dims... | values } * n_blobs
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig
from .params import param_shapes
from .tensor import Tensor

MAGIC = b"CVLM"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: dict                       # name -> Tensor
    vocab: list = field(default_factory=list)  # non-reserved tokens
    stage: Optional[str] = None
    step: int = 0
    optimizer: dict = field(default_factory=dict)  # "m.<name>" / "v.<name>" -> ndarray
    optimizer_step: int = 0

    def header(self) -> dict:
        return {"model": self.cfg.to_dict(), "vocab": list(self.vocab), "stage": self.stage,
                "step": self.step, "optimizer_step": self.optimizer_step}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    blobs = [(name, t.data) for name, t in ckpt.params.items()]
    blobs += [(f"adam.{name}", arr) for name, arr in ckpt.optimizer.items()]
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(header)), header, _U32.pack(len(blobs))]
    for name, arr in blobs:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = _U32.unpack_from(raw, pos)
        pos += 4
        return v

    try:
        version = u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        hlen = u32()
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        params, opt = {}, {}
        for _ in range(u32()):
            nlen = u32()
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            if name.startswith("adam."):
                opt[name[5:]] = arr
            else:
                params[name] = Tensor(arr, requires_grad=True)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    cfg = ModelConfig.from_dict(header["model"])
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match its config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, config needs {shape}")
    params = {name: params[name] for name in expected}
    return Checkpoint(cfg, params, header.get("vocab", []), header.get("stage"), header.get("step", 0),
                      opt, header.get("optimizer_step", 0))
