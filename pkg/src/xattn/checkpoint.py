"""Binary checkpoint format.

Layout (little-endian)::

    b"XATN" | u16 version | u32 meta_len | meta JSON (UTF-8) | u32 n_tensors
    then per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload

Tensor names are prefixed ``param/``, ``buffer/`` (batch-norm running
statistics) and optionally ``adam/m/`` / ``adam/v/``.  The JSON block holds
the model config, the running-stats flag and Adam scalars.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import BadMagic, IoFailure, VersionUnsupported
from .io import atomic_write_bytes
from .model import ModelConfig, ModelParams
from .optim import AdamState

MAGIC = b"XATN"
VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(params: ModelParams, path: str | Path, adam: AdamState | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in params.tensors.items()}
    tensors.update({f"buffer/{k}": v for k, v in params.buffers.items()})
    meta = {"config": asdict(params.config), "stats_ready": params.stats_ready}
    if adam is not None:
        meta["adam"] = {k: getattr(adam, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")}
        tensors.update({f"adam/m/{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam/v/{k}": v for k, v in adam.v.items()})
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(tensors))]
    parts.extend(_pack_tensor(k, v) for k, v in tensors.items())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IoFailure("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint_full(path: str | Path) -> tuple[ModelParams, AdamState | None]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: not an XATN checkpoint")
    r = _Reader(data)
    r.take(4)
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailure(f"{path}: corrupt metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(data):
        raise IoFailure(f"{path}: trailing bytes after last tensor")

    cfg = ModelConfig(**meta["config"])
    params = ModelParams(
        cfg,
        {k[6:]: v for k, v in tensors.items() if k.startswith("param/")},
        {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")},
        bool(meta["stats_ready"]),
    )
    adam = None
    if "adam" in meta:
        adam = AdamState(**meta["adam"])
        adam.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam/m/")}
        adam.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam/v/")}
    return params, adam


def load_checkpoint(path: str | Path) -> ModelParams:
    return load_checkpoint_full(path)[0]
