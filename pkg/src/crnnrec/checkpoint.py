"""Versioned binary checkpoints.

Layout::

    b"CRNNCKPT" | u32 format version | u64 header length | JSON header | tensor bytes

The header is canonical JSON (sorted keys, no whitespace) listing each
tensor's name, dtype, shape and byte offset; tensors follow as
little-endian C-order buffers. Nothing time-dependent is stored, so equal
inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .context import ContextSchema
from .data import Vocab
from .errors import InputError
from .models import ModelConfig

MAGIC = b"CRNNCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    schema: ContextSchema | None = None
    vocab: Vocab | None = None
    event_types: tuple[str, ...] = ()
    train: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model": ckpt.model.to_dict(),
        "schema": ckpt.schema.to_dict() if ckpt.schema is not None else None,
        "vocab": ckpt.vocab.to_dict() if ckpt.vocab is not None else None,
        "event_types": list(ckpt.event_types),
        "train": ckpt.train,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:len(MAGIC)] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(buf[start:start + hlen])
    data = memoryview(buf)[start + hlen:]
    params = {}
    for t in header["tensors"]:
        chunk = data[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return Checkpoint(
        model=ModelConfig(**header["model"]),
        params=params,
        schema=ContextSchema.from_dict(header["schema"]) if header["schema"] else None,
        vocab=Vocab.from_dict(header["vocab"]) if header["vocab"] else None,
        event_types=tuple(header["event_types"]),
        train=header["train"],
    )


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(buf)
