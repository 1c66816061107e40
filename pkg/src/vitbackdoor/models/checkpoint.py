"""Binary checkpoint format.

Layout (little-endian)::

    8 bytes   magic  b"VBDCKPT\\x00"
    u32       format version
    u32 + N   JSON config blob {"kind", "config", "meta"}
    u32       tensor count
    per tensor: u16 name length, name (utf-8), u8 dtype code, u8 ndim,
                ndim x u32 dims, raw data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, IncompatibleVersionError
from .base import ClassifierModel
from .cnn import TinyCNN, TinyCNNConfig
from .vit import TinyViT, TinyViTConfig

MAGIC = b"VBDCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_KINDS = {"vit": (TinyViT, TinyViTConfig), "cnn": (TinyCNN, TinyCNNConfig)}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def build_model(kind: str, config: dict) -> ClassifierModel:
    if kind not in _KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    cls, cfg_cls = _KINDS[kind]
    return cls(cfg_cls(**config))


def encode_checkpoint(model: ClassifierModel, meta: dict | None = None) -> bytes:
    blob = json.dumps({"kind": model.kind, "config": model.config.to_dict(), "meta": meta or {}},
                      sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.value)
        code = _CODES[arr.dtype]
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source="<bytes>") -> Checkpoint:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{source}: truncated while reading {what} at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise IncompatibleVersionError(f"{source}: checkpoint version {version} is incompatible with reader version {VERSION}")
    (blen,) = struct.unpack("<I", take(4, "config length"))
    try:
        header = json.loads(take(blen, "config blob").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt config blob at offset 16") from exc
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "tensor name").decode()
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name} at offset {pos - 2}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size, f"data of {name}"), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes at offset {pos}")
    return Checkpoint(header["kind"], header["config"], tensors, header.get("meta", {}), version)


def save_checkpoint(model: ClassifierModel, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, meta))
    return path


def load_checkpoint(path) -> tuple[ClassifierModel, Checkpoint]:
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), source=str(path))
    model = build_model(ckpt.kind, ckpt.config)
    model.load_state_dict(ckpt.tensors)
    return model, ckpt
