"""Bit-exact model checkpoints.

Little-endian layout:
  magic "RSE1" | format version u32 | config-text length u32 | config text
  (UTF-8, key=value grammar) | parameter count u32 | per parameter:
  name length u32 + UTF-8 name, rank u32, each dim u32, raw float32 data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .config import model_config_from_text, model_config_to_text
from .errors import FormatError
from .layers import Model

MAGIC = b"RSE1"
VERSION = 1


def serialize_model(model: Model) -> bytes:
    cfg_text = model_config_to_text(model.config).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(cfg_text)), cfg_text,
             struct.pack("<I", len(model.parameters))]
    for name, arr in model.parameters.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.off}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def deserialize_model(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0 (not an RSE1 checkpoint)")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    cfg_len = r.u32("config length")
    cfg_text = r.take(cfg_len, "config text").decode("utf-8")
    config = model_config_from_text(cfg_text)
    count = r.u32("parameter count")
    params = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"data of '{name}'")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes at offset {r.off}")
    return Model(config, params)


def save_checkpoint(model: Model, path):
    data = serialize_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
