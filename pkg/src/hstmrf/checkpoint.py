"""Binary checkpoint format.

Layout (little-endian)::

    b"HSTM"                      magic
    u32 version
    u32 n, n bytes               UTF-8 JSON metadata (config snapshot, step, seed)
    u32 count                    number of entries
    per entry:
        u32 n, n bytes           UTF-8 name
        u32 rank
        rank x u32               extents
        prod(extents) x f32      values, C order

Entry names are prefixed ``param/``, ``buffer/``, ``adam_m/`` and ``adam_v/``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"HSTM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    seed: int
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def model_state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(self.params)
        out.update(self.buffers)
        return out


_SECTIONS = (("param/", "params"), ("buffer/", "buffers"), ("adam_m/", "adam_m"), ("adam_v/", "adam_v"))


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config, "seed": ckpt.seed, "step": ckpt.step},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(meta)), meta]
    entries = []
    for prefix, attr in _SECTIONS:
        for name, arr in getattr(ckpt, attr).items():
            entries.append((prefix + name, np.asarray(arr)))
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"corrupt checkpoint {self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes, path: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad metadata ({exc})") from None
    ckpt = Checkpoint(config=meta["config"], step=int(meta["step"]), seed=int(meta["seed"]), version=version)
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        for prefix, attr in _SECTIONS:
            if name.startswith(prefix):
                getattr(ckpt, attr)[name[len(prefix):]] = arr
                break
        else:
            raise CheckpointError(f"corrupt checkpoint {path}: unknown entry {name!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"corrupt checkpoint {path}: {len(buf) - r.pos} trailing bytes")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    """Write atomically, so an interrupted save never clobbers the previous file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(buf, str(path))
