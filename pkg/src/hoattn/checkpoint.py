"""Binary checkpoint container.

Layout (little-endian)::

    "HOAC" | u32 version | u32 n | n bytes of UTF-8 JSON metadata
    u32 tensor count, then per tensor:
        u32 name length | name | u32 ndim | u32 * ndim shape | float64 payload
    u32 sketch count, then per sketch:
        u32 name length | name | u32 d_in | u32 d_out | u64 seed | u32 * d_in hash | int8 * d_in sign

Tensor names are ``param/<name>`` for model weights and ``rms/<name>`` for the
optimiser accumulators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decision import FusionSketches
from .errors import FormatError
from .model import HighOrderAttentionModel, ModelConfig
from .sketch import CountSketchParams
from .train import RmsPropState

MAGIC = b"HOAC"
VERSION = 1


@dataclass
class Checkpoint:
    model: HighOrderAttentionModel
    rms: RmsPropState | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def _name(buf: bytearray, name: str):
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    meta = dict(ckpt.meta)
    meta["model"] = model.config.to_dict()
    meta["step"] = ckpt.step
    meta["model_seed"] = model.config.seed
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(meta_raw)) + meta_raw)

    tensors = [(f"param/{k}", v) for k, v in sorted(model.params.items())]
    if ckpt.rms is not None:
        tensors += [(f"rms/{k}", v) for k, v in sorted(ckpt.rms.mean_square.items())]
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        _name(buf, name)
        buf += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        buf += arr.tobytes()

    sketches = sorted(model.sketches.named().items())
    buf += struct.pack("<I", len(sketches))
    for name, p in sketches:
        _name(buf, name)
        buf += struct.pack("<IIQ", p.d_in, p.d_out, p.seed)
        buf += np.asarray(p.h, dtype="<u4").tobytes() + np.asarray(p.s, dtype="i1").tobytes()
    return bytes(buf)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_tensors,) = r.unpack("<I")
    params, rms = {}, {}
    for _ in range(n_tensors):
        name = r.name()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, key = name.partition("/")
        (params if kind == "param" else rms)[key] = arr
    (n_sketches,) = r.unpack("<I")
    sketches = {}
    for _ in range(n_sketches):
        name = r.name()
        d_in, d_out, seed = r.unpack("<IIQ")
        h = np.frombuffer(r.take(4 * d_in), dtype="<u4").astype(np.uint32)
        s = np.frombuffer(r.take(d_in), dtype="i1").astype(np.int8)
        sketches[name] = CountSketchParams(d_in, d_out, h, s, seed)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    config = ModelConfig(**meta["model"])
    model = HighOrderAttentionModel(config, params, FusionSketches.from_named(config.fusion, sketches))
    return Checkpoint(model, RmsPropState(rms) if rms else None, int(meta.get("step", 0)), meta)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
