"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TCAM" | version u32 | config_len u32 | config JSON (UTF-8) | count u32
    then per tensor: key_len u32 | key (UTF-8) | ndim u32 | dims u32 * ndim | float32 values
    crc32 u32 over every preceding byte

Tensors are written in sorted key order and the JSON uses sorted keys, so a
file loaded and saved again is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"TCAM"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class CheckpointBundle:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if self.version != VERSION:
            raise CheckpointError(f"cannot write checkpoint version {self.version}")
        out = bytearray(MAGIC)
        out += _U32.pack(self.version)
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += _U32.pack(len(cfg)) + cfg
        out += _U32.pack(len(self.tensors))
        for key in sorted(self.tensors):
            arr = np.asarray(self.tensors[key])
            if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
                raise CheckpointError(f"tensor {key!r} has non-numeric dtype {arr.dtype}")
            name = key.encode("utf-8")
            out += _U32.pack(len(name)) + name
            out += _U32.pack(arr.ndim)
            for d in arr.shape:
                out += _U32.pack(d)
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out += _U32.pack(zlib.crc32(bytes(out)) & 0xFFFFFFFF)
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CheckpointBundle":
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, stored = blob[:-4], _U32.unpack(blob[-4:])[0]
        if zlib.crc32(body) & 0xFFFFFFFF != stored:
            raise CheckpointError("checksum mismatch; the file is corrupt or truncated")
        reader = _Reader(body, 4)
        version = reader.u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
        try:
            config = json.loads(reader.take(reader.u32()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"config block is not valid JSON: {exc}") from None
        tensors = {}
        for _ in range(reader.u32()):
            key = reader.take(reader.u32()).decode("utf-8")
            dims = tuple(reader.u32() for _ in range(reader.u32()))
            count = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
            tensors[key] = data.astype(np.float32)
        if reader.pos != len(body):
            raise CheckpointError(f"{len(body) - reader.pos} trailing bytes before the checksum")
        return cls(config, tensors, version)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointBundle":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def save_model(model, path: str | Path, extra: dict | None = None) -> Path:
    """Write a MiniConformer (parameters and running statistics) plus its config.

    ``extra`` entries (for example ``run`` and ``classes``) are stored next to ``model``.
    """
    config = {**(extra or {}), "model": model.config.to_dict()}
    return CheckpointBundle(config, model.state_dict()).save(path)


def load_model(path: str | Path):
    """Rebuild a MiniConformer from a checkpoint. Returns ``(model, bundle)``."""
    from .conformer import ConformerConfig, MiniConformer

    bundle = CheckpointBundle.load(path)
    if "model" not in bundle.config:
        raise CheckpointError("checkpoint config has no model section")
    model = MiniConformer(ConformerConfig.from_dict(bundle.config["model"]))
    try:
        model.load_state_dict(bundle.tensors)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the stored config: {exc}") from exc
    return model, bundle
