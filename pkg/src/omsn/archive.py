"""Binary weight container.

Layout, all integers little-endian::

    b"OMSN"                     magic
    u32  version                (currently 1)
    u32  config length, bytes   UTF-8 JSON (sorted keys)
    u32  array count
    per array:
        u32 name length, bytes  UTF-8 name
        u8  dtype tag           1 = float32
        u8  rank
        u64 * rank              dims
        raw values              little-endian, C order
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OMSN"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}


class ArchiveError(ValueError):
    pass


@dataclass
class ModelArchive:
    config: dict
    arrays: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(MAGIC)
        buf.write(struct.pack("<II", self.version, len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            raw = name.encode("utf-8")
            a = np.array(arr, dtype="<f4", order="C")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", 1, a.ndim))
            buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelArchive":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise ArchiveError(f"truncated archive: need {n} bytes at offset {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise ArchiveError("not an OMSN archive (bad magic)")
        version, clen = struct.unpack("<II", take(8))
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        config = json.loads(bytes(take(clen)).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            tag, rank = struct.unpack("<BB", take(2))
            if tag not in DTYPE_TAGS:
                raise ArchiveError(f"{name}: unknown dtype tag {tag}")
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            dt = DTYPE_TAGS[tag]
            n = int(np.prod(dims, dtype=np.int64))
            arrays[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).astype(np.float32)
        if pos != len(view):
            raise ArchiveError(f"{len(view) - pos} trailing bytes after last array")
        return cls(config, arrays, version)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "ModelArchive":
        return cls.from_bytes(Path(path).read_bytes())


def archive_model(model, **extra) -> ModelArchive:
    """Snapshot a model's parameters and buffers with its config."""
    config = {"model": model.config.to_dict(), "seed": model.seed}
    config.update(extra)
    arrays = {name: np.array(arr, dtype=np.float32) for name, arr in model.state_dict().items()}
    return ModelArchive(config, arrays)


def restore_model(archive: ModelArchive):
    from .network import OMSN, ModelConfig

    model = OMSN(ModelConfig.from_dict(archive.config["model"]), seed=archive.config.get("seed", 0))
    model.load_state_dict(archive.arrays)
    model.eval()
    return model
