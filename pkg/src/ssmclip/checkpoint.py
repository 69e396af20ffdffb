"""Checkpoint files: magic ``CLMP``, version, config snapshot, step, temperature, tensor records."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import read_exact, read_tensor_record, write_tensor_record

MAGIC = b"CLMP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    step: int
    temperature: float
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        cfg = self.config_text.encode("utf-8")
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<Q", self.step))
        buf.write(struct.pack("<d", self.temperature))
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            write_tensor_record(buf, name, arr)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        fh = io.BytesIO(raw)
        if read_exact(fh, 4) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", read_exact(fh, 4))
        config_text = read_exact(fh, n).decode("utf-8")
        (step,) = struct.unpack("<Q", read_exact(fh, 8))
        (temperature,) = struct.unpack("<d", read_exact(fh, 8))
        (count,) = struct.unpack("<I", read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            name, arr = read_tensor_record(fh)
            tensors[name] = arr
        if fh.read(1):
            raise ValueError("trailing bytes after the last tensor record")
        return cls(config_text, step, temperature, tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
