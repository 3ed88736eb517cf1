"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian uint32):

    b"EADROCKPT"  version  n_entries
    per entry, in sorted name order:
        name_len  name (utf-8)  rank  dim_0 .. dim_{rank-1}  float32 payload (row-major, LE)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"EADROCKPT"
CKPT_VERSION = 1

# entries whose last name component is one of these are statistics, not trained weights
BUFFER_SUFFIXES = ("running_mean", "running_var", "mean", "std")


class CheckpointError(ValueError):
    pass


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


class ParameterStore:
    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=np.float32), requires_grad=not is_buffer(name))
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._entries):
            yield name, self._entries[name]

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.items():
            if t.requires_grad:
                yield name, t

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, t in self.items():
            other.add(name, t.data.copy())
        return other

    def equals(self, other: "ParameterStore") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[n].data.shape == other[n].data.shape and self[n].data.tobytes() == other[n].data.tobytes()
            for n in self
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(self._entries)))
        for name, t in self.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        view = memoryview(blob)
        pos = 0

        def read(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("checkpoint is truncated")
            out = view[pos: pos + n]
            pos += n
            return out

        if bytes(read(len(CKPT_MAGIC))) != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, count = struct.unpack("<II", read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        store = cls()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read(4))
            name = bytes(read(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<I", read(4))
            shape = struct.unpack(f"<{rank}I", read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
            store.add(name, arr)
        if pos != len(view):
            raise CheckpointError("trailing bytes after last checkpoint entry")
        return store


def save_checkpoint(store: ParameterStore, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> ParameterStore:
    return ParameterStore.from_bytes(Path(path).read_bytes())
