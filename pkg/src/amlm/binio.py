"""Little-endian fixed-width binary helpers shared by the on-disk formats."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A persisted file is truncated, corrupt or of an unknown version."""


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def blob(self, data: bytes) -> None:
        self.pack("I", len(data))
        self.raw(data)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)

    def write(self, path: str | Path) -> None:
        # write-then-rename so a crash never leaves a half-written file behind
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.getvalue())
        tmp.replace(path)


class Reader:
    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    @classmethod
    def open(cls, path: str | Path) -> "Reader":
        return cls(Path(path).read_bytes(), str(path))

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated (needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self._take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.unpack("I"))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        buf = self._take(dt.itemsize * count)
        return np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))

    def expect_magic(self, magic: bytes) -> None:
        got = self._take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic header {got!r}, expected {magic!r}")

    def expect_version(self, supported: int) -> int:
        version = self.unpack("I")
        if version != supported:
            raise FormatError(f"{self.what}: unsupported format version {version} (expected {supported})")
        return version

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes after payload")
