"""Append-only byte files, either on disk or in memory.

Both backings expose the same small surface so the skip list, the
RBB-tree and the receipt archive can run unchanged inside the simulator
(memory) and from the CLI (disk).
"""

from __future__ import annotations

import os
from collections import Counter

PAGE = 4096


class Backing:
    """Abstract append-mostly byte store."""

    def __init__(self, counters: Counter | None = None):
        self.counters = counters if counters is not None else Counter()

    def _touch(self, kind: str, offset: int, length: int) -> None:
        first = offset // PAGE
        last = (offset + max(length, 1) - 1) // PAGE
        self.counters[kind] += last - first + 1

    def size(self) -> int:
        raise NotImplementedError

    def append(self, data: bytes) -> int:
        raise NotImplementedError

    def write_at(self, offset: int, data: bytes) -> None:
        raise NotImplementedError

    def read(self, offset: int, length: int) -> bytes:
        raise NotImplementedError

    def truncate(self, length: int) -> None:
        raise NotImplementedError

    def sync(self) -> None:
        pass

    def close(self) -> None:
        pass

    def getvalue(self) -> bytes:
        return self.read(0, self.size())


class MemoryBacking(Backing):
    def __init__(self, data: bytes = b"", counters: Counter | None = None):
        super().__init__(counters)
        self._buf = bytearray(data)

    def size(self) -> int:
        return len(self._buf)

    def append(self, data: bytes) -> int:
        offset = len(self._buf)
        self._buf += data
        self._touch("blocks_written", offset, len(data))
        return offset

    def write_at(self, offset: int, data: bytes) -> None:
        if offset > len(self._buf):
            self._buf += bytes(offset - len(self._buf))
        self._buf[offset:offset + len(data)] = data
        self._touch("blocks_written", offset, len(data))

    def read(self, offset: int, length: int) -> bytes:
        if offset + length > len(self._buf):
            raise EOFError(f"read past end ({offset}+{length} > {len(self._buf)})")
        self._touch("blocks_read", offset, length)
        return bytes(self._buf[offset:offset + length])

    def truncate(self, length: int) -> None:
        del self._buf[length:]

    def clone(self, counters: Counter | None = None) -> "MemoryBacking":
        return MemoryBacking(bytes(self._buf), counters)


class FileBacking(Backing):
    """A file accessed with positioned reads and writes.

    With ``fsync`` set, every append is flushed to stable storage before it
    returns (write-through).
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = False,
                 counters: Counter | None = None):
        super().__init__(counters)
        self.path = os.fspath(path)
        self.fsync = fsync
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._size = os.fstat(self._fd).st_size

    def size(self) -> int:
        return self._size

    def append(self, data: bytes) -> int:
        offset = self._size
        self.write_at(offset, data)
        return offset

    def write_at(self, offset: int, data: bytes) -> None:
        written = os.pwrite(self._fd, data, offset)
        if written != len(data):
            raise OSError(f"short write to {self.path}")
        self._size = max(self._size, offset + len(data))
        self._touch("blocks_written", offset, len(data))
        if self.fsync:
            os.fsync(self._fd)

    def read(self, offset: int, length: int) -> bytes:
        data = os.pread(self._fd, length, offset)
        if len(data) != length:
            raise EOFError(f"read past end of {self.path}")
        self._touch("blocks_read", offset, length)
        return data

    def truncate(self, length: int) -> None:
        os.ftruncate(self._fd, length)
        self._size = length
        if self.fsync:
            os.fsync(self._fd)

    def sync(self) -> None:
        os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1
