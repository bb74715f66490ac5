"""Authenticated append-only deterministic skip list.

Element ``i`` (1-based) with value ``d_i`` belongs to the hash chains of
levels ``0..l`` where ``2**l`` is the largest power of two dividing ``i``.
Its links and authenticator are::

    L_i^j = h(i, j, d_i, T_{i - 2**j})     for 0 <= j <= l
    T_i   = h(L_i^0, ..., L_i^l)           (even i)
    T_i   = L_i^0                          (odd i)

``T_0`` is the genesis digest.  Precedence proofs list, for each element
visited by the traversal, its value and every link except the one the
verifier recomputes.

On disk a store is a directory with two files: ``data`` (header followed by
canonically encoded element records) and ``index`` (one big-endian u64
record offset per element).  Writing the index record is the commit point
of an append.
"""

from __future__ import annotations

import os
import struct
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .canon import DEFAULT_SUITE, TAG_BYTES, TAG_SEQ, TAG_UINT, DecodeError, Suite, decode, encode
from .storage import Backing, FileBacking, MemoryBacking

MAGIC = b"TWSL"
FORMAT_VERSION = 1
_HEAD = struct.Struct(">4sHHB")
_REC_HEAD = struct.Struct(">BQ")
_OFF = struct.Struct(">Q")


class RangeError(IndexError):
    """Requested indices fall outside the committed list."""


class StoreFormatError(ValueError):
    pass


def level(i: int) -> int:
    """Exponent of 2 in ``i``: the element's top link level."""
    if i <= 0:
        raise ValueError("level is defined for positive indices only")
    return (i & -i).bit_length() - 1


def jump_path(i: int, j: int) -> list[tuple[int, int]]:
    """Traversal from ``i`` to ``j`` as a list of ``(landing index, level)``.

    From the current element ``c`` take the largest jump ``2**z`` with
    ``2**z | c`` (so at most ``c``'s own top level) and ``c + 2**z <= j``.
    Index 0 stands for the genesis authenticator, which every level reaches.
    """
    if i < 0 or i > j:
        raise RangeError(f"bad traversal {i}->{j}")
    path = []
    c = i
    while c < j:
        z = level(c) if c else j.bit_length() - 1
        while c + (1 << z) > j:
            z -= 1
        c += 1 << z
        path.append((c, z))
    return path


@dataclass(frozen=True)
class Hop:
    index: int
    value: bytes
    links: tuple[bytes, ...]  # every link of ``index`` except level ``level``
    level: int

    def to_wire(self) -> list:
        return [self.index, self.value, list(self.links), self.level]

    @classmethod
    def from_wire(cls, wire) -> "Hop":
        index, value, links, lvl = wire
        if not (isinstance(index, int) and isinstance(value, bytes)
                and isinstance(lvl, int) and isinstance(links, list)
                and all(isinstance(x, bytes) for x in links)):
            raise DecodeError("bad hop")
        return cls(index, value, tuple(links), lvl)


@dataclass(frozen=True)
class SkipListProof:
    start: int
    end: int
    hops: tuple[Hop, ...] = ()

    @property
    def digest_count(self) -> int:
        return sum(1 + len(h.links) for h in self.hops)

    @property
    def indices(self) -> list[int]:
        return [h.index for h in self.hops]

    def to_wire(self) -> list:
        return [self.start, self.end, [h.to_wire() for h in self.hops]]

    @classmethod
    def from_wire(cls, wire) -> "SkipListProof":
        try:
            start, end, hops = wire
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad skip list proof") from exc
        if not (isinstance(start, int) and isinstance(end, int) and isinstance(hops, list)):
            raise DecodeError("bad skip list proof")
        return cls(start, end, tuple(Hop.from_wire(h) for h in hops))

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SkipListProof":
        return cls.from_wire(decode(data))


_LINK_LAYOUTS: dict[int, struct.Struct] = {}
_DIGEST_HEAD: dict[int, bytes] = {}


def link_digest(suite: Suite, i: int, j: int, value: bytes, prev: bytes) -> bytes:
    """``L_i^j = h(i, j, value, prev)`` with the canonical preimage packed in one go."""
    w = suite.width
    if len(value) != w or len(prev) != w or not 0 <= i < 1 << 64:
        return suite.h(i, j, value, prev)
    layout = _LINK_LAYOUTS.get(w)
    if layout is None:
        layout = _LINK_LAYOUTS[w] = struct.Struct(f">BQBQQBQQBQ{w}sBQ{w}s")
    body = layout.size - 9
    return suite.hash(layout.pack(TAG_SEQ, body, TAG_UINT, 8, i, TAG_UINT, 8, j,
                                  TAG_BYTES, w, value, TAG_BYTES, w, prev))


def combine_links(suite: Suite, index: int, links) -> bytes:
    """Authenticator of element ``index`` from its full link list."""
    if index & 1:
        return links[0]
    w = suite.width
    for x in links:
        if len(x) != w:
            return suite.h(*links)
    head = _DIGEST_HEAD.get(w) or _DIGEST_HEAD.setdefault(w, _REC_HEAD.pack(TAG_BYTES, w))
    body = head + head.join(links)
    return suite.hash(_REC_HEAD.pack(TAG_SEQ, len(body)) + body)


def replay(proof: SkipListProof, t_start: bytes, suite: Suite = DEFAULT_SUITE
           ) -> list[tuple[int, bytes]] | None:
    """Recompute the authenticator at every hop of ``proof``.

    Returns ``[(index, T_index), ...]`` for each hop, or ``None`` if the
    proof is malformed.  The caller compares the last value with the
    expected end authenticator.
    """
    if not isinstance(proof, SkipListProof) or proof.start < 0 or proof.end < proof.start:
        return None
    if not suite.is_digest(t_start):
        return None
    out = []
    width = suite.width
    c, t = proof.start, t_start
    for hop in proof.hops:
        z, k, value = hop.level, hop.index, hop.value
        if z < 0 or z > 63 or k != c + (1 << z) or c % (1 << z):
            return None
        if len(hop.links) != level(k) or type(value) is not bytes or len(value) != width:
            return None
        for x in hop.links:
            if type(x) is not bytes or len(x) != width:
                return None
        link = link_digest(suite, k, z, value, t)
        links = hop.links[:z] + (link,) + hop.links[z:]
        t = combine_links(suite, k, links)
        out.append((k, t))
        c = k
    if c != proof.end:
        return None
    return out


def verify(proof: SkipListProof, t_start: bytes, t_end: bytes,
           suite: Suite = DEFAULT_SUITE) -> bool:
    """True iff ``proof`` is a one-way path from ``t_start`` to ``t_end``."""
    steps = replay(proof, t_start, suite)
    if steps is None:
        return False
    final = steps[-1][1] if steps else t_start
    return final == t_end


@dataclass(frozen=True)
class Element:
    index: int
    value: bytes
    links: tuple[bytes, ...]
    authenticator: bytes
    aux: bytes = b""

    def to_wire(self) -> list:
        # odd elements store their authenticator once, as link 0
        stored = None if self.index & 1 else self.authenticator
        return [self.index, self.value, list(self.links), stored, self.aux]


class SkipList:
    """A persisted authenticated append-only skip list.

    Use :meth:`create` / :meth:`open` for an on-disk store and
    :meth:`memory` for an in-memory one.  A single writer may append while
    readers use the committed prefix ``1..len(self)``.
    """

    CACHE_LIMIT = 4096

    def __init__(self, data: Backing, index: Backing, suite: Suite = DEFAULT_SUITE,
                 genesis: bytes | None = None):
        self.suite = suite
        self._data = data
        self._index = index
        self._cache: dict[int, Element] = {}
        if data.size() == 0:
            self.genesis = genesis if genesis is not None else suite.zero
            if not suite.is_digest(self.genesis):
                raise ValueError("genesis digest has the wrong width")
            header = _HEAD.pack(MAGIC, FORMAT_VERSION, suite.hash_tag, suite.width) + self.genesis
            data.append(header)
            index.truncate(0)
            data.sync()
        else:
            self.genesis = self._read_header(genesis)
        self._header_len = _HEAD.size + suite.width
        self._offsets = array("Q")
        self._auth = bytearray(self.genesis)
        self._recover()

    # -- construction -----------------------------------------------------

    @classmethod
    def memory(cls, suite: Suite = DEFAULT_SUITE, genesis: bytes | None = None) -> "SkipList":
        return cls(MemoryBacking(counters=suite.counters), MemoryBacking(counters=suite.counters),
                   suite, genesis)

    @classmethod
    def create(cls, path: str | os.PathLike, suite: Suite = DEFAULT_SUITE,
               genesis: bytes | None = None, fsync: bool = False) -> "SkipList":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        if (path / "data").exists() and (path / "data").stat().st_size:
            raise FileExistsError(f"skip list already exists at {path}")
        return cls.open(path, suite, genesis, fsync)

    @classmethod
    def open(cls, path: str | os.PathLike, suite: Suite = DEFAULT_SUITE,
             genesis: bytes | None = None, fsync: bool = False) -> "SkipList":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        data = FileBacking(path / "data", fsync, suite.counters)
        index = FileBacking(path / "index", fsync, suite.counters)
        return cls(data, index, suite, genesis)

    def clone(self, suite: Suite | None = None) -> "SkipList":
        """Independent in-memory copy (used to fork a simulated node)."""
        suite = suite or self.suite
        return SkipList(MemoryBacking(self._data.getvalue(), suite.counters),
                        MemoryBacking(self._index.getvalue(), suite.counters), suite)

    def close(self) -> None:
        self._data.close()
        self._index.close()

    def _read_header(self, genesis: bytes | None) -> bytes:
        head = self._data.read(0, _HEAD.size)
        magic, version, tag, width = _HEAD.unpack(head)
        if magic != MAGIC or version != FORMAT_VERSION:
            raise StoreFormatError("not a skip list data file")
        if tag != self.suite.hash_tag or width != self.suite.width:
            raise StoreFormatError("store was written with a different hash configuration")
        stored = self._data.read(_HEAD.size, width)
        if genesis is not None and genesis != stored:
            raise StoreFormatError("genesis digest does not match the store")
        return stored

    def _recover(self) -> None:
        """Drop any uncommitted tail and rebuild the in-memory caches."""
        whole = self._index.size() // _OFF.size
        if self._index.size() != whole * _OFF.size:
            self._index.truncate(whole * _OFF.size)
        raw = self._index.read(0, whole * _OFF.size) if whole else b""
        offsets = array("Q", raw)
        if struct.pack("=H", 1) != struct.pack(">H", 1):
            offsets.byteswap()
        end = self._header_len
        for pos, offset in enumerate(offsets, start=1):
            element = self._read_record(offset)
            if element.index != pos:
                raise StoreFormatError(f"record {pos} carries index {element.index}")
            self._auth += element.authenticator
            end = offset + _REC_HEAD.size + _REC_HEAD.unpack(self._data.read(offset, _REC_HEAD.size))[1]
        self._offsets = offsets
        if self._data.size() > end:
            self._data.truncate(end)

    # -- reads ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._offsets)

    @property
    def head(self) -> bytes:
        """Authenticator of the last element (genesis when empty)."""
        return self.authenticator(len(self))

    def authenticator(self, i: int) -> bytes:
        if i < 0 or i > len(self):
            raise RangeError(f"no element {i} (size {len(self)})")
        w = self.suite.width
        return bytes(self._auth[i * w:(i + 1) * w])

    def element(self, i: int) -> Element:
        if i < 1 or i > len(self):
            raise RangeError(f"no element {i} (size {len(self)})")
        cached = self._cache.get(i)
        if cached is None:
            cached = self._read_record(self._offsets[i - 1])
            if len(self._cache) >= self.CACHE_LIMIT:
                self._cache.clear()
            self._cache[i] = cached
        return cached

    def value(self, i: int) -> bytes:
        return self.element(i).value

    def aux(self, i: int) -> bytes:
        return self.element(i).aux

    def __iter__(self) -> Iterator[Element]:
        for i in range(1, len(self) + 1):
            yield self.element(i)

    def _read_record(self, offset: int) -> Element:
        tag, length = _REC_HEAD.unpack(self._data.read(offset, _REC_HEAD.size))
        body = self._data.read(offset, _REC_HEAD.size + length)
        try:
            index, value, links, stored, aux = decode(body)
        except (DecodeError, ValueError) as exc:
            raise StoreFormatError(f"corrupt record at offset {offset}") from exc
        links = tuple(links)
        auth = links[0] if index & 1 else stored
        return Element(index, value, links, auth, aux)

    # -- writes -----------------------------------------------------------

    def compute_links(self, i: int, value: bytes) -> tuple[bytes, ...]:
        """Links of a prospective element ``i`` over the committed prefix."""
        return tuple(link_digest(self.suite, i, j, value, self.authenticator(i - (1 << j)))
                     for j in range(level(i) + 1))

    def append(self, value: bytes, aux: bytes = b"") -> tuple[int, bytes]:
        """Append ``value``; return ``(index, authenticator)``.

        ``aux`` is stored alongside the element but is never hashed.
        """
        if not self.suite.is_digest(value):
            raise ValueError("element value must be a digest of the configured width")
        i = len(self) + 1
        links = self.compute_links(i, value)
        auth = combine_links(self.suite, i, links)
        element = Element(i, value, links, auth, bytes(aux))
        record = encode(element)
        data_size = self._data.size()
        try:
            offset = self._data.append(record)
        except OSError:
            self._data.truncate(data_size)
            raise
        try:
            self._index.append(_OFF.pack(offset))
        except OSError:
            self._index.truncate((i - 1) * _OFF.size)
            self._data.truncate(data_size)
            raise
        self._offsets.append(offset)
        self._auth += auth
        return i, auth

    def truncate(self, n: int) -> None:
        """Roll back to the first ``n`` elements (undo of an uncommitted step)."""
        if n < 0 or n > len(self):
            raise RangeError(f"cannot truncate a list of {len(self)} to {n}")
        if n == len(self):
            return
        self._index.truncate(n * _OFF.size)
        self._data.truncate(self._offsets[n])
        del self._offsets[n:]
        del self._auth[(n + 1) * self.suite.width:]
        self._cache.clear()

    # -- proofs -----------------------------------------------------------

    def prove_precedence(self, i: int, j: int) -> SkipListProof:
        """One-way path from ``T_i`` to ``T_j``; ``i == 0`` anchors at genesis."""
        if i < 0 or i > j or j > len(self):
            raise RangeError(f"cannot prove {i} -> {j} in a list of {len(self)}")
        hops = []
        for k, z in jump_path(i, j):
            element = self.element(k)
            hops.append(Hop(k, element.value, element.links[:z] + element.links[z + 1:], z))
        return SkipListProof(i, j, tuple(hops))

    def prove_existence(self, i: int) -> SkipListProof:
        """Proof that element ``i`` precedes the current head."""
        if i < 1 or i > len(self):
            raise RangeError(f"no element {i} (size {len(self)})")
        return self.prove_precedence(i, len(self))

    def element_hop(self, i: int) -> Hop:
        """The level-0 hop landing on ``i``: ``d_i`` plus links ``1..l``."""
        element = self.element(i)
        return Hop(i, element.value, element.links[1:], 0)

    def files(self) -> tuple[bytes, bytes]:
        """Raw bytes of the data and index files (for determinism checks)."""
        return self._data.getvalue(), self._index.getvalue()

