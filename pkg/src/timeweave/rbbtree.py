"""RBB-Trees: a persistent authenticated search tree embedded in a B-tree.

Keys live in disk blocks of a B-tree of minimum degree ``r``.  Inside each
block the keys form a small balanced binary tree; the leaf gaps of that
tree point at the child blocks, so the per-block trees stitch together
into one "virtual" binary search tree over every key.  That virtual tree
is authenticated bottom-up::

    label(node) = h(label(left), h(key), h(value), label(right))
    label(NIL)  = freshness authenticator current when the node was created

Mutations go to an open snapshot.  ``close_snapshot`` materializes new
block versions (copy-on-write per key node inside a block, per version
slot across blocks) and appends the new root label to a skip list whose
head digests the tree's whole history.
"""

from __future__ import annotations

import os
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .canon import DEFAULT_SUITE, DecodeError, Suite, decode, decode_prefix, encode
from .skiplist import SkipList
from .storage import FileBacking

OPEN = -1
MAGIC = b"TWRB"
FORMAT_VERSION = 1
LEFT, RIGHT = 0, 1


class UnknownSnapshot(KeyError):
    pass


@dataclass(frozen=True)
class RbbConfig:
    """Block geometry.

    ``order`` (r) and ``key_slots`` are derived from the block size and
    digest width unless given.  A key-node slot is nominally
    ``2 * width + 16`` bytes and the block header reserves ``64 + 32 * V``.
    """

    block_size: int = 16384
    versions: int = 3
    order: int | None = None
    key_slots: int | None = None

    def resolve(self, width: int) -> tuple[int, int]:
        if self.order is not None:
            r = self.order
            slots = self.key_slots or max(2 * r - 1, 3 * r)
        else:
            slots = (self.block_size - 64 - 32 * self.versions) // (2 * width + 16)
            r = (slots + 1) // 2
            slots = self.key_slots or slots
        if r < 2:
            raise ValueError("RBB-tree order must be at least 2")
        if slots < 2 * r - 1:
            raise ValueError("a block must hold at least 2r-1 key nodes")
        if self.versions < 1:
            raise ValueError("at least one version slot per block")
        return r, slots

    def to_wire(self) -> list:
        return [self.block_size, self.versions, self.order, self.key_slots]


class KeyNode:
    """One immutable key node of the virtual tree.

    ``left``/``right`` are another :class:`KeyNode` (same block), an ``int``
    child block id (a leaf gap of an internal block) or ``None`` (NIL).
    ``lbl_left``/``lbl_right`` are the child labels folded into ``label``.
    """

    __slots__ = ("key", "value", "kdigest", "vdigest", "left", "right",
                 "lbl_left", "lbl_right", "freshness", "label", "value_ref")

    def __init__(self, key, value, kdigest, vdigest, left, right, lbl_left, lbl_right,
                 freshness, label):
        self.key = key
        self.value = value
        self.kdigest = kdigest
        self.vdigest = vdigest
        self.left = left
        self.right = right
        self.lbl_left = lbl_left
        self.lbl_right = lbl_right
        self.freshness = freshness
        self.label = label
        self.value_ref = None  # heap offset once written to a file store

    def child(self, side: int):
        return self.left if side == LEFT else self.right

    def child_label(self, side: int) -> bytes:
        return self.lbl_left if side == LEFT else self.lbl_right


@dataclass(eq=False)
class Version:
    snap: int
    root: KeyNode | None
    root_label: bytes
    _inorder: list | None = field(default=None, repr=False)
    _by_key: dict | None = field(default=None, repr=False)

    def nodes(self) -> list[KeyNode]:
        """Key nodes in key order."""
        if self._inorder is None:
            out: list[KeyNode] = []
            stack, node = [], self.root
            while stack or isinstance(node, KeyNode):
                while isinstance(node, KeyNode):
                    stack.append(node)
                    node = node.left
                node = stack.pop()
                out.append(node)
                node = node.right
            self._inorder = out
        return self._inorder

    @property
    def keys(self) -> list[bytes]:
        return [n.key for n in self.nodes()]

    @property
    def values(self) -> list[bytes]:
        return [n.value for n in self.nodes()]

    def children(self) -> list[int] | None:
        """Child block ids in gap order, or ``None`` for a leaf block."""
        nodes = self.nodes()
        if not nodes or nodes[0].left is None:
            return None
        out = []
        for n in nodes:
            if isinstance(n.left, int):
                out.append(n.left)
            if isinstance(n.right, int):
                out.append(n.right)
        return out


@dataclass(eq=False)
class Block:
    id: int
    versions: list[Version] = field(default_factory=list)
    nodes: set = field(default_factory=set)  # distinct key nodes stored here

    def version_at(self, snap: int) -> Version:
        snaps = [v.snap for v in self.versions]
        pos = bisect_right(snaps, snap) - 1
        if pos < 0:
            raise UnknownSnapshot(f"block {self.id} has no version at snapshot {snap}")
        return self.versions[pos]

    @property
    def latest(self) -> Version:
        return self.versions[-1]


@dataclass(eq=False)
class _Work:
    """Mutable working copy of a block in the open snapshot."""

    id: int                 # committed block id, or negative for a new block
    origin: int | None      # committed block whose nodes may be reused
    keys: list[bytes]
    values: list[bytes]
    children: list[int] | None


@dataclass(frozen=True)
class Step:
    key: bytes
    vdigest: bytes
    sibling: bytes
    direction: int

    def to_wire(self) -> list:
        return [self.key, self.vdigest, self.sibling, self.direction]


@dataclass(frozen=True)
class TreeProof:
    """Descent from the snapshot root to a NIL gap.

    For an existence proof the step at ``match`` holds the key; the path
    then turns right and runs left to the NIL gap right after the key, so
    every proof ends at a freshness label (``terminal``).
    """

    key: bytes
    steps: tuple[Step, ...]
    terminal: bytes
    match: int | None = None

    @property
    def exists(self) -> bool:
        return self.match is not None

    @property
    def digest_count(self) -> int:
        return 2 * len(self.steps) + 1

    @property
    def value_digest(self) -> bytes | None:
        return None if self.match is None else self.steps[self.match].vdigest

    def to_wire(self) -> list:
        return [self.key, [s.to_wire() for s in self.steps], self.terminal, self.match]

    @classmethod
    def from_wire(cls, wire) -> "TreeProof":
        try:
            key, steps, terminal, match = wire
            parsed = []
            for s in steps:
                k, vd, sib, d = s
                if not (isinstance(k, bytes) and isinstance(vd, bytes) and isinstance(sib, bytes)
                        and d in (LEFT, RIGHT)):
                    raise DecodeError("bad step")
                parsed.append(Step(k, vd, sib, d))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad tree proof") from exc
        if not (isinstance(key, bytes) and isinstance(terminal, bytes)
                and (match is None or isinstance(match, int))):
            raise DecodeError("bad tree proof")
        return cls(key, tuple(parsed), terminal, match)


@dataclass(frozen=True)
class RbbSnapshot:
    id: int
    root_label: bytes
    root_block: int


def node_label(suite: Suite, lbl_left: bytes, kdigest: bytes, vdigest: bytes, lbl_right: bytes) -> bytes:
    return suite.h(lbl_left, kdigest, vdigest, lbl_right)


def verify_tree_proof(proof: TreeProof, root_label: bytes, key: bytes,
                      suite: Suite = DEFAULT_SUITE) -> tuple[bool, bytes | None]:
    """Check ``proof`` for ``key`` against ``root_label``.

    Returns ``(ok, value_digest)``; ``value_digest`` is set only for a valid
    existence proof.  Any inconsistency yields ``(False, None)``.
    """
    if not isinstance(proof, TreeProof) or proof.key != key:
        return False, None
    if not suite.is_digest(proof.terminal) or not suite.is_digest(root_label):
        return False, None
    steps = proof.steps
    match = proof.match
    if match is not None and not (0 <= match < len(steps)):
        return False, None
    lo = hi = None
    for idx, step in enumerate(steps):
        if not (suite.is_digest(step.vdigest) and suite.is_digest(step.sibling)):
            return False, None
        if (lo is not None and step.key <= lo) or (hi is not None and step.key >= hi):
            return False, None
        if match is None or idx < match:
            if step.key == key or step.direction != (LEFT if key < step.key else RIGHT):
                return False, None
        elif idx == match:
            if step.key != key or step.direction != RIGHT:
                return False, None
        elif step.direction != LEFT:
            return False, None
        if step.direction == LEFT:
            hi = step.key
        else:
            lo = step.key
    label = proof.terminal
    for step in reversed(steps):
        kd = suite.h(step.key)
        if step.direction == LEFT:
            label = node_label(suite, label, kd, step.vdigest, step.sibling)
        else:
            label = node_label(suite, step.sibling, kd, step.vdigest, label)
    if label != root_label:
        return False, None
    return True, proof.value_digest


def _same_child(old, old_label: bytes, new, new_label: bytes) -> bool:
    """Whether a reused node's child slot would still hash the same."""
    if new is None:
        return old is None  # a NIL keeps the freshness it was created with
    if isinstance(new, KeyNode):
        return old is new
    return isinstance(old, int) and not isinstance(old, bool) and old == new and old_label == new_label


def red_nodes(version: Version) -> set:
    """Canonical red-black coloring of a block's balanced in-node tree.

    Colors are not hashed; nodes on the deepest level of a non-perfect tree
    are red, all others black.
    """
    nodes = version.nodes()
    height = len(nodes).bit_length()
    if len(nodes) == (1 << height) - 1:
        return set()
    red = set()
    frontier, depth = [version.root], 0
    while frontier:
        nxt = []
        for n in frontier:
            if depth == height - 1:
                red.add(n)
            for c in (n.left, n.right):
                if isinstance(c, KeyNode):
                    nxt.append(c)
        frontier, depth = nxt, depth + 1
    return red


class RbbTree:
    """Disk-based persistent authenticated dictionary.

    ``RbbTree.memory()`` keeps everything in memory; ``RbbTree.create`` /
    ``RbbTree.open`` persist blocks, values and the snapshot root skip list
    under a directory.
    """

    def __init__(self, suite: Suite = DEFAULT_SUITE, config: RbbConfig = RbbConfig(),
                 snapshots: SkipList | None = None, path: str | os.PathLike | None = None,
                 fsync: bool = False):
        self.suite = suite
        self.config = config
        self.r, self.key_slots = config.resolve(suite.width)
        self.snapshots = snapshots if snapshots is not None else SkipList.memory(suite)
        self.blocks: dict[int, Block] = {}
        self._next_id = 0
        self._next_temp = -2
        self._root_id: int | None = None
        self._work: dict[int, _Work] = {}
        self._changed: set[bytes] = set()
        self._freshness = self.snapshots.head
        self._path = Path(path) if path is not None else None
        self._blocks_file: FileBacking | None = None
        self._values_file: FileBacking | None = None
        if self._path is not None:
            self._open_files(fsync)
        if self._root_id is None:
            self._root_id = self._new_temp([], [], None, origin=None)

    # -- construction -----------------------------------------------------

    @classmethod
    def memory(cls, suite: Suite = DEFAULT_SUITE, config: RbbConfig = RbbConfig()) -> "RbbTree":
        return cls(suite, config)

    @classmethod
    def create(cls, path, suite: Suite = DEFAULT_SUITE, config: RbbConfig = RbbConfig(),
               fsync: bool = False) -> "RbbTree":
        path = Path(path)
        if (path / "meta").exists():
            raise FileExistsError(f"RBB-tree already exists at {path}")
        path.mkdir(parents=True, exist_ok=True)
        meta = encode([MAGIC, FORMAT_VERSION, config, suite.hash_tag, suite.width])
        (path / "meta").write_bytes(meta)
        return cls.open(path, suite, fsync=fsync)

    @classmethod
    def open(cls, path, suite: Suite = DEFAULT_SUITE, fsync: bool = False) -> "RbbTree":
        path = Path(path)
        magic, version, cfg, tag, width = decode((path / "meta").read_bytes())
        if magic != MAGIC or version != FORMAT_VERSION:
            raise ValueError(f"{path} is not an RBB-tree")
        if tag != suite.hash_tag or width != suite.width:
            raise ValueError("RBB-tree was written with a different hash configuration")
        config = RbbConfig(*cfg)
        snapshots = SkipList.open(path / "snapshots", suite, fsync=fsync)
        return cls(suite, config, snapshots, path, fsync)

    def close(self) -> None:
        self.snapshots.close()
        for f in (self._blocks_file, self._values_file):
            if f is not None:
                f.close()

    def clone(self, suite: Suite | None = None) -> "RbbTree":
        """In-memory copy sharing immutable key nodes (for forking nodes)."""
        suite = suite or self.suite
        twin = RbbTree(suite, self.config, self.snapshots.clone(suite))
        twin.blocks = {bid: Block(bid, list(b.versions), set(b.nodes)) for bid, b in self.blocks.items()}
        twin._next_id = self._next_id
        twin._next_temp = self._next_temp
        twin._root_id = self._root_id
        twin._work = {bid: _Work(w.id, w.origin, list(w.keys), list(w.values),
                                 None if w.children is None else list(w.children))
                      for bid, w in self._work.items()}
        twin._changed = set(self._changed)
        twin._freshness = self._freshness
        return twin

    # -- snapshot bookkeeping ---------------------------------------------

    def __len__(self) -> int:
        """Number of committed snapshots."""
        return len(self.snapshots)

    def digest(self) -> bytes:
        """One-way digest of the whole history: the snapshot list head."""
        return self.snapshots.head

    @property
    def freshness(self) -> bytes:
        return self._freshness

    def set_freshness(self, digest: bytes) -> None:
        if not self.suite.is_digest(digest):
            raise ValueError("freshness authenticator has the wrong width")
        self._freshness = digest

    def snapshot(self, snap: int) -> RbbSnapshot:
        self._check_snap(snap)
        return RbbSnapshot(snap, self.snapshots.value(snap), decode(self.snapshots.aux(snap)))

    def root_label(self, snap: int) -> bytes:
        self._check_snap(snap)
        return self.snapshots.value(snap)

    def _check_snap(self, snap: int) -> None:
        if not (1 <= snap <= len(self.snapshots)):
            raise UnknownSnapshot(f"no committed snapshot {snap}")

    def truncate(self, n: int) -> None:
        """Drop snapshots after ``n`` and any open work (step rollback)."""
        if n > len(self.snapshots):
            raise UnknownSnapshot(f"cannot truncate {len(self.snapshots)} snapshots to {n}")
        self.snapshots.truncate(n)
        for bid in list(self.blocks):
            block = self.blocks[bid]
            keep = [v for v in block.versions if v.snap <= n]
            if not keep:
                del self.blocks[bid]
                if self._blocks_file is not None:
                    self._blocks_file.append(encode([bid, [[], []]]))
            elif len(keep) != len(block.versions):
                nodes = set()
                for v in keep:
                    nodes.update(v.nodes())
                self.blocks[bid] = Block(bid, keep, nodes)
                if self._blocks_file is not None:
                    self._write_block(self.blocks[bid])
        if self._blocks_file is not None:
            self._blocks_file.sync()
        self._work.clear()
        self._changed.clear()
        if n:
            self._root_id = decode(self.snapshots.aux(n))
        else:
            self._root_id = self._new_temp([], [], None, origin=None)
        self._freshness = self.snapshots.head

    # -- open-snapshot view -----------------------------------------------

    def _new_temp(self, keys, values, children, origin) -> int:
        bid = self._next_temp
        self._next_temp -= 1
        self._work[bid] = _Work(bid, origin, keys, values, children)
        return bid

    def _view(self, bid: int) -> _Work:
        w = self._work.get(bid)
        if w is not None:
            return w
        self.suite.counters["blocks_read"] += 1
        v = self.blocks[bid].latest
        return _Work(bid, bid, v.keys, v.values, v.children())

    def _mut(self, bid: int) -> _Work:
        w = self._work.get(bid)
        if w is None:
            v = self._view(bid)
            w = _Work(bid, bid, list(v.keys), list(v.values),
                      None if v.children is None else list(v.children))
            self._work[bid] = w
        return w

    def _find(self, key: bytes) -> tuple[list[tuple[int, int]], bool]:
        """Search path of ``key`` in the open view: ``[(block, slot)]``, found."""
        path = []
        bid = self._root_id
        while True:
            w = self._view(bid)
            i = bisect_left(w.keys, key)
            path.append((bid, i))
            if i < len(w.keys) and w.keys[i] == key:
                return path, True
            if w.children is None:
                return path, False
            bid = w.children[i]

    # -- mutation -----------------------------------------------------------

    def insert(self, key: bytes, value: bytes) -> None:
        """Insert or overwrite ``key`` in the open snapshot."""
        key, value = bytes(key), bytes(value)
        self._changed.add(key)
        path, found = self._find(key)
        if found:
            bid, i = path[-1]
            w = self._mut(bid)
            w.values[i] = value
            return
        root = self._view(self._root_id)
        if len(root.keys) == 2 * self.r - 1:
            new_root = self._new_temp([], [], [self._root_id], origin=None)
            self._split_child(self._work[new_root], 0)
            self._root_id = new_root
        self._insert_nonfull(self._root_id, key, value)

    def _split_child(self, parent: _Work, i: int) -> None:
        r = self.r
        child = self._mut(parent.children[i])
        sib_children = None if child.children is None else child.children[r:]
        sibling = self._new_temp(child.keys[r:], child.values[r:], sib_children, origin=child.origin)
        parent.keys.insert(i, child.keys[r - 1])
        parent.values.insert(i, child.values[r - 1])
        parent.children.insert(i + 1, sibling)
        del child.keys[r - 1:], child.values[r - 1:]
        if child.children is not None:
            del child.children[r:]

    def _insert_nonfull(self, bid: int, key: bytes, value: bytes) -> None:
        while True:
            w = self._mut(bid)
            i = bisect_left(w.keys, key)
            if w.children is None:
                w.keys.insert(i, key)
                w.values.insert(i, value)
                return
            if len(self._view(w.children[i]).keys) == 2 * self.r - 1:
                self._split_child(w, i)
                if key > w.keys[i]:
                    i += 1
            bid = w.children[i]

    def remove(self, key: bytes) -> None:
        """Remove ``key`` from the open snapshot; absent keys are a no-op."""
        key = bytes(key)
        _, found = self._find(key)
        if not found:
            return
        self._changed.add(key)
        self._delete(self._root_id, key)
        root = self._view(self._root_id)
        if not root.keys and root.children is not None:
            self._root_id = root.children[0]

    def _delete(self, bid: int, key: bytes) -> None:
        r = self.r
        while True:
            w = self._mut(bid)
            i = bisect_left(w.keys, key)
            if i < len(w.keys) and w.keys[i] == key:
                if w.children is None:
                    del w.keys[i], w.values[i]
                    return
                left, right = w.children[i], w.children[i + 1]
                if len(self._view(left).keys) >= r:
                    pk, pv = self._extreme(left, last=True)
                    w.keys[i], w.values[i] = pk, pv
                    bid, key = left, pk
                elif len(self._view(right).keys) >= r:
                    sk, sv = self._extreme(right, last=False)
                    w.keys[i], w.values[i] = sk, sv
                    bid, key = right, sk
                else:
                    self._merge(w, i)
                    bid = left
                continue
            if w.children is None:
                return
            if len(self._view(w.children[i]).keys) == r - 1:
                i = self._fill(w, i)
            bid = w.children[i]

    def _extreme(self, bid: int, last: bool) -> tuple[bytes, bytes]:
        while True:
            w = self._view(bid)
            if w.children is None:
                return (w.keys[-1], w.values[-1]) if last else (w.keys[0], w.values[0])
            bid = w.children[-1] if last else w.children[0]

    def _merge(self, w: _Work, i: int) -> None:
        left = self._mut(w.children[i])
        right = self._view(w.children[i + 1])
        left.keys += [w.keys[i]] + list(right.keys)
        left.values += [w.values[i]] + list(right.values)
        if left.children is not None:
            left.children += list(right.children)
        self._work.pop(w.children[i + 1], None)
        del w.keys[i], w.values[i], w.children[i + 1]

    def _fill(self, w: _Work, i: int) -> int:
        """Give child ``i`` at least ``r`` keys; return its (possibly new) index."""
        r = self.r
        if i > 0 and len(self._view(w.children[i - 1]).keys) >= r:
            child, sib = self._mut(w.children[i]), self._mut(w.children[i - 1])
            child.keys.insert(0, w.keys[i - 1])
            child.values.insert(0, w.values[i - 1])
            w.keys[i - 1], w.values[i - 1] = sib.keys.pop(), sib.values.pop()
            if child.children is not None:
                child.children.insert(0, sib.children.pop())
            return i
        if i < len(w.children) - 1 and len(self._view(w.children[i + 1]).keys) >= r:
            child, sib = self._mut(w.children[i]), self._mut(w.children[i + 1])
            child.keys.append(w.keys[i])
            child.values.append(w.values[i])
            w.keys[i], w.values[i] = sib.keys.pop(0), sib.values.pop(0)
            if child.children is not None:
                child.children.append(sib.children.pop(0))
            return i
        if i < len(w.children) - 1:
            self._merge(w, i)
            return i
        self._merge(w, i - 1)
        return i - 1

    # -- commit -------------------------------------------------------------

    def _mark_dirty(self) -> set[bytes]:
        """Changed keys plus their in-order neighbours, with their leaves touched.

        The NIL gap next to an inserted key (or where a removed key used to
        be) belongs to whichever neighbour sits in a leaf block; rebuilding
        those nodes gives that gap the current freshness label.
        """
        dirty: set[bytes] = set()
        for key in sorted(self._changed):
            for k in self._neighbourhood(key):
                path, found = self._find(k)
                if found and self._view(path[-1][0]).children is None:
                    self._mut(path[-1][0])
                    for bid, _ in path:
                        self._mut(bid)
                    dirty.add(k)
        return dirty

    def _neighbourhood(self, key: bytes) -> list[bytes]:
        """``key`` (if present) and its predecessor and successor."""
        out = []
        pred = succ = None
        bid = self._root_id
        while True:
            w = self._view(bid)
            i = bisect_left(w.keys, key)
            if i < len(w.keys) and w.keys[i] == key:
                out.append(key)
                if w.children is not None:
                    pred = self._extreme(w.children[i], last=True)[0]
                    succ = self._extreme(w.children[i + 1], last=False)[0]
                else:
                    if i > 0:
                        pred = w.keys[i - 1]
                    if i + 1 < len(w.keys):
                        succ = w.keys[i + 1]
                break
            if i > 0:
                pred = w.keys[i - 1]
            if i < len(w.keys):
                succ = w.keys[i]
            if w.children is None:
                break
            bid = w.children[i]
        return out + [k for k in (pred, succ) if k is not None]

    def close_snapshot(self) -> RbbSnapshot:
        """Commit the open snapshot and return its descriptor."""
        snap = len(self.snapshots) + 1
        dirty = self._mark_dirty()
        written: list[Block] = []
        root_id, root_label = self._build(self._root_id, snap, dirty, written)
        if self._blocks_file is not None:
            for block in written:
                self._write_block(block)
            self._blocks_file.sync()
            self._values_file.sync()
        self.snapshots.append(root_label, aux=encode(root_id))
        for block in written:
            self.blocks[block.id] = block
        self._root_id = root_id
        self._work.clear()
        self._changed.clear()
        self._freshness = self.snapshots.head
        return RbbSnapshot(snap, root_label, root_id)

    def _build(self, bid: int, snap: int, dirty: set[bytes], written: list[Block]
               ) -> tuple[int, bytes]:
        w = self._work.get(bid)
        if w is None:
            return bid, self.blocks[bid].latest.root_label
        child_labels: dict[int, bytes] = {}
        children = None
        if w.children is not None:
            children = []
            for c in w.children:
                cid, clabel = self._build(c, snap, dirty, written)
                children.append(cid)
                child_labels[cid] = clabel
        origin = self.blocks.get(w.origin) if w.origin is not None else None
        old = self._nodes_by_key(origin.latest) if origin is not None else {}
        fresh = self._freshness
        suite = self.suite
        created: list[KeyNode] = []
        keys, values = w.keys, w.values

        def gap(g: int):
            if children is None:
                return None, fresh
            cid = children[g]
            return cid, child_labels[cid]

        def build(lo: int, hi: int):
            if lo == hi:
                return gap(lo)
            mid = (lo + hi) // 2
            left, lbl_left = build(lo, mid)
            right, lbl_right = build(mid + 1, hi)
            key, value = keys[mid], values[mid]
            prev = old.get(key)
            if (prev is not None and key not in dirty and prev.value == value
                    and _same_child(prev.left, prev.lbl_left, left, lbl_left)
                    and _same_child(prev.right, prev.lbl_right, right, lbl_right)):
                return prev, prev.label
            kd = prev.kdigest if prev is not None else suite.h(key)
            vd = prev.vdigest if prev is not None and prev.value == value else suite.h(value)
            if left is None:
                lbl_left = fresh
            if right is None:
                lbl_right = fresh
            node = KeyNode(key, value, kd, vd, left, right, lbl_left, lbl_right,
                           fresh if (left is None or right is None) else None,
                           node_label(suite, lbl_left, kd, vd, lbl_right))
            created.append(node)
            return node, node.label

        root, label = build(0, len(keys))
        if not isinstance(root, KeyNode):
            root, label = None, fresh
        version = Version(snap, root, label)
        reachable = set(version.nodes())
        target = None
        if w.id >= 0:
            block = self.blocks[w.id]
            if (len(block.versions) < self.config.versions
                    and len(block.nodes | reachable) <= self.key_slots):
                target = Block(block.id, block.versions + [version], block.nodes | reachable)
        if target is None:
            target = Block(self._next_id, [version], reachable)
            self._next_id += 1
        self.suite.counters["blocks_written"] += 1
        self.suite.counters["key_nodes_created"] += len(created)
        written.append(target)
        return target.id, label

    def _nodes_by_key(self, version: Version) -> dict[bytes, KeyNode]:
        if version._by_key is None:
            version._by_key = {n.key: n for n in version.nodes()}
        return version._by_key

    # -- queries ------------------------------------------------------------

    def _root_at(self, snap: int) -> tuple[KeyNode | None, bytes]:
        self._check_snap(snap)
        bid = decode(self.snapshots.aux(snap))
        self.suite.counters["blocks_read"] += 1
        v = self.blocks[bid].version_at(snap)
        return v.root, v.root_label

    def _descend_child(self, ref, snap: int):
        if isinstance(ref, int):
            self.suite.counters["blocks_read"] += 1
            return self.blocks[ref].version_at(snap).root
        return ref

    def lookup(self, snap: int, key: bytes) -> bytes | None:
        """Value of ``key`` as of snapshot ``snap`` (or ``OPEN``), else ``None``."""
        key = bytes(key)
        if snap == OPEN:
            path, found = self._find(key)
            if not found:
                return None
            bid, i = path[-1]
            return self._view(bid).values[i]
        node, _ = self._root_at(snap)
        while node is not None:
            if key == node.key:
                return node.value
            node = self._descend_child(node.left if key < node.key else node.right, snap)
        return None

    def prove(self, snap: int, key: bytes) -> TreeProof:
        """Existence or absence proof for ``key`` in committed snapshot ``snap``."""
        key = bytes(key)
        node, root_label = self._root_at(snap)
        steps: list[Step] = []
        terminal = root_label
        match = None
        while node is not None:
            if match is None and key == node.key:
                match = len(steps)
                side = RIGHT
            elif match is not None:
                side = LEFT
            else:
                side = LEFT if key < node.key else RIGHT
            other = RIGHT if side == LEFT else LEFT
            steps.append(Step(node.key, node.vdigest, node.child_label(other), side))
            terminal = node.child_label(side)
            node = self._descend_child(node.child(side), snap)
        return TreeProof(key, tuple(steps), terminal, match)

    def items(self, snap: int) -> Iterator[tuple[bytes, bytes]]:
        """All entries of a committed snapshot in key order."""
        root, _ = self._root_at(snap)

        def walk(node):
            if node is None:
                return
            if isinstance(node, int):
                yield from walk(self.blocks[node].version_at(snap).root)
                return
            yield from walk(node.left)
            yield node.key, node.value
            yield from walk(node.right)

        yield from walk(root)

    def depth(self, snap: int) -> int:
        """Number of key nodes on the longest root-to-NIL path of ``snap``."""
        root, _ = self._root_at(snap)

        def walk(node) -> int:
            if node is None:
                return 0
            if isinstance(node, int):
                return walk(self.blocks[node].version_at(snap).root)
            return 1 + max(walk(node.left), walk(node.right))

        return walk(root)

    def block_levels(self, snap: int) -> list[list[Version]]:
        """Block versions of ``snap`` grouped by B-tree level, root first."""
        bid = decode(self.snapshots.aux(snap))
        levels = [[self.blocks[bid].version_at(snap)]]
        while True:
            nxt = []
            for v in levels[-1]:
                for c in v.children() or []:
                    nxt.append(self.blocks[c].version_at(snap))
            if not nxt:
                return levels
            levels.append(nxt)

    # -- persistence ----------------------------------------------------------

    def _open_files(self, fsync: bool) -> None:
        from collections import Counter
        io_counters = Counter()
        self._blocks_file = FileBacking(self._path / "blocks", fsync, io_counters)
        self._values_file = FileBacking(self._path / "values", fsync, io_counters)
        committed = len(self.snapshots)
        latest: dict[int, list] = {}
        pos, data = 0, self._blocks_file.getvalue()
        while pos < len(data):
            try:
                record, nxt = decode_prefix(data, pos)
            except DecodeError:
                self._blocks_file.truncate(pos)
                break
            latest[record[0]] = record[1]
            pos = nxt
        for bid in sorted(latest):
            raw_versions, raw_nodes = latest[bid]
            versions = [v for v in raw_versions if v[0] <= committed]
            if versions:
                self.blocks[bid] = self._load_block(bid, versions, raw_nodes)
            self._next_id = max(self._next_id, bid + 1)
        if committed:
            self._root_id = decode(self.snapshots.aux(committed))
        self._freshness = self.snapshots.head

    def _write_block(self, block: Block) -> None:
        index: dict[int, int] = {}
        nodes: list[list] = []

        def ref(child):
            if child is None:
                return None
            if isinstance(child, int):
                return ["b", child]
            return ["n", index[id(child)]]

        def emit(node: KeyNode) -> None:
            if id(node) in index:
                return
            for c in (node.left, node.right):
                if isinstance(c, KeyNode):
                    emit(c)
            voff = self._value_ref(node)
            index[id(node)] = len(nodes)
            nodes.append([node.key, voff, node.kdigest, node.vdigest, ref(node.left),
                          ref(node.right), node.lbl_left, node.lbl_right, node.freshness,
                          node.label])

        versions = []
        for v in block.versions:
            if v.root is not None:
                emit(v.root)
            versions.append([v.snap, None if v.root is None else index[id(v.root)], v.root_label])
        self._blocks_file.append(encode([block.id, [versions, nodes]]))

    def _value_ref(self, node: KeyNode) -> list:
        if node.value_ref is None:
            node.value_ref = [self._values_file.append(node.value), len(node.value)]
        return node.value_ref

    def _load_block(self, bid: int, raw_versions, raw_nodes) -> Block:
        nodes: list[KeyNode] = []

        def ref(raw):
            if raw is None:
                return None
            kind, n = raw
            return n if kind == "b" else nodes[n]

        for key, (voff, vlen), kd, vd, left, right, lbl_l, lbl_r, fresh, label in raw_nodes:
            value = self._values_file.read(voff, vlen)
            node = KeyNode(key, value, kd, vd, ref(left), ref(right), lbl_l, lbl_r, fresh, label)
            node.value_ref = [voff, vlen]
            nodes.append(node)
        versions = [Version(snap, None if root is None else nodes[root], label)
                    for snap, root, label in raw_versions]
        reachable = set()
        for v in versions:
            reachable.update(v.nodes())
        return Block(bid, versions, reachable)
