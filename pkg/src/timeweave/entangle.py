"""Timeline entanglement: threads, receipts, archives and temporal mapping.

A *thread* announces a service's signed ``(i, T_i)`` to a peer together
with a precedence proof from a step the peer already knows.  The peer
archives it in its thread archive and answers with a *receipt* proving
that the archive snapshot holding the thread is the freshest one and
feeds the peer's next authenticator.

Each node keeps, per peer, a :class:`PeerView`: every peer step whose
authenticator it has verified, and the hops connecting them.  Temporal
mapping searches that graph.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable

from .canon import DecodeError, ServiceId, Suite, decode, decode_prefix, encode
from .rbbtree import RbbTree, TreeProof, verify_tree_proof
from .skiplist import Hop, SkipListProof, replay
from .storage import FileBacking
from .timeline import SignedTimeMark

if TYPE_CHECKING:
    from .node import Node

MAGIC = "timeweave"
PROTOCOL_VERSION = 1
THREAD, RECEIPT, BUNDLE, EVENT_PROOF, PRECEDENCE = 1, 2, 3, 4, 5
INCOMING, OUTGOING = 0, 1

# reject reasons
BAD_SIGNATURE = "bad-signature"
STALE_STEP = "stale-step"
BROKEN_PROOF = "broken-proof"
UNKNOWN_PEER = "unknown-peer"
STALE_ANCHOR = "stale-anchor"
ARCHIVE_PROOF_INVALID = "archive-proof-invalid"
NOT_FRESH = "not-fresh"
DERIVATION_MISMATCH = "derivation-mismatch"

# inconclusive mapping reasons
NO_LOWER_BOUND = "no-lower-bound"
NO_UPPER_BOUND = "no-upper-bound"
DETAILED_PROOF_NEEDED = "detailed-proof-needed"
EVENT_MISMATCH = "event-mismatch"


def pack(kind: int, body) -> bytes:
    """Wire form: message-type tag and protocol version ahead of the body."""
    return encode([MAGIC, PROTOCOL_VERSION, kind, body])


def unpack(data: bytes, kind: int):
    try:
        magic, version, got, body = decode(data)
    except (TypeError, ValueError) as exc:
        raise DecodeError("not a protocol message") from exc
    if magic != MAGIC or version != PROTOCOL_VERSION:
        raise DecodeError("unsupported protocol version")
    if got != kind:
        raise DecodeError(f"expected message type {kind}, got {got}")
    return body


def message_kind(data: bytes) -> int:
    try:
        magic, version, kind, _ = decode(data)
    except (TypeError, ValueError) as exc:
        raise DecodeError("not a protocol message") from exc
    if magic != MAGIC or version != PROTOCOL_VERSION or not isinstance(kind, int):
        raise DecodeError("unsupported protocol version")
    return kind


def archive_key(peer: ServiceId, step: int, direction: int) -> bytes:
    """Thread-archive key: ordered by peer id, then the peer's step."""
    return encode([peer.id, step, direction])


@dataclass(frozen=True)
class Verdict:
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict()


def _digests(wire) -> tuple[bytes, ...]:
    if not isinstance(wire, list) or not all(isinstance(x, bytes) for x in wire):
        raise DecodeError("expected a digest list")
    return tuple(wire)


# -- proof building blocks --------------------------------------------------

@dataclass(frozen=True)
class SnapshotInclusion:
    """``key`` in dictionary snapshot ``snapshot`` and that snapshot's history digest.

    The history digest (the tree's ``digest()`` right after the snapshot
    closed) is recomputed from the root label, the previous snapshot-list
    authenticator and the remaining links of list element ``snapshot``.
    """

    proof: TreeProof
    root_label: bytes
    snapshot: int
    prev_head: bytes
    links: tuple[bytes, ...]

    @classmethod
    def build(cls, tree: RbbTree, snapshot: int, key: bytes) -> "SnapshotInclusion":
        element = tree.snapshots.element(snapshot)
        return cls(tree.prove(snapshot, key), element.value, snapshot,
                   tree.snapshots.authenticator(snapshot - 1), element.links[1:])

    def check(self, key: bytes, suite: Suite) -> tuple[bool, bytes | None, bytes | None]:
        """``(ok, value_digest, history_digest)``."""
        ok, vd = verify_tree_proof(self.proof, self.root_label, key, suite)
        if not ok or self.snapshot < 1:
            return False, None, None
        hop = Hop(self.snapshot, self.root_label, self.links, 0)
        steps = replay(SkipListProof(self.snapshot - 1, self.snapshot, (hop,)), self.prev_head, suite)
        if steps is None:
            return False, None, None
        return True, vd, steps[-1][1]

    def to_wire(self) -> list:
        return [self.proof, self.root_label, self.snapshot, self.prev_head, list(self.links)]

    @classmethod
    def from_wire(cls, wire) -> "SnapshotInclusion":
        try:
            proof, root, snap, prev, links = wire
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad inclusion") from exc
        if not (isinstance(root, bytes) and isinstance(snap, int) and isinstance(prev, bytes)):
            raise DecodeError("bad inclusion")
        return cls(TreeProof.from_wire(proof), root, snap, prev, _digests(links))


def derive_authenticator(suite: Suite, step: int, prev: bytes, state_digest: bytes,
                         archive_digest: bytes, links) -> tuple[bytes, bytes] | None:
    """``(d_step, T_step)`` from ``T_{step-1}``, ``f``, ``g`` and element links 1..l."""
    d = suite.h(state_digest, archive_digest)
    steps = replay(SkipListProof(step - 1, step, (Hop(step, d, tuple(links), 0),)), prev, suite)
    if steps is None:
        return None
    return d, steps[-1][1]


# -- threads -----------------------------------------------------------------

@dataclass(frozen=True)
class TimelineThread:
    mark: SignedTimeMark
    proof: SkipListProof

    @property
    def sender(self) -> ServiceId:
        return self.mark.owner

    @property
    def step(self) -> int:
        return self.mark.step

    def to_wire(self) -> list:
        return [self.mark, self.proof]

    def to_bytes(self) -> bytes:
        return pack(THREAD, self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TimelineThread":
        try:
            mark, proof = unpack(data, THREAD)
            return cls(SignedTimeMark.from_wire(mark), SkipListProof.from_wire(proof))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad thread") from exc


@dataclass
class PeerView:
    """What one node has verified about a peer's timeline."""

    peer: ServiceId
    known: dict[int, bytes]
    values: dict[int, bytes] = field(default_factory=dict)
    edges: dict[int, dict[int, Hop]] = field(default_factory=dict)
    last_thread: int = 0

    def consistent(self, start: int, steps) -> bool:
        if start not in self.known:
            return False
        return all(self.known.get(k, t) == t for k, t in steps)

    def absorb(self, start: int, hops, steps) -> None:
        c = start
        for hop, (k, t) in zip(hops, steps):
            self.known[k] = t
            self.values[k] = hop.value
            self.edges.setdefault(c, {})[k] = hop
            c = k

    def path(self, a: int, b: int) -> list[Hop] | None:
        """Hops from known step ``a`` to known step ``b``, or ``None``."""
        if a == b:
            return [] if a in self.known else None
        prev: dict[int, tuple[int, Hop]] = {}
        queue = deque([a])
        while queue:
            c = queue.popleft()
            for k, hop in self.edges.get(c, {}).items():
                if k > b or k in prev:
                    continue
                prev[k] = (c, hop)
                if k == b:
                    out = []
                    while k != a:
                        c, hop = prev[k]
                        out.append(hop)
                        k = c
                    return out[::-1]
                queue.append(k)
        return None

    def to_wire(self) -> list:
        return [self.peer, sorted(self.known.items()), sorted(self.values.items()),
                [[c, [[k, h] for k, h in sorted(hops.items())]] for c, hops in sorted(self.edges.items())],
                self.last_thread]

    @classmethod
    def from_wire(cls, wire) -> "PeerView":
        peer, known, values, edges, last = wire
        return cls(ServiceId.from_wire(peer), {k: t for k, t in known}, {k: d for k, d in values},
                   {c: {k: Hop.from_wire(h) for k, h in hops} for c, hops in edges}, last)


def make_thread(node: "Node", peer: ServiceId) -> TimelineThread:
    """Thread for the node's current step, proven from the peer's anchor."""
    anchor = node.anchor_for(peer)
    step = node.timeline.step
    return TimelineThread(node.timeline.mark(step), node.timeline.prove_precedence(anchor, step))


def check_thread(node: "Node", thread: TimelineThread) -> tuple[Verdict, list | None]:
    view = node.views.get(thread.sender.id)
    if view is None:
        return Verdict(UNKNOWN_PEER), None
    if not thread.mark.verify():
        return Verdict(BAD_SIGNATURE), None
    if thread.step <= view.last_thread:
        return Verdict(STALE_STEP), None
    proof = thread.proof
    if proof.end != thread.step or proof.start not in view.known:
        return Verdict(BROKEN_PROOF), None
    steps = replay(proof, view.known[proof.start], node.suite)
    if steps is None:
        return Verdict(BROKEN_PROOF), None
    final = steps[-1][1] if steps else view.known[proof.start]
    if final != thread.mark.authenticator or not view.consistent(proof.start, steps):
        return Verdict(BROKEN_PROOF), None
    return ACCEPT, steps


def verify_and_archive_thread(node: "Node", thread: TimelineThread) -> Verdict:
    """Check a thread and insert it into the open thread-archive snapshot."""
    verdict, steps = check_thread(node, thread)
    if not verdict:
        return verdict
    view = node.views[thread.sender.id]
    node.archive.insert(archive_key(thread.sender, thread.step, INCOMING), thread.to_bytes())
    view.absorb(thread.proof.start, thread.proof.hops, steps)
    view.last_thread = thread.step
    node.archived.setdefault(thread.sender.id, []).append((thread.step, node.timeline.step + 1))
    return ACCEPT


# -- receipts ----------------------------------------------------------------

@dataclass(frozen=True)
class EntanglementReceipt:
    """Issuer's answer to thread ``(subject, thread_step)`` archived at step ``mark.step``."""

    subject: ServiceId
    thread_step: int
    anchor: int
    precedence: SkipListProof        # issuer's anchor -> j-1
    prev: bytes                      # issuer's T_{j-1}
    inclusion: SnapshotInclusion     # thread in archive snapshot, freshness T_{j-1}
    state_digest: bytes              # issuer's f(S) folded into d_j
    links: tuple[bytes, ...]         # links of timeline element j except level 0
    mark: SignedTimeMark             # (issuer, j, T_j)

    @property
    def issuer(self) -> ServiceId:
        return self.mark.owner

    @property
    def step(self) -> int:
        return self.mark.step

    def to_wire(self) -> list:
        return [self.subject, self.thread_step, self.anchor, self.precedence, self.prev,
                self.inclusion, self.state_digest, list(self.links), self.mark]

    def to_bytes(self) -> bytes:
        return pack(RECEIPT, self)

    @classmethod
    def from_wire(cls, wire) -> "EntanglementReceipt":
        try:
            subject, tstep, anchor, prec, prev, incl, f, links, mark = wire
            receipt = cls(ServiceId.from_wire(subject), tstep, anchor, SkipListProof.from_wire(prec),
                          prev, SnapshotInclusion.from_wire(incl), f, _digests(links),
                          SignedTimeMark.from_wire(mark))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad receipt") from exc
        if not (isinstance(tstep, int) and isinstance(anchor, int) and isinstance(prev, bytes)
                and isinstance(f, bytes)):
            raise DecodeError("bad receipt")
        return receipt

    @classmethod
    def from_bytes(cls, data: bytes) -> "EntanglementReceipt":
        return cls.from_wire(unpack(data, RECEIPT))

    def derive(self, suite: Suite, thread_bytes: bytes) -> tuple[str | None, bytes | None]:
        """Check components 2 and 3 against the thread bytes; return ``(reason, d_j)``."""
        key = archive_key(self.subject, self.thread_step, INCOMING)
        ok, vd, g = self.inclusion.check(key, suite)
        if not ok or vd != suite.h(thread_bytes):
            return ARCHIVE_PROOF_INVALID, None
        if self.inclusion.proof.terminal != self.prev:
            return NOT_FRESH, None
        derived = derive_authenticator(suite, self.step, self.prev, self.state_digest, g, self.links)
        if derived is None or derived[1] != self.mark.authenticator:
            return DERIVATION_MISMATCH, None
        return None, derived[0]


def make_receipt(node: "Node", sender: ServiceId, thread_step: int,
                 snapshot: int | None = None) -> EntanglementReceipt:
    """Receipt for a thread archived in the step just ticked.

    ``snapshot`` defaults to the archive snapshot closed in this step; it
    is a parameter only so tests can build stale receipts.
    """
    tl = node.timeline
    j = tl.step
    anchor = node.anchor_for(sender)
    snapshot = len(node.archive) if snapshot is None else snapshot
    element = tl.store.element(j)
    return EntanglementReceipt(
        sender, thread_step, anchor, tl.prove_precedence(anchor, j - 1), tl.authenticator(j - 1),
        SnapshotInclusion.build(node.archive, snapshot, archive_key(sender, thread_step, INCOMING)),
        node.state_digest, element.links[1:], tl.mark(j))


def verify_receipt(node: "Node", receipt: EntanglementReceipt,
                   local_step: int | None = None) -> Verdict:
    """Check a receipt for one of our threads and store it on success.

    ``local_step`` labels the stored record (default: the current step).
    """
    view = node.views.get(receipt.issuer.id)
    if view is None:
        return Verdict(UNKNOWN_PEER)
    if not receipt.mark.verify():
        return Verdict(BAD_SIGNATURE)
    if receipt.subject.id != node.sid.id:
        return Verdict(ARCHIVE_PROOF_INVALID)
    sent = node.sent_threads.get((receipt.issuer.id, receipt.thread_step))
    if sent is None:
        return Verdict(ARCHIVE_PROOF_INVALID)
    j = receipt.step
    prec = receipt.precedence
    if j < 1 or prec.start != receipt.anchor or prec.end != j - 1 or prec.start not in view.known:
        return Verdict(STALE_ANCHOR)
    steps = replay(prec, view.known[prec.start], node.suite)
    if steps is None or not view.consistent(prec.start, steps):
        return Verdict(STALE_ANCHOR)
    if (steps[-1][1] if steps else view.known[prec.start]) != receipt.prev:
        return Verdict(STALE_ANCHOR)
    reason, d_j = receipt.derive(node.suite, sent)
    if reason is not None:
        return Verdict(reason)
    if view.known.get(j, receipt.mark.authenticator) != receipt.mark.authenticator:
        return Verdict(DERIVATION_MISMATCH)
    view.absorb(prec.start, prec.hops, steps)
    hop = Hop(j, d_j, receipt.links, 0)
    view.absorb(j - 1, [hop], [(j, receipt.mark.authenticator)])
    node.receipts.add(receipt, node.timeline.step if local_step is None else local_step)
    return ACCEPT


def extend_view(node: "Node", peer: ServiceId, proof: SkipListProof) -> Verdict:
    """Absorb a finer precedence proof fetched from ``peer``.

    Both ends must already be known; the proof may only fill in steps.
    """
    view = node.views.get(peer.id)
    if view is None:
        return Verdict(UNKNOWN_PEER)
    if proof.start not in view.known or proof.end not in view.known:
        return Verdict(STALE_ANCHOR)
    steps = replay(proof, view.known[proof.start], node.suite)
    if steps is None or not view.consistent(proof.start, steps):
        return Verdict(BROKEN_PROOF)
    if (steps[-1][1] if steps else view.known[proof.start]) != view.known[proof.end]:
        return Verdict(BROKEN_PROOF)
    view.absorb(proof.start, proof.hops, steps)
    return ACCEPT


class ReceiptArchive:
    """Plain (unauthenticated) store of verified receipts.

    Each record remembers the local step in which it was accepted so a
    node can discard records from a step that never committed.
    """

    def __init__(self, backing: FileBacking | None = None):
        self._backing = backing
        self.records: list[tuple[int, EntanglementReceipt]] = []
        self._by_peer: dict[bytes, list[EntanglementReceipt]] = {}

    @classmethod
    def open(cls, path: str | os.PathLike, committed_step: int | None = None,
             fsync: bool = False) -> "ReceiptArchive":
        archive = cls(FileBacking(Path(path), fsync))
        data = archive._backing.getvalue()
        pos = 0
        while pos < len(data):
            try:
                (local_step, raw), nxt = decode_prefix(data, pos)
                receipt = EntanglementReceipt.from_bytes(raw)
            except (DecodeError, TypeError, ValueError):
                break
            if committed_step is not None and local_step > committed_step:
                break
            archive._remember(local_step, receipt)
            pos = nxt
        if pos < len(data):
            archive._backing.truncate(pos)
        return archive

    def close(self) -> None:
        if self._backing is not None:
            self._backing.close()

    def clone(self) -> "ReceiptArchive":
        twin = ReceiptArchive()
        for step, receipt in self.records:
            twin._remember(step, receipt)
        return twin

    def _remember(self, local_step: int, receipt: EntanglementReceipt) -> None:
        self.records.append((local_step, receipt))
        self._by_peer.setdefault(receipt.issuer.id, []).append(receipt)

    def add(self, receipt: EntanglementReceipt, local_step: int) -> None:
        if self._backing is not None:
            self._backing.append(encode([local_step, receipt.to_bytes()]))
        self._remember(local_step, receipt)

    def sync(self) -> None:
        if self._backing is not None:
            self._backing.sync()

    def checkpoint(self) -> tuple[int, int]:
        return len(self.records), self._backing.size() if self._backing is not None else 0

    def rollback(self, checkpoint: tuple[int, int]) -> None:
        count, size = checkpoint
        if self._backing is not None:
            self._backing.truncate(size)
        kept = self.records[:count]
        self.records = []
        self._by_peer = {}
        for step, receipt in kept:
            self._remember(step, receipt)

    def from_peer(self, peer_id: bytes) -> list[EntanglementReceipt]:
        return list(self._by_peer.get(peer_id, ()))

    def get(self, peer_id: bytes, step: int) -> EntanglementReceipt | None:
        for r in self._by_peer.get(peer_id, ()):
            if r.step == step:
                return r
        return None

    def by_local_step(self, thread_step: int) -> list[EntanglementReceipt]:
        """Receipts elicited by our thread of local step ``thread_step``."""
        return [r for _, r in self.records if r.thread_step == thread_step]


# -- events ------------------------------------------------------------------

@dataclass(frozen=True)
class EventProof:
    """One-way path from an event digest to a signed timeline mark."""

    event: bytes
    inclusion: SnapshotInclusion   # event in the application snapshot -> f(S)
    archive_digest: bytes          # g(E) of the same step
    prev: bytes                    # T_{step-1}
    links: tuple[bytes, ...]       # element ``step`` links except level 0
    mark: SignedTimeMark

    @property
    def step(self) -> int:
        return self.mark.step

    def system_digest(self, suite: Suite) -> bytes | None:
        """``d_step`` if the event is included and the chain reaches the mark."""
        ok, vd, f = self.inclusion.check(self.event, suite)
        if not ok or vd is None:
            return None
        derived = derive_authenticator(suite, self.step, self.prev, f, self.archive_digest, self.links)
        if derived is None or derived[1] != self.mark.authenticator:
            return None
        return derived[0]

    def verify(self, suite: Suite) -> bool:
        return self.mark.verify() and self.system_digest(suite) is not None

    def to_wire(self) -> list:
        return [self.event, self.inclusion, self.archive_digest, self.prev, list(self.links), self.mark]

    def to_bytes(self) -> bytes:
        return pack(EVENT_PROOF, self)

    @classmethod
    def from_wire(cls, wire) -> "EventProof":
        try:
            event, incl, g, prev, links, mark = wire
            proof = cls(event, SnapshotInclusion.from_wire(incl), g, prev, _digests(links),
                        SignedTimeMark.from_wire(mark))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad event proof") from exc
        if not all(isinstance(x, bytes) for x in (event, g, prev)):
            raise DecodeError("bad event proof")
        return proof

    @classmethod
    def from_bytes(cls, data: bytes) -> "EventProof":
        return cls.from_wire(unpack(data, EVENT_PROOF))


@dataclass(frozen=True)
class PrecedenceEvidence:
    """Two signed marks of one timeline and the one-way path between them."""

    start: SignedTimeMark
    end: SignedTimeMark
    proof: SkipListProof

    def verify(self, suite: Suite) -> bool:
        if self.start.owner.id != self.end.owner.id:
            return False
        if (self.proof.start, self.proof.end) != (self.start.step, self.end.step):
            return False
        if not (self.start.verify() and self.end.verify()):
            return False
        steps = replay(self.proof, self.start.authenticator, suite)
        if steps is None:
            return False
        return (steps[-1][1] if steps else self.start.authenticator) == self.end.authenticator

    def to_wire(self) -> list:
        return [self.start, self.end, self.proof]

    def to_bytes(self) -> bytes:
        return pack(PRECEDENCE, self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrecedenceEvidence":
        try:
            start, end, proof = unpack(data, PRECEDENCE)
            return cls(SignedTimeMark.from_wire(start), SignedTimeMark.from_wire(end),
                       SkipListProof.from_wire(proof))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad precedence evidence") from exc


# -- temporal mapping ----------------------------------------------------------

@dataclass(frozen=True)
class TemporalMapping:
    """``<peer, step>`` placed within local steps ``[lower, upper]``."""

    peer: ServiceId
    step: int
    lower: int                 # local step of the thread the receipt answered
    upper: int                 # local step that archived the peer's thread
    receipt_step: int          # m: peer step of the lower-bound receipt
    thread_step: int           # p: peer step of the upper-bound thread
    path: SkipListProof        # peer's m -> p, passing through ``step``

    @property
    def interval(self) -> tuple[int, int]:
        return self.lower, self.upper


@dataclass(frozen=True)
class Inconclusive:
    reason: str
    gap: tuple[int, int, int] | None = None

    def __bool__(self) -> bool:
        return False


def map_time(node: "Node", peer: ServiceId, step: int,
             fetch: Callable[[int, int], SkipListProof | None] | None = None
             ) -> TemporalMapping | Inconclusive:
    """Map peer step ``step`` onto the local timeline.

    ``fetch(a, b)``, if given, asks the peer for a finer precedence proof
    when local evidence does not cover ``step``.
    """
    view = node.views.get(peer.id)
    if view is None:
        return Inconclusive(UNKNOWN_PEER)
    lowers = [r for r in node.receipts.from_peer(peer.id) if r.step <= step]
    if not lowers:
        return Inconclusive(NO_LOWER_BOUND)
    receipt = max(lowers, key=lambda r: (r.thread_step, r.step))
    uppers = [(k, p) for p, k in node.archived.get(peer.id, ()) if p >= step]
    if not uppers:
        return Inconclusive(NO_UPPER_BOUND)
    upper, p = min(uppers)
    m = receipt.step
    hops = _through(view, m, step, p)
    if hops is None and fetch is not None and _fetch_through(node, view, m, step, p, fetch):
        hops = _through(view, m, step, p)
    if hops is None:
        return Inconclusive(DETAILED_PROOF_NEEDED, (m, step, p))
    return TemporalMapping(peer, step, receipt.thread_step, upper, m, p, SkipListProof(m, p, tuple(hops)))


def _through(view: PeerView, m: int, i: int, p: int) -> list[Hop] | None:
    first = view.path(m, i)
    if first is None:
        return None
    second = view.path(i, p)
    if second is None:
        return None
    return first + second


def _fetch_through(node: "Node", view: PeerView, m: int, i: int, p: int,
                   fetch: Callable[[int, int], SkipListProof | None]) -> bool:
    """Ask the peer for ``m -> i`` and ``i -> p``; keep them only if both
    replay from our ``T_m`` to our ``T_p``."""
    first, second = fetch(m, i), fetch(i, p)
    if first is None or second is None:
        return False
    if (first.start, first.end, second.start, second.end) != (m, i, i, p):
        return False
    a = replay(first, view.known[m], node.suite)
    if a is None:
        return False
    t_i = a[-1][1] if a else view.known[m]
    b = replay(second, t_i, node.suite)
    if b is None or (b[-1][1] if b else t_i) != view.known[p]:
        return False
    if not all(view.known.get(k, t) == t for k, t in [(m, view.known[m]), *a, (i, t_i), *b]):
        return False
    view.absorb(m, first.hops, a)
    view.absorb(i, second.hops, b)
    return True


def map_event(node: "Node", peer: ServiceId, event: EventProof,
              fetch: Callable[[int, int], SkipListProof | None] | None = None
              ) -> TemporalMapping | Inconclusive:
    """Map the step that committed a peer's event, checking it is on our view."""
    if event.mark.owner.id != peer.id or not event.verify(node.suite):
        return Inconclusive(EVENT_MISMATCH)
    mapping = map_time(node, peer, event.step, fetch)
    if not mapping:
        return mapping
    view = node.views[peer.id]
    d = event.system_digest(node.suite)
    if view.values.get(event.step) != d or view.known.get(event.step) != event.mark.authenticator:
        return Inconclusive(EVENT_MISMATCH)
    return mapping


# -- portable evidence ---------------------------------------------------------

@dataclass(frozen=True)
class MappingBundle:
    """Self-contained evidence for ``<B, i> -> [<A, j>, <A, k>]``."""

    step: int
    lower_thread: bytes                 # A's thread t_j sent to B
    receipt: EntanglementReceipt        # B's answer, mark (B, m)
    path: SkipListProof                 # B: m -> p through i
    upper_thread: bytes                 # B's thread t_p as archived by A
    upper_inclusion: SnapshotInclusion  # t_p in A's archive snapshot of step k
    upper_state_digest: bytes
    upper_prev: bytes
    upper_links: tuple[bytes, ...]
    upper_mark: SignedTimeMark          # (A, k, T_k)
    event: EventProof | None = None

    def to_wire(self) -> list:
        return [self.step, self.lower_thread, self.receipt, self.path, self.upper_thread,
                self.upper_inclusion, self.upper_state_digest, self.upper_prev,
                list(self.upper_links), self.upper_mark, self.event]

    def to_bytes(self) -> bytes:
        return pack(BUNDLE, self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MappingBundle":
        try:
            (step, lower, receipt, path, upper, incl, f, prev, links, mark,
             event) = unpack(data, BUNDLE)
            bundle = cls(step, lower, EntanglementReceipt.from_wire(receipt),
                         SkipListProof.from_wire(path), upper, SnapshotInclusion.from_wire(incl),
                         f, prev, _digests(links), SignedTimeMark.from_wire(mark),
                         None if event is None else EventProof.from_wire(event))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad bundle") from exc
        if not (isinstance(step, int) and all(isinstance(x, bytes) for x in (lower, upper, f, prev))):
            raise DecodeError("bad bundle")
        return bundle


@dataclass(frozen=True)
class BundleResult:
    ok: bool
    reason: str | None = None
    remote: ServiceId | None = None
    step: int | None = None
    local: ServiceId | None = None
    interval: tuple[int, int] | None = None

    def to_record(self) -> dict:
        return {"ok": self.ok, "reason": self.reason,
                "remote": None if self.remote is None else self.remote.id.hex(),
                "step": self.step,
                "local": None if self.local is None else self.local.id.hex(),
                "interval": None if self.interval is None else list(self.interval)}


def transfer_mapping(node: "Node", mapping: TemporalMapping,
                     event: EventProof | None = None) -> bytes:
    """Bundle a mapping with every proof needed to check it from bytes alone."""
    peer = mapping.peer
    receipt = node.receipts.get(peer.id, mapping.receipt_step)
    lower = node.sent_threads[(peer.id, receipt.thread_step)]
    # a third party has no anchor to replay component 1 from, so it is left out
    m = receipt.step
    receipt = replace(receipt, anchor=m - 1, precedence=SkipListProof(m - 1, m - 1, ()))
    k = mapping.upper
    key = archive_key(peer, mapping.thread_step, INCOMING)
    upper_thread = node.archive.lookup(k, key)
    element = node.timeline.store.element(k)
    bundle = MappingBundle(
        mapping.step, lower, receipt, mapping.path, upper_thread,
        SnapshotInclusion.build(node.archive, k, key), node.state_digest_at(k),
        node.timeline.authenticator(k - 1), element.links[1:], node.timeline.mark(k), event)
    return bundle.to_bytes()


def verify_bundle(data: bytes, suite: Suite) -> BundleResult:
    """Check a mapping bundle with no access to either service's stores."""
    try:
        b = MappingBundle.from_bytes(data)
        lower = TimelineThread.from_bytes(b.lower_thread)
        upper = TimelineThread.from_bytes(b.upper_thread)
    except DecodeError as exc:
        return BundleResult(False, f"malformed: {exc}")
    local, remote = lower.mark.owner, b.receipt.issuer
    # lower bound: A's t_j is inside B's step-m authenticator
    if not lower.mark.verify() or not b.receipt.mark.verify():
        return BundleResult(False, BAD_SIGNATURE)
    if b.receipt.subject.id != local.id or b.receipt.thread_step != lower.step:
        return BundleResult(False, ARCHIVE_PROOF_INVALID)
    m = b.receipt.step
    if b.receipt.anchor != m - 1 or b.receipt.precedence != SkipListProof(m - 1, m - 1, ()):
        return BundleResult(False, "malformed: receipt precedence must be trimmed")
    key = archive_key(local, lower.step, INCOMING)
    ok, vd, g = b.receipt.inclusion.check(key, suite)
    if not ok or vd != suite.h(b.lower_thread):
        return BundleResult(False, ARCHIVE_PROOF_INVALID)
    derived = derive_authenticator(suite, b.receipt.step, b.receipt.prev, b.receipt.state_digest,
                                   g, b.receipt.links)
    if derived is None or derived[1] != b.receipt.mark.authenticator:
        return BundleResult(False, DERIVATION_MISMATCH)
    d_m = derived[0]
    # B's path m -> p through i, ending at the thread A archived
    p, i = upper.step, b.step
    if not upper.mark.verify() or upper.mark.owner.id != remote.id:
        return BundleResult(False, BAD_SIGNATURE)
    if b.path.start != m or b.path.end != p or not (m <= i <= p):
        return BundleResult(False, BROKEN_PROOF)
    steps = replay(b.path, b.receipt.mark.authenticator, suite)
    if steps is None or (steps[-1][1] if steps else b.receipt.mark.authenticator) != upper.mark.authenticator:
        return BundleResult(False, BROKEN_PROOF)
    if i != m and i not in b.path.indices:
        return BundleResult(False, DETAILED_PROOF_NEEDED)
    # upper bound: B's t_p is inside A's step-k authenticator
    if not b.upper_mark.verify() or b.upper_mark.owner.id != local.id:
        return BundleResult(False, BAD_SIGNATURE)
    key = archive_key(remote, p, INCOMING)
    ok, vd, g = b.upper_inclusion.check(key, suite)
    if not ok or vd != suite.h(b.upper_thread):
        return BundleResult(False, ARCHIVE_PROOF_INVALID)
    k = b.upper_mark.step
    derived = derive_authenticator(suite, k, b.upper_prev, b.upper_state_digest, g, b.upper_links)
    if derived is None or derived[1] != b.upper_mark.authenticator:
        return BundleResult(False, DERIVATION_MISMATCH)
    if lower.step > k:
        return BundleResult(False, BROKEN_PROOF)
    if b.event is not None:
        d_i = d_m if i == m else next(h.value for h in b.path.hops if h.index == i)
        if (b.event.mark.owner.id != remote.id or b.event.step != i or not b.event.mark.verify()
                or b.event.system_digest(suite) != d_i):
            return BundleResult(False, EVENT_MISMATCH)
    return BundleResult(True, None, remote, i, local, (lower.step, k))
