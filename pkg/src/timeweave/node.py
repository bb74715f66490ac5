"""The Timeweave machine: service state, timeline, thread and receipt archives.

Each call to :meth:`Node.step` runs one timeline step:

1. apply queued client events to the application dictionary, giving f(S);
2. archive inbound threads and last step's emission records, giving g(E);
3. d = h(f(S), g(E));
4. tick the timeline and sign the new mark;
5. answer every archived thread with a receipt;
6. emit threads if the step is due.

Inbound receipts are checked during step 2, in each sender's step order
together with its threads: a thread may be anchored on the step disclosed
by a receipt in the same batch.  Receipt checks never touch the archive.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .canon import DecodeError, ServiceId, SigningKey, SIG_SCHEMES, Suite, decode, encode
from .entangle import (
    OUTGOING, RECEIPT, THREAD, EntanglementReceipt, EventProof, PeerView,
    ReceiptArchive, SnapshotInclusion, TimelineThread, Verdict, archive_key, check_thread, make_receipt,
    make_thread, message_kind, verify_and_archive_thread, verify_receipt,
)
from .rbbtree import OPEN, RbbConfig, RbbTree
from .timeline import Timeline

STATE_FILE = "state"
CONFIG_FILE = "node.json"
KEY_FILE = "key"


@dataclass
class NodeConfig:
    name: str
    interval: int = 100
    emit_steps: frozenset[int] | None = None  # explicit schedule, overrides interval
    rbb: RbbConfig = field(default_factory=RbbConfig)

    def due(self, step: int) -> bool:
        if self.emit_steps is not None:
            return step in self.emit_steps
        return self.interval > 0 and step % self.interval == 0


@dataclass(frozen=True)
class StepRecord:
    """What happened in one step, for transcripts."""

    step: int
    events: int
    threads_in: int
    threads_accepted: int
    receipts_in: int
    receipts_accepted: int
    threads_out: int
    receipts_out: int
    bytes_sent: int
    rejects: tuple[tuple[str, str], ...]


class Node:
    def __init__(self, key: SigningKey, suite: Suite, config: NodeConfig,
                 peers: list[ServiceId], timeline: Timeline, app: RbbTree, archive: RbbTree,
                 receipts: ReceiptArchive, path: Path | None = None):
        self.key = key
        self.suite = suite
        self.config = config
        self.timeline = timeline
        self.sid = timeline.owner
        self.app = app
        self.archive = archive
        self.receipts = receipts
        self.path = path
        self.peers = [p for p in peers if p.id != self.sid.id]
        self.views: dict[bytes, PeerView] = {p.id: PeerView(p, {0: suite.zero}) for p in self.peers}
        self.disclosed: dict[bytes, int] = {}
        self.sent_threads: dict[tuple[bytes, int], bytes] = {}
        self.archived: dict[bytes, list[tuple[int, int]]] = {}
        self.pending_events: list[bytes] = []
        self.pending_emissions: list[tuple[ServiceId, int, bytes]] = []
        self.state_digest = suite.zero

    # -- construction ---------------------------------------------------------

    @classmethod
    def memory(cls, key: SigningKey, config: NodeConfig, peers: list[ServiceId],
               suite: Suite | None = None) -> "Node":
        suite = suite or Suite(sig_scheme=key.scheme)
        return cls(key, suite, config, peers, Timeline.memory(key, suite, config.name),
                   RbbTree.memory(suite, config.rbb), RbbTree.memory(suite, config.rbb),
                   ReceiptArchive())

    @classmethod
    def create(cls, path, key: SigningKey, config: NodeConfig, peers: list[ServiceId],
               suite: Suite, fsync: bool = False) -> "Node":
        path = Path(path)
        if (path / CONFIG_FILE).exists():
            raise FileExistsError(f"node already initialized at {path}")
        path.mkdir(parents=True, exist_ok=True)
        (path / KEY_FILE).write_text(key.private_bytes().hex() + "\n")
        os.chmod(path / KEY_FILE, 0o600)
        scheme = {v: k for k, v in SIG_SCHEMES.items()}[key.scheme]
        meta = {
            "name": config.name,
            "interval": config.interval,
            "emit_steps": None if config.emit_steps is None else sorted(config.emit_steps),
            "rbb": {"block_size": config.rbb.block_size, "versions": config.rbb.versions,
                    "order": config.rbb.order, "key_slots": config.rbb.key_slots},
            "peers": [{"name": p.name, "id": p.id.hex()} for p in peers],
            **suite.to_config(),
            "sig": {"scheme": scheme},
        }
        (path / CONFIG_FILE).write_text(json.dumps(meta, indent=2) + "\n")
        Timeline.create(path / "timeline", key, suite, config.name, fsync).close()
        RbbTree.create(path / "app", suite, config.rbb, fsync).close()
        RbbTree.create(path / "archive", suite, config.rbb, fsync).close()
        node = cls.open(path, fsync=fsync)
        node._save_state()
        return node

    @classmethod
    def open(cls, path, fsync: bool = False) -> "Node":
        """Open a node directory, rolling back any step that did not commit."""
        path = Path(path)
        meta = json.loads((path / CONFIG_FILE).read_text())
        suite = Suite.from_config(meta)
        key = SigningKey.from_private_bytes(bytes.fromhex((path / KEY_FILE).read_text().strip()),
                                            suite.sig_scheme)
        config = NodeConfig(meta["name"], meta["interval"],
                            None if meta.get("emit_steps") is None else frozenset(meta["emit_steps"]),
                            RbbConfig(**meta.get("rbb", {})))
        peers = [ServiceId(bytes.fromhex(p["id"]), p.get("name", "")) for p in meta["peers"]]
        state = decode((path / STATE_FILE).read_bytes()) if (path / STATE_FILE).exists() else None
        committed = state[0] if state is not None else 0
        timeline = Timeline.open(path / "timeline", key, suite, config.name, fsync)
        app = RbbTree.open(path / "app", suite, fsync)
        archive = RbbTree.open(path / "archive", suite, fsync)
        for store in (timeline.store, app, archive):
            if len(store) > committed:
                store.truncate(committed)
        receipts = ReceiptArchive.open(path / "receipts", committed, fsync)
        node = cls(key, suite, config, peers, timeline, app, archive, receipts, path)
        if state is not None:
            node._load_state(state)
        return node

    def close(self) -> None:
        self.timeline.close()
        self.app.close()
        self.archive.close()
        self.receipts.close()

    def clone(self, suite: Suite | None = None) -> "Node":
        """Independent in-memory copy; used to fork a simulated node."""
        suite = suite or self.suite.fresh()
        twin = Node(self.key, suite, self.config, self.peers, self.timeline.clone(suite),
                    self.app.clone(suite), self.archive.clone(suite), self.receipts.clone())
        twin._load_state(decode(encode(self._state_wire())))
        return twin

    # -- state persistence ------------------------------------------------------

    def _state_wire(self) -> list:
        return [
            self.timeline.step,
            [v for _, v in sorted(self.views.items())],
            sorted(self.disclosed.items()),
            [[peer, step, data] for (peer, step), data in sorted(self.sent_threads.items())],
            [[peer, [list(x) for x in items]] for peer, items in sorted(self.archived.items())],
            list(self.pending_events),
            [[peer, step, auth] for peer, step, auth in self.pending_emissions],
            self.state_digest,
        ]

    def _load_state(self, wire) -> None:
        _, views, disclosed, sent, archived, events, emissions, f = wire
        for raw in views:
            view = PeerView.from_wire(raw)
            if view.peer.id in self.views:
                view.peer = self.views[view.peer.id].peer
            self.views[view.peer.id] = view
        self.disclosed = {peer: step for peer, step in disclosed}
        self.sent_threads = {(peer, step): data for peer, step, data in sent}
        self.archived = {peer: [tuple(x) for x in items] for peer, items in archived}
        self.pending_events = list(events)
        self.pending_emissions = [(self.views[p].peer, s, a) for p, s, a in emissions]
        self.state_digest = f

    def _save_state(self) -> None:
        """Atomically replace the state file: the commit point of a step."""
        if self.path is None:
            return
        tmp = self.path / (STATE_FILE + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(encode(self._state_wire()))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path / STATE_FILE)

    # -- clients ------------------------------------------------------------------

    def submit_event(self, digest: bytes) -> bytes:
        """Queue an event digest for the next step; returns it as the handle."""
        digest = bytes(digest)
        if digest not in self.pending_events:
            self.pending_events.append(digest)
            if self.path is not None:
                self._save_state()
        return digest

    def event_step(self, digest: bytes) -> int | None:
        """Step at which ``digest`` was committed, if it has been."""
        raw = self.app.lookup(OPEN, digest)
        return None if raw is None else decode(raw)

    def event_proof(self, digest: bytes) -> EventProof | None:
        step = self.event_step(digest)
        if step is None:
            return None
        tl = self.timeline
        return EventProof(digest, SnapshotInclusion.build(self.app, step, digest),
                          self.archive.snapshots.authenticator(step), tl.authenticator(step - 1),
                          tl.store.element(step).links[1:], tl.mark(step))

    def state_digest_at(self, step: int) -> bytes:
        """f(S) folded into timeline element ``step``."""
        return self.app.snapshots.authenticator(step)

    # -- protocol ------------------------------------------------------------------

    def anchor_for(self, peer: ServiceId) -> int:
        """Last of our steps disclosed to ``peer`` in an earlier step."""
        return self.disclosed.get(peer.id, 0)

    def peer(self, peer_id: bytes) -> ServiceId:
        return self.views[peer_id].peer

    def add_peer(self, peer: ServiceId) -> bool:
        """Start entangling with ``peer``; False if it is already known or is us."""
        if peer.id == self.sid.id or peer.id in self.views:
            return False
        self.peers.append(peer)
        self.views[peer.id] = PeerView(peer, {0: self.suite.zero})
        if self.path is not None:
            meta = json.loads((self.path / CONFIG_FILE).read_text())
            meta["peers"].append({"name": peer.name, "id": peer.id.hex()})
            tmp = self.path / (CONFIG_FILE + ".tmp")
            tmp.write_text(json.dumps(meta, indent=2) + "\n")
            os.replace(tmp, self.path / CONFIG_FILE)
        return True

    def step(self, inbound: list[bytes] = ()) -> tuple[list[tuple[ServiceId, bytes]], StepRecord]:
        """Run one timeline step; return outbound ``(destination, message)`` pairs.

        A file-backed node that fails mid-step is restored to the previous
        committed step.  An in-memory node is left as the failure found it.
        """
        # memory nodes cannot hit storage failures; skip the costly state copy
        saved = encode(self._state_wire()) if self.path is not None else None
        base = self.timeline.step
        checkpoint = self.receipts.checkpoint()
        try:
            out, record = self._step(list(inbound))
            if self.path is not None:
                self.receipts.sync()
                self._save_state()
        except BaseException:
            if saved is not None:
                self._rollback(base, saved, checkpoint)
            raise
        return out, record

    def _rollback(self, base: int, saved: bytes, checkpoint) -> None:
        if len(self.timeline.store) > base:
            self.timeline.store.truncate(base)
        self.app.truncate(base)
        self.archive.truncate(base)
        self.receipts.rollback(checkpoint)
        self.views = {p.id: PeerView(p, {0: self.suite.zero}) for p in self.peers}
        self._load_state(decode(saved))

    def _step(self, inbound: list[bytes]):
        j = self.timeline.step + 1
        prev = self.timeline.head
        rejects: list[tuple[str, str]] = []
        threads: list[TimelineThread] = []
        receipts: list[EntanglementReceipt] = []
        for data in inbound:
            try:
                kind = message_kind(data)
                if kind == THREAD:
                    threads.append(TimelineThread.from_bytes(data))
                elif kind == RECEIPT:
                    receipts.append(EntanglementReceipt.from_bytes(data))
                else:
                    rejects.append(("message", "unexpected-type"))
            except DecodeError:
                rejects.append(("message", "malformed"))
        # a peer's later message may be anchored on an earlier one, so each
        # sender's messages are checked in the order of its own steps
        inbox = sorted([(t.sender.id, t.step, 0, t.to_bytes(), t) for t in threads]
                       + [(r.issuer.id, r.step, 1, r.to_bytes(), r) for r in receipts])
        # 1. client requests -> f(S)
        events = self.pending_events
        self.app.set_freshness(prev)
        for digest in events:
            if self.app.lookup(OPEN, digest) is None:
                self.app.insert(digest, encode(j))
        self.app.close_snapshot()
        f = self.app.digest()
        # 2. thread archive -> g(E); receipts are checked alongside but only
        # touch the peer view and the receipt archive
        self.archive.set_freshness(prev)
        accepted = []
        n_receipts_ok = 0
        for _, _, kind, _, msg in inbox:
            if kind == 0:
                verdict = verify_and_archive_thread(self, msg)
                if verdict:
                    accepted.append(msg)
            else:
                verdict = verify_receipt(self, msg, j)
                n_receipts_ok += bool(verdict)
            if not verdict:
                rejects.append(("thread" if kind == 0 else "receipt", verdict.reason))
        for peer, step, auth in self.pending_emissions:
            self.archive.insert(archive_key(peer, step, OUTGOING), encode([step, auth]))
        self.archive.close_snapshot()
        g = self.archive.digest()
        # 3 + 4. d = h(f, g); tick and sign
        self.state_digest = f
        mark = self.timeline.tick(f, g)
        self.pending_events = []
        self.pending_emissions = []
        # 5. receipts for threads archived in this step
        out: list[tuple[ServiceId, bytes]] = []
        for thread in accepted:
            out.append((thread.sender, make_receipt(self, thread.sender, thread.step).to_bytes()))
        n_receipts = len(out)
        # 6. emit threads when due (inbound receipts were checked with the threads)
        if self.config.due(j):
            for peer in self.peers:
                data = make_thread(self, peer).to_bytes()
                self.sent_threads[(peer.id, j)] = data
                self.pending_emissions.append((peer, j, mark.authenticator))
                out.append((peer, data))
        for dest, _ in out:
            self.disclosed[dest.id] = j
        record = StepRecord(j, len(events), len(threads), len(accepted), len(receipts), n_receipts_ok,
                            len(out) - n_receipts, n_receipts, sum(len(d) for _, d in out),
                            tuple(rejects))
        return out, record

    def verify_thread(self, thread: TimelineThread) -> Verdict:
        """Check a thread against our view without archiving it."""
        return check_thread(self, thread)[0]
