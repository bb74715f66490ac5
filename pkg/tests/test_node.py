import random

import pytest

from oracles import sha
from timeweave import node as node_mod
from timeweave.canon import SigningKey, Suite
from timeweave.entangle import EventProof
from timeweave.node import Node, NodeConfig
from timeweave.rbbtree import OPEN, RbbConfig
from timeweave.skiplist import verify
from timeweave.timeline import system_digest

SMALL = RbbConfig(order=4)


def pair(path=None):
    ka, kb = SigningKey.from_seed(b"A"), SigningKey.from_seed(b"B")
    sids = [ka.service_id("A"), kb.service_id("B")]
    if path is None:
        a = Node.memory(ka, NodeConfig("A", interval=2, rbb=SMALL), sids)
    else:
        a = Node.create(path / "A", ka, NodeConfig("A", interval=2, rbb=SMALL), sids, Suite())
    b = Node.memory(kb, NodeConfig("B", interval=3, rbb=SMALL), sids)
    return a, b


def run_pair(a, b, rounds):
    to_a, to_b = [], []
    for _ in range(rounds):
        out_a, _ = a.step(to_a)
        out_b, _ = b.step(to_b)
        to_b = [d for _, d in out_a]
        to_a = [d for _, d in out_b]
    return to_a, to_b


def test_empty_step_advances():
    a, _ = pair()
    out, record = a.step()
    assert a.timeline.step == 1 and record.events == 0 and record.threads_in == 0
    assert len(a.archive) == 1 and len(a.app) == 1


def test_element_value_is_h_of_state_and_archive():
    a, b = pair()
    a.submit_event(sha(b"e"))
    run_pair(a, b, 12)
    for j in range(1, 13):
        f = a.app.snapshots.authenticator(j)
        g = a.archive.snapshots.authenticator(j)
        assert a.timeline.store.value(j) == system_digest(a.suite, f, g)


def test_hundred_events_over_twenty_steps():
    a, _ = pair()
    rng = random.Random(7)
    events = [sha(rng.randbytes(16)) for _ in range(100)]
    pending = list(events)
    for _ in range(20):
        for _ in range(5):
            a.submit_event(pending.pop())
        a.step()
    for digest in events:
        proof = a.event_proof(digest)
        assert proof.verify(a.suite.fresh())
        assert EventProof.from_bytes(proof.to_bytes()) == proof
        mark = proof.mark
        assert verify(a.timeline.prove_precedence(mark.step, 20), mark.authenticator, a.timeline.head)
    bad = a.event_proof(events[0])
    assert not EventProof(sha(b"other"), *[getattr(bad, f) for f in
                                          ("inclusion", "archive_digest", "prev", "links", "mark")]
                          ).verify(a.suite)


def test_event_order_across_steps():
    a, _ = pair()
    a.submit_event(sha(b"first"))
    a.step()
    a.submit_event(sha(b"second"))
    a.step()
    p1, p2 = a.event_proof(sha(b"first")), a.event_proof(sha(b"second"))
    assert (p1.step, p2.step) == (1, 2)
    assert verify(a.timeline.prove_precedence(1, 2), p1.mark.authenticator, p2.mark.authenticator)


def test_duplicate_submission_is_idempotent():
    a, _ = pair()
    a.submit_event(sha(b"x"))
    a.submit_event(sha(b"x"))
    _, record = a.step()
    assert record.events == 1
    a.submit_event(sha(b"x"))
    a.step()
    assert a.event_step(sha(b"x")) == 1
    assert a.event_proof(sha(b"missing")) is None


def test_receipts_end_before_their_mark():
    a, b = pair()
    to_a = []
    for _ in range(15):
        out_a, _ = a.step(to_a)
        to_a, _ = b.step([d for _, d in out_a])
        to_a = [d for _, d in to_a]
        for data in to_a:
            if node_mod.message_kind(data) == node_mod.RECEIPT:
                r = node_mod.EntanglementReceipt.from_bytes(data)
                assert r.precedence.end == r.step - 1 == b.timeline.step - 1
    assert len(a.receipts.records) > 3


def test_views_track_peer_heads():
    a, b = pair()
    run_pair(a, b, 30)
    known_b = max(a.views[b.sid.id].known)
    known_a = max(b.views[a.sid.id].known)
    assert b.timeline.step - known_b <= 3 + 1
    assert a.timeline.step - known_a <= 2 + 1


def test_file_node_reopens(tmp_path):
    a, b = pair(tmp_path)
    a.submit_event(sha(b"kept"))
    run_pair(a, b, 10)
    head, views = a.timeline.head, a.views[b.sid.id].to_wire()
    a.close()
    again = Node.open(tmp_path / "A")
    assert again.timeline.head == head
    assert again.views[b.sid.id].to_wire() == views
    assert again.peer(b.sid.id).name == "B"
    assert again.event_proof(sha(b"kept")).verify(again.suite)
    run_pair(again, b, 4)
    assert again.timeline.step == 14


def test_create_refuses_existing(tmp_path):
    pair(tmp_path)
    with pytest.raises(FileExistsError):
        pair(tmp_path)


def test_failed_step_rolls_back(tmp_path, monkeypatch):
    a, b = pair(tmp_path)
    run_pair(a, b, 6)
    before = (a.timeline.head, len(a.app), len(a.archive), len(a.receipts.records),
              a.views[b.sid.id].to_wire(), dict(a.disclosed))
    out_b, _ = b.step()
    a.submit_event(sha(b"queued"))

    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(node_mod, "make_thread", boom)
    a.config.interval = 1
    with pytest.raises(OSError):
        a.step([d for _, d in out_b])
    after = (a.timeline.head, len(a.app), len(a.archive), len(a.receipts.records),
             a.views[b.sid.id].to_wire(), dict(a.disclosed))
    assert after == before
    assert a.pending_events == [sha(b"queued")]
    monkeypatch.undo()
    a.step([d for _, d in out_b])
    assert a.event_step(sha(b"queued")) == 7


def test_crash_before_commit_discards_step(tmp_path, monkeypatch):
    a, b = pair(tmp_path)
    run_pair(a, b, 5)
    head = a.timeline.head
    monkeypatch.setattr(Node, "_save_state", lambda self: None)
    a.submit_event(sha(b"lost"))
    a.step()
    a.step()
    assert a.timeline.step == 7
    monkeypatch.undo()
    a.close()
    again = Node.open(tmp_path / "A")
    assert again.timeline.step == 5 and again.timeline.head == head
    assert len(again.app) == 5 and len(again.archive) == 5
    assert again.app.lookup(OPEN, sha(b"lost")) is None
    again.step()
    assert again.timeline.step == 6


def test_clone_is_independent():
    a, b = pair()
    run_pair(a, b, 4)
    twin = a.clone()
    twin.submit_event(sha(b"fork"))
    twin.step()
    a.step()
    assert twin.timeline.head != a.timeline.head
    assert a.timeline.step == twin.timeline.step == 5
    assert twin.suite.counters is not a.suite.counters
