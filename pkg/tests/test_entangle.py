import dataclasses

import pytest

from oracles import sha
from timeweave.canon import DecodeError, SigningKey
from timeweave.entangle import (
    ARCHIVE_PROOF_INVALID, BAD_SIGNATURE, BROKEN_PROOF, DERIVATION_MISMATCH, DETAILED_PROOF_NEEDED,
    NO_LOWER_BOUND, NO_UPPER_BOUND, NOT_FRESH, STALE_STEP, UNKNOWN_PEER, EntanglementReceipt,
    INCOMING, TimelineThread, archive_key, make_receipt, make_thread, map_time, message_kind,
    transfer_mapping, verify_and_archive_thread, verify_bundle, verify_receipt,
)
from timeweave.node import Node, NodeConfig
from timeweave.rbbtree import RbbConfig

SMALL = RbbConfig(order=4)


def make_nodes(*specs):
    """specs: (name, emit_steps or interval)"""
    keys = {name: SigningKey.from_seed(name.encode()) for name, _ in specs}
    sids = [k.service_id(n) for n, k in keys.items()]
    nodes = {}
    for name, sched in specs:
        cfg = NodeConfig(name, interval=sched if isinstance(sched, int) else 0,
                         emit_steps=None if isinstance(sched, int) else frozenset(sched), rbb=SMALL)
        nodes[name] = Node.memory(keys[name], cfg, sids)
    return nodes


def run(nodes, rounds, offsets=None, start=1, inbox=None):
    """Lock-step rounds; a message sent in round r is consumed in the receiver's first step after r."""
    offsets = offsets or {}
    inbox = {n: [] for n in nodes} if inbox is None else inbox
    by_id = {node.sid.id: name for name, node in nodes.items()}
    history = []
    for r in range(start, start + rounds):
        sent = []
        for name, node in nodes.items():
            if r <= offsets.get(name, 0):
                continue
            out, record = node.step([m for _, m in inbox[name]])
            inbox[name] = []
            history.append((r, name, record))
            sent += [(by_id[dest.id], data) for dest, data in out]
        for dest, data in sent:
            inbox[dest].append((r, data))
    return history


def single_exchange():
    nodes = make_nodes(("A", {1}), ("B", {3}))
    run(nodes, 6, offsets={"B": 1})
    return nodes


def test_single_exchange_interval():
    nodes = single_exchange()
    a, b = nodes["A"], nodes["B"]
    mapping = map_time(a, b.sid, 2)
    assert mapping.interval == (1, 5)
    assert (mapping.receipt_step, mapping.thread_step) == (1, 3)
    assert mapping.path.start == 1 and mapping.path.end == 3
    assert [h.index for h in mapping.path.hops] == [2, 3]


def test_single_exchange_self_anchored_steps():
    nodes = single_exchange()
    a, b = nodes["A"], nodes["B"]
    assert map_time(a, b.sid, 1).interval == (1, 5)
    assert map_time(a, b.sid, 3).interval == (1, 5)
    assert map_time(a, b.sid, 4) == map_time(a, b.sid, 4)
    assert map_time(a, b.sid, 4).reason == NO_UPPER_BOUND


def test_mapping_before_any_receipt():
    nodes = make_nodes(("A", {1}), ("B", {3}))
    run(nodes, 1)
    assert map_time(nodes["A"], nodes["B"].sid, 1).reason == NO_LOWER_BOUND


def test_detailed_proof_needed_and_fetch():
    nodes = make_nodes(("A", {1}), ("B", {9}))
    run(nodes, 12, offsets={"B": 1})
    a, b = nodes["A"], nodes["B"]
    # the thread proof 1 -> 9 jumps over step 3
    assert 3 not in [h.index for h in b.timeline.prove_precedence(1, 9).hops]
    gap = map_time(a, b.sid, 3)
    assert gap.reason == DETAILED_PROOF_NEEDED and gap.gap == (1, 3, 9)
    mapping = map_time(a, b.sid, 3, fetch=b.timeline.prove_precedence)
    assert mapping.interval == (1, 11)
    assert 3 in mapping.path.indices


def test_fetch_from_a_lying_peer_is_ignored():
    nodes = make_nodes(("A", {1}), ("B", {9}))
    run(nodes, 12, offsets={"B": 1})
    a, b = nodes["A"], nodes["B"]
    liar = b.clone()
    liar.submit_event(sha(b"rewrite"))
    liar.timeline.store.truncate(2)
    liar.timeline.tick(sha(b"other"))
    for _ in range(6):
        liar.timeline.tick(sha(b"x"))
    gap = map_time(a, b.sid, 3, fetch=liar.timeline.prove_precedence)
    assert gap.reason == DETAILED_PROOF_NEEDED
    assert 3 not in a.views[b.sid.id].known


def test_thread_round_trip_and_replay():
    nodes = make_nodes(("A", set()), ("B", set()))
    a, b = nodes["A"], nodes["B"]
    a.step()
    thread = make_thread(a, b.sid)
    assert thread.proof.start == 0 and thread.proof.end == 1
    assert TimelineThread.from_bytes(thread.to_bytes()) == thread
    assert verify_and_archive_thread(b, thread)
    assert verify_and_archive_thread(b, thread).reason == STALE_STEP


def test_thread_rejects_leave_state_unchanged():
    nodes = make_nodes(("A", set()), ("B", set()))
    a, b = nodes["A"], nodes["B"]
    for _ in range(4):
        a.step()
    thread = make_thread(a, b.sid)
    before = b.views[a.sid.id].to_wire()
    forged = dataclasses.replace(thread, mark=dataclasses.replace(thread.mark, authenticator=sha(b"x")))
    assert verify_and_archive_thread(b, forged).reason == BAD_SIGNATURE
    hop = thread.proof.hops[0]
    bad_hop = dataclasses.replace(hop, value=sha(b"tamper"))
    broken = dataclasses.replace(thread, proof=dataclasses.replace(
        thread.proof, hops=(bad_hop,) + thread.proof.hops[1:]))
    assert verify_and_archive_thread(b, broken).reason == BROKEN_PROOF
    stranger = Node.memory(SigningKey.from_seed(b"Z"), NodeConfig("Z", rbb=SMALL), [])
    stranger.step()
    assert verify_and_archive_thread(b, make_thread(stranger, b.sid)).reason == UNKNOWN_PEER
    assert b.views[a.sid.id].to_wire() == before
    assert b.archive.lookup(-1, archive_key(a.sid, thread.step, INCOMING)) is None


def test_thread_from_other_branch_is_broken():
    nodes = make_nodes(("A", {2}), ("B", {2}))
    run(nodes, 4)
    a, b = nodes["A"], nodes["B"]
    fork = a.clone()
    fork.submit_event(sha(b"N"))
    fork.step()
    fork.step()
    a.step()
    a.step()
    assert fork.timeline.head != a.timeline.head
    out_a = make_thread(a, b.sid)
    out_f = make_thread(fork, b.sid)
    b2 = b.clone()
    assert verify_and_archive_thread(b, out_a)
    assert verify_and_archive_thread(b2, out_f)  # the fork verifies on its own
    later = make_nodes(("A", {2}), ("B", {2}))["B"]
    assert verify_and_archive_thread(later, out_a).reason == BROKEN_PROOF  # unknown anchor
    fork.step()
    assert verify_and_archive_thread(b, make_thread(fork, b.sid)).reason == BROKEN_PROOF


def exchange_once():
    nodes = make_nodes(("A", {1}), ("B", set()))
    a, b = nodes["A"], nodes["B"]
    out, _ = a.step()
    _, data = out[0]
    thread = TimelineThread.from_bytes(data)
    b.step()
    replies, record = b.step([data])
    assert record.threads_accepted == 1
    return a, b, thread, replies


def test_receipt_accept_and_wire():
    a, b, thread, replies = exchange_once()
    (dest, data), = replies
    assert dest.id == a.sid.id
    receipt = EntanglementReceipt.from_bytes(data)
    assert receipt.step == 2 and receipt.precedence.end == 1
    assert receipt.inclusion.proof.terminal == b.timeline.authenticator(1)
    assert verify_receipt(a, receipt)
    assert a.views[b.sid.id].known[2] == b.timeline.authenticator(2)
    assert a.receipts.get(b.sid.id, 2) == receipt
    assert a.receipts.by_local_step(1) == [receipt]


def test_receipt_not_fresh():
    a, b, thread, replies = exchange_once()
    assert verify_receipt(a, EntanglementReceipt.from_bytes(replies[0][1]))
    b.step()
    # archived in snapshot 2 but receipted as if archived in snapshot 3
    late = make_receipt(b, a.sid, 1, snapshot=3)
    assert late.inclusion.proof.terminal == b.timeline.authenticator(1)
    assert verify_receipt(a, late).reason == NOT_FRESH


def test_receipt_derivation_mismatch_every_bit_of_f():
    a, b, _, replies = exchange_once()
    receipt = EntanglementReceipt.from_bytes(replies[0][1])
    for bit in range(0, len(receipt.state_digest) * 8, 7):
        f = bytearray(receipt.state_digest)
        f[bit // 8] ^= 1 << (bit % 8)
        bad = dataclasses.replace(receipt, state_digest=bytes(f))
        assert verify_receipt(a, bad).reason == DERIVATION_MISMATCH
    assert verify_receipt(a, receipt)


def test_receipt_for_unsent_thread_or_wrong_bytes():
    a, b, thread, replies = exchange_once()
    receipt = EntanglementReceipt.from_bytes(replies[0][1])
    assert verify_receipt(a, dataclasses.replace(receipt, thread_step=7)).reason == ARCHIVE_PROOF_INVALID
    a.sent_threads[(b.sid.id, 1)] = a.sent_threads[(b.sid.id, 1)] + b"\x00"
    assert verify_receipt(a, receipt).reason == ARCHIVE_PROOF_INVALID


def test_receipt_bad_signature():
    a, b, _, replies = exchange_once()
    receipt = EntanglementReceipt.from_bytes(replies[0][1])
    mark = dataclasses.replace(receipt.mark, step=receipt.mark.step + 1)
    assert verify_receipt(a, dataclasses.replace(receipt, mark=mark)).reason == BAD_SIGNATURE


def test_two_threads_two_receipts_share_components():
    nodes = make_nodes(("A", {1}), ("B", set()), ("C", {1}))
    a, b, c = nodes["A"], nodes["B"], nodes["C"]
    ta = [d for dest, d in a.step()[0] if dest.id == b.sid.id]
    tc = [d for dest, d in c.step()[0] if dest.id == b.sid.id]
    b.step()
    out, record = b.step(ta + tc)
    assert record.threads_accepted == 2 and record.receipts_out == 2
    r1, r2 = (EntanglementReceipt.from_bytes(d) for _, d in out)
    assert r1.step == r2.step and r1.state_digest == r2.state_digest and r1.links == r2.links
    assert r1.prev == r2.prev and r1.inclusion.root_label == r2.inclusion.root_label
    assert r1.inclusion.proof != r2.inclusion.proof
    assert verify_receipt(a if r1.subject.id == a.sid.id else c, r1)


def test_message_kind_and_malformed():
    a, b, thread, replies = exchange_once()
    assert message_kind(thread.to_bytes()) == 1
    with pytest.raises(DecodeError):
        TimelineThread.from_bytes(replies[0][1])
    with pytest.raises(DecodeError):
        message_kind(b"\x04garbage")


def test_bundle_round_trip_and_truncation():
    nodes = single_exchange()
    a, b = nodes["A"], nodes["B"]
    mapping = map_time(a, b.sid, 2)
    data = transfer_mapping(a, mapping)
    result = verify_bundle(data, a.suite.fresh())
    assert result.ok and result.interval == (1, 5) and result.step == 2
    assert result.local.id == a.sid.id and result.remote.id == b.sid.id
    assert verify_bundle(data, a.suite.fresh()) == result
    for cut in (1, len(data) // 2, len(data) - 1):
        assert not verify_bundle(data[:cut], a.suite.fresh()).ok


def test_bundle_with_event_and_tampering():
    nodes = make_nodes(("A", {1}), ("B", {3}))
    inbox = {"A": [], "B": []}
    run(nodes, 2, offsets={"B": 1}, inbox=inbox)
    nodes["B"].submit_event(sha(b"doc"))
    run(nodes, 4, offsets={"B": 1}, start=3, inbox=inbox)
    a, b = nodes["A"], nodes["B"]
    assert b.event_step(sha(b"doc")) == 2
    event = b.event_proof(sha(b"doc"))
    data = transfer_mapping(a, map_time(a, b.sid, 2), event)
    assert verify_bundle(data, a.suite.fresh()).ok
    flips = 0
    for pos in range(0, len(data), max(1, len(data) // 300)):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        flips += 1
        assert not verify_bundle(bytes(bad), a.suite.fresh()).ok, pos
    assert flips > 100


def test_archive_key_orders_by_peer_then_step():
    a = SigningKey.from_seed(b"a").service_id()
    keys = [archive_key(a, s, INCOMING) for s in (1, 2, 10, 300)]
    assert keys == sorted(keys)
