import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from timeweave.canon import Suite
from timeweave.skiplist import (
    Hop, RangeError, SkipList, SkipListProof, StoreFormatError, combine_links, jump_path, level,
    link_digest, replay, verify,
)

import oracles


def digest(n: int) -> bytes:
    return oracles.sha(b"value-%d" % n)


def build(n: int, suite=None, **kw) -> SkipList:
    sl = SkipList.memory(suite or Suite(), **kw)
    for i in range(1, n + 1):
        sl.append(digest(i))
    return sl


@pytest.fixture(scope="module")
def list4096():
    return build(4096)


def test_level():
    assert [level(i) for i in range(1, 9)] == [0, 1, 0, 2, 0, 1, 0, 3]
    with pytest.raises(ValueError):
        level(0)


def test_genesis_element():
    sl = build(1)
    assert sl.authenticator(1) == oracles.link(1, 0, digest(1), bytes(32))
    assert sl.element(1).links == (sl.authenticator(1),)


def test_odd_element_single_link():
    sl = build(17)
    e = sl.element(17)
    assert len(e.links) == 1
    assert e.authenticator == oracles.link(17, 0, digest(17), sl.authenticator(16))


def test_element_20_links():
    sl = build(20)
    e = sl.element(20)
    expected = [oracles.link(20, j, digest(20), sl.authenticator(20 - 2 ** j)) for j in range(3)]
    assert list(e.links) == expected
    assert e.authenticator == oracles.sha(oracles.enc_seq(*[oracles.enc_bytes(x) for x in expected]))


def test_oracle_equivalence(list4096):
    values = [digest(i) for i in range(1, 4097)]
    auth = oracles.recompute_authenticators(values, bytes(32))
    assert [list4096.authenticator(i) for i in range(4097)] == auth


def test_custom_genesis_and_sha1():
    suite = Suite("sha1")
    genesis = oracles.sha(b"seed", "sha1")
    sl = SkipList.memory(suite, genesis=genesis)
    values = [oracles.sha(b"%d" % i, "sha1") for i in range(1, 41)]
    for v in values:
        sl.append(v)
    assert [sl.authenticator(i) for i in range(41)] == \
        oracles.recompute_authenticators(values, genesis, "sha1")


def test_append_rejects_wrong_width():
    with pytest.raises(ValueError):
        SkipList.memory(Suite()).append(b"short")


def test_proof_17_to_21_structure():
    sl = build(21)
    proof = sl.prove_precedence(17, 21)
    assert [(h.index, h.level) for h in proof.hops] == [(18, 0), (20, 1), (21, 0)]
    e18, e20 = sl.element(18), sl.element(20)
    assert proof.hops[0].links == (e18.links[1],)
    assert proof.hops[1].links == (e20.links[0], e20.links[2])
    assert proof.hops[2].links == ()
    assert verify(proof, sl.authenticator(17), sl.authenticator(21), sl.suite)
    # the verifier's chain: T18', T20', T21'
    steps = replay(proof, sl.authenticator(17), sl.suite)
    assert steps == [(18, sl.authenticator(18)), (20, sl.authenticator(20)), (21, sl.authenticator(21))]


def test_reflexive_proof_is_empty():
    sl = build(5)
    proof = sl.prove_precedence(3, 3)
    assert proof.hops == ()
    assert verify(proof, sl.authenticator(3), sl.authenticator(3))
    assert not verify(proof, sl.authenticator(3), sl.authenticator(4))
    assert sl.prove_existence(5).hops == ()


def test_range_errors():
    sl = build(5)
    with pytest.raises(RangeError):
        sl.prove_precedence(4, 3)
    with pytest.raises(RangeError):
        sl.prove_precedence(1, 6)
    with pytest.raises(RangeError):
        sl.prove_existence(0)


def test_genesis_anchored_proof():
    sl = build(37)
    proof = sl.prove_precedence(0, 37)
    assert verify(proof, sl.genesis, sl.head)


@pytest.mark.parametrize("m", range(0, 13))
def test_power_of_two_paths_match_bfs(m, list4096):
    j = 2 ** m
    proof = list4096.prove_precedence(1, j)
    assert len(proof.hops) == oracles.shortest_hops(1, j)
    assert proof.digest_count == oracles.path_digests([1] + proof.indices)


def test_traversal_never_worse_than_twice_shortest():
    rng = random.Random(3)
    for _ in range(300):
        j = rng.randint(1, 3000)
        i = rng.randint(1, j)
        assert len(jump_path(i, j)) <= 2 * max(1, oracles.shortest_hops(i, j))


def test_existence_proofs_verify(list4096):
    rng = random.Random(11)
    for _ in range(200):
        i = rng.randint(1, 4096)
        proof = list4096.prove_existence(i)
        assert verify(proof, list4096.authenticator(i), list4096.head)


def test_every_single_bit_flip_fails():
    sl = build(21)
    proof = sl.prove_precedence(17, 21)
    t17, t21 = sl.authenticator(17), sl.authenticator(21)
    for h, hop in enumerate(proof.hops):
        fields = [hop.value] + list(hop.links)
        for f, blob in enumerate(fields):
            for bit in range(len(blob) * 8):
                flipped = bytearray(blob)
                flipped[bit // 8] ^= 1 << (bit % 8)
                new = fields[:]
                new[f] = bytes(flipped)
                bad = Hop(hop.index, new[0], tuple(new[1:]), hop.level)
                tampered = SkipListProof(17, 21, proof.hops[:h] + (bad,) + proof.hops[h + 1:])
                assert not verify(tampered, t17, t21)
    for bit in range(256):
        flipped = bytearray(t17)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert not verify(proof, bytes(flipped), t21)


def test_malformed_proofs_are_false():
    sl = build(21)
    good = sl.prove_precedence(17, 21)
    t17, t21 = sl.authenticator(17), sl.authenticator(21)
    h18, h20, h21 = good.hops
    cases = [
        SkipListProof(17, 21, (h18, h20)),                                   # stops short
        SkipListProof(17, 21, (h20, h18, h21)),                              # non-monotone
        SkipListProof(17, 21, (Hop(18, h18.value, (), 0), h20, h21)),        # wrong link count
        SkipListProof(17, 21, (Hop(19, h18.value, h18.links, 1), h20, h21)),  # illegal jump
        SkipListProof(17, 21, (Hop(18, h18.value[:5], h18.links, 0), h20, h21)),
        SkipListProof(18, 17, ()),
        SkipListProof(-1, 21, good.hops),
    ]
    for proof in cases:
        assert not verify(proof, t17, t21)
    assert not verify(good, b"short", t21)


def test_proof_wire_round_trip():
    sl = build(100)
    proof = sl.prove_precedence(3, 97)
    assert SkipListProof.from_bytes(proof.to_bytes()) == proof


@settings(max_examples=300, deadline=None)
@given(st.integers(5, 2 ** 20).flatmap(lambda j: st.tuples(st.integers(1, j), st.just(j))))
def test_size_law(ij):
    i, j = ij
    path = jump_path(i, j)
    bound = math.ceil(math.log2(j))
    assert len(path) <= 2 * bound
    assert sum(1 + level(k) - 0 for k, _ in path) <= bound ** 2


def test_size_law_small_exceptions():
    # the two tiny-j cases where ceil(log2 j)^2 is below the unavoidable d_k + top link
    exceptions = []
    for j in range(2, 600):
        b = math.ceil(math.log2(j))
        for i in range(1, j + 1):
            path = jump_path(i, j)
            if sum(1 + level(k) for k, _ in path) > b * b or len(path) > 2 * b:
                exceptions.append((i, j))
    assert exceptions == [(1, 2), (1, 4)]


def test_persistence_round_trip(tmp_path):
    suite = Suite()
    sl = SkipList.create(tmp_path / "sl", suite)
    for i in range(1, 101):
        sl.append(digest(i), aux=b"loc%d" % i)
    heads = [sl.authenticator(i) for i in range(101)]
    sl.close()
    again = SkipList.open(tmp_path / "sl", Suite())
    assert len(again) == 100
    assert [again.authenticator(i) for i in range(101)] == heads
    assert again.aux(7) == b"loc7"
    again.append(digest(101))
    assert again.authenticator(101) == oracles.recompute_authenticators(
        [digest(i) for i in range(1, 102)], bytes(32))[101]


def test_byte_identical_stores(tmp_path):
    files = []
    for name in ("a", "b"):
        sl = SkipList.create(tmp_path / name, Suite())
        for i in range(1, 300):
            sl.append(digest(i))
        files.append(((tmp_path / name / "data").read_bytes(), (tmp_path / name / "index").read_bytes()))
        sl.close()
    assert files[0] == files[1]
    assert files[0][0][:4] == b"TWSL"


def test_crash_recovery_truncates_uncommitted_tail(tmp_path):
    sl = SkipList.create(tmp_path / "s", Suite())
    for i in range(1, 11):
        sl.append(digest(i))
    head = sl.head
    sl.close()
    with open(tmp_path / "s" / "data", "ab") as f:
        f.write(b"\x04garbage-partial-record")
    with open(tmp_path / "s" / "index", "ab") as f:
        f.write(b"\x00\x00\x01")
    again = SkipList.open(tmp_path / "s", Suite())
    assert len(again) == 10 and again.head == head
    again.append(digest(11))
    assert len(again) == 11


def test_open_with_wrong_hash_config_fails(tmp_path):
    SkipList.create(tmp_path / "s", Suite()).close()
    with pytest.raises(StoreFormatError):
        SkipList.open(tmp_path / "s", Suite("sha1"))


def test_clone_is_independent():
    sl = build(10)
    twin = sl.clone()
    twin.append(digest(99))
    sl.append(digest(11))
    assert len(sl) == len(twin) == 11
    assert sl.authenticator(10) == twin.authenticator(10)
    assert sl.head != twin.head


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 63), st.binary(min_size=0, max_size=40),
       st.binary(min_size=32, max_size=32), st.sampled_from(["sha256", "sha1"]))
def test_packed_link_matches_generic_encoding(i, j, value, prev, algorithm):
    suite = Suite(algorithm)
    prev = prev[:suite.width]
    assert link_digest(suite, i, j, value, prev) == suite.h(i, j, value, prev)
    assert link_digest(suite, i, j, value, prev) == oracles.link(i, j, value, prev, algorithm)


@pytest.mark.parametrize("index", [2, 4, 8, 1024, 3])
def test_combined_links_match_generic_encoding(index):
    suite = Suite()
    links = tuple(oracles.sha(b"%d" % n) for n in range(level(index) + 1))
    expected = links[0] if index & 1 else suite.h(*links)
    assert combine_links(suite, index, links) == expected
