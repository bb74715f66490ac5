import dataclasses

from oracles import recompute_authenticators, sha
from timeweave.canon import SigningKey, Suite, SigScheme, decode, encode
from timeweave.skiplist import SkipListProof, replay, verify
from timeweave.timeline import SignedTimeMark, Timeline, system_digest


def make(seed=b"a", suite=None):
    return Timeline.memory(SigningKey.from_seed(seed), suite or Suite(), "A")


def test_first_tick_from_genesis():
    tl = make()
    suite = tl.suite
    f = sha(b"state")
    mark = tl.tick(f)
    d = system_digest(suite, f, suite.zero)
    assert mark.step == 1
    assert mark.authenticator == suite.h(1, 0, d, suite.zero)
    assert mark.verify()


def test_identical_digests_identical_authenticators():
    a, b = make(b"a"), make(b"b")
    for i in range(20):
        ma = a.tick(sha(bytes([i])), sha(b"e"))
        mb = b.tick(sha(bytes([i])), sha(b"e"))
        assert ma.authenticator == mb.authenticator
        assert ma.signature != mb.signature


def test_thousand_ticks_match_recomputation():
    tl = make()
    values = []
    for i in range(1000):
        tl.tick(sha(i.to_bytes(4, "big")), sha(b"g"))
        values.append(tl.store.value(i + 1))
    assert recompute_authenticators(values, tl.genesis, "sha256")[1:] == \
        [tl.authenticator(i) for i in range(1, 1001)]


def test_precedence_between_any_steps():
    tl = make()
    for i in range(40):
        tl.tick(sha(bytes([i])))
    for i in range(1, 41, 3):
        for j in range(i, 41, 5):
            assert verify(tl.prove_precedence(i, j), tl.authenticator(i), tl.authenticator(j))
        assert verify(tl.prove_existence(i), tl.authenticator(i), tl.head)
    assert verify(tl.prove_precedence(17, 21), tl.authenticator(17), tl.authenticator(21))


def test_state_digest_on_composed_path():
    # d_i is hashed by the level-0 hop into i; the path then continues i -> j
    tl = make()
    for i in range(64):
        tl.tick(sha(bytes([i])), sha(b"g"))
    for i in range(2, 60, 7):
        hop = tl.store.element_hop(i)
        assert hop.value == tl.store.value(i)
        first = SkipListProof(i - 1, i, (hop,))
        assert replay(first, tl.authenticator(i - 1), tl.suite)[-1] == (i, tl.authenticator(i))
        for j in (i, i + 1, 64):
            assert verify(tl.prove_precedence(i, j), tl.authenticator(i), tl.authenticator(j))
    # a direct proof may jump over i, so it need not carry d_i
    assert 9 not in tl.prove_precedence(8, 10).indices


def test_mark_signature_checks():
    tl = make()
    mark = tl.tick(sha(b"x"))
    assert SignedTimeMark.from_wire(decode(encode(mark))) == mark
    assert not dataclasses.replace(mark, step=2).verify()
    assert not dataclasses.replace(mark, authenticator=bytes(32)).verify()
    other = make(b"other").tick(sha(b"x"))
    assert not dataclasses.replace(mark, owner=other.owner).verify()


def test_ecdsa_timeline():
    tl = Timeline.memory(SigningKey.from_seed(b"e", SigScheme.ECDSA_P256),
                         Suite(sig_scheme=SigScheme.ECDSA_P256), "E")
    assert tl.tick(sha(b"x")).verify()


def test_file_timeline_reopens(tmp_path):
    key = SigningKey.from_seed(b"a")
    tl = Timeline.create(tmp_path / "tl", key, Suite(), "A")
    for i in range(10):
        tl.tick(sha(bytes([i])))
    head = tl.head
    tl.close()
    again = Timeline.open(tmp_path / "tl", key, Suite(), "A")
    assert again.step == 10 and again.head == head
    assert again.mark().verify()
