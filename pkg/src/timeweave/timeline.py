"""A service's secure timeline: a skip list of system digests plus signed marks."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .canon import DecodeError, ServiceId, Signature, SigningKey, Suite, encode, verify_sig
from .skiplist import SkipList, SkipListProof


@dataclass(frozen=True)
class SignedTimeMark:
    """``<i, T_i>`` signed by the timeline owner."""

    owner: ServiceId
    step: int
    authenticator: bytes
    signature: Signature

    @staticmethod
    def body(owner: ServiceId, step: int, authenticator: bytes) -> bytes:
        return encode(["time-mark", owner.id, step, authenticator])

    def verify(self) -> bool:
        return verify_sig(self.owner, self.body(self.owner, self.step, self.authenticator),
                          self.signature)

    def to_wire(self) -> list:
        return [self.owner, self.step, self.authenticator, self.signature]

    @classmethod
    def from_wire(cls, wire) -> "SignedTimeMark":
        try:
            owner, step, auth, sig = wire
            mark = cls(ServiceId.from_wire(owner), step, auth, Signature.from_wire(sig))
        except (TypeError, ValueError) as exc:
            raise DecodeError("bad time mark") from exc
        if not isinstance(step, int) or not isinstance(auth, bytes):
            raise DecodeError("bad time mark")
        return mark


def system_digest(suite: Suite, state_digest: bytes, archive_digest: bytes) -> bytes:
    """``d = h(f(S), g(E))``: the value a tick appends."""
    return suite.h(state_digest, archive_digest)


class Timeline:
    """Secure timeline of one service, driven by explicit ticks."""

    def __init__(self, key: SigningKey, store: SkipList, name: str = ""):
        self.key = key
        self.owner = key.service_id(name)
        self.store = store
        self.suite = store.suite

    @classmethod
    def memory(cls, key: SigningKey, suite: Suite, name: str = "") -> "Timeline":
        return cls(key, SkipList.memory(suite), name)

    @classmethod
    def create(cls, path: str | os.PathLike, key: SigningKey, suite: Suite, name: str = "",
               fsync: bool = False) -> "Timeline":
        return cls(key, SkipList.create(path, suite, fsync=fsync), name)

    @classmethod
    def open(cls, path: str | os.PathLike, key: SigningKey, suite: Suite, name: str = "",
             fsync: bool = False) -> "Timeline":
        return cls(key, SkipList.open(path, suite, fsync=fsync), name)

    def clone(self, suite: Suite | None = None) -> "Timeline":
        return Timeline(self.key, self.store.clone(suite), self.owner.name)

    def close(self) -> None:
        self.store.close()

    @property
    def step(self) -> int:
        return len(self.store)

    @property
    def head(self) -> bytes:
        return self.store.head

    @property
    def genesis(self) -> bytes:
        return self.store.authenticator(0)

    def authenticator(self, i: int) -> bytes:
        return self.store.authenticator(i)

    def tick(self, state_digest: bytes, archive_digest: bytes | None = None) -> SignedTimeMark:
        """Append ``h(f(S), g(E))`` and sign the new ``(step, T)``.

        A standalone timeline passes no archive digest; genesis stands in.
        """
        if archive_digest is None:
            archive_digest = self.genesis
        d = system_digest(self.suite, state_digest, archive_digest)
        i, _ = self.store.append(d)
        return self.mark(i)

    def mark(self, i: int | None = None) -> SignedTimeMark:
        """Signed mark for step ``i`` (default: the current step)."""
        i = self.step if i is None else i
        auth = self.store.authenticator(i)
        return SignedTimeMark(self.owner, i, auth,
                              self.key.sign(SignedTimeMark.body(self.owner, i, auth)))

    def prove_precedence(self, i: int, j: int) -> SkipListProof:
        return self.store.prove_precedence(i, j)

    def prove_existence(self, i: int) -> SkipListProof:
        return self.store.prove_existence(i)
