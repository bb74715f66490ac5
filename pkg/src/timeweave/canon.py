"""Canonical encoding, hashing and signatures shared by every other module.

Every hashed or signed byte string in the package is produced by
:func:`encode`, a tag/length/value format::

    [1-octet type tag][8-octet big-endian length][payload]

Integers are unsigned and always carry an 8-octet big-endian payload.
Sequences carry the concatenation of their encoded items, so nested values
are self-delimiting and the encoding is injective.
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519

TAG_NONE = 0x00
TAG_UINT = 0x01
TAG_BYTES = 0x02
TAG_STR = 0x03
TAG_SEQ = 0x04
TAG_BOOL = 0x05

_HEADER = struct.Struct(">BQ")
_U64 = struct.Struct(">Q")
_UINT_HEAD = _HEADER.pack(TAG_UINT, 8)
MAX_UINT = (1 << 64) - 1


class DecodeError(ValueError):
    """Raised when a byte string is not a well-formed canonical encoding."""


def encode(value: Any) -> bytes:
    """Return the canonical encoding of ``value``.

    Accepts ``None``, ``bool``, unsigned ``int`` (< 2**64), ``bytes``,
    ``str``, lists/tuples of those, and any object exposing ``to_wire()``
    (which must return one of the former).
    """
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value: Any, out: bytearray) -> None:
    # exact-type fast paths for the two shapes every digest input is made of
    t = type(value)
    if t is bytes:
        out += _HEADER.pack(TAG_BYTES, len(value))
        out += value
        return
    if t is list or t is tuple:
        start = len(out)
        out += _HEADER.pack(TAG_SEQ, 0)
        for item in value:
            if type(item) is bytes:
                out += _HEADER.pack(TAG_BYTES, len(item))
                out += item
            elif type(item) is int and 0 <= item <= MAX_UINT:
                out += _UINT_HEAD
                out += _U64.pack(item)
            else:
                _encode_into(item, out)
        _HEADER.pack_into(out, start, TAG_SEQ, len(out) - start - _HEADER.size)
        return
    if value is None:
        out += _HEADER.pack(TAG_NONE, 0)
    elif isinstance(value, bool):
        out += _HEADER.pack(TAG_BOOL, 1)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        if value < 0 or value > MAX_UINT:
            raise ValueError(f"integer out of unsigned 64-bit range: {value}")
        out += _HEADER.pack(TAG_UINT, 8)
        out += _U64.pack(value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        payload = bytes(value)
        out += _HEADER.pack(TAG_BYTES, len(payload))
        out += payload
    elif isinstance(value, str):
        payload = value.encode("utf-8")
        out += _HEADER.pack(TAG_STR, len(payload))
        out += payload
    elif isinstance(value, (list, tuple)):
        start = len(out)
        out += _HEADER.pack(TAG_SEQ, 0)
        for item in value:
            _encode_into(item, out)
        _HEADER.pack_into(out, start, TAG_SEQ, len(out) - start - _HEADER.size)
    elif hasattr(value, "to_wire"):
        _encode_into(value.to_wire(), out)
    else:
        raise TypeError(f"cannot canonically encode {type(value).__name__}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`; sequences decode to lists.

    Raises :class:`DecodeError` on truncation, trailing bytes or unknown tags.
    """
    view = memoryview(data)
    value, pos = _decode_at(view, 0)
    if pos != len(view):
        raise DecodeError(f"trailing bytes after offset {pos}")
    return value


def decode_prefix(data: bytes, pos: int = 0) -> tuple[Any, int]:
    """Decode one value starting at ``pos``; return it and the next offset."""
    return _decode_at(memoryview(data), pos)


def _decode_at(view: memoryview, pos: int) -> tuple[Any, int]:
    if pos + _HEADER.size > len(view):
        raise DecodeError("truncated header")
    tag, length = _HEADER.unpack_from(view, pos)
    pos += _HEADER.size
    end = pos + length
    if end > len(view):
        raise DecodeError("truncated payload")
    if tag == TAG_NONE:
        if length:
            raise DecodeError("non-empty none")
        return None, end
    if tag == TAG_BOOL:
        if length != 1 or view[pos] not in (0, 1):
            raise DecodeError("bad bool")
        return bool(view[pos]), end
    if tag == TAG_UINT:
        if length != 8:
            raise DecodeError("bad integer width")
        return _U64.unpack_from(view, pos)[0], end
    if tag == TAG_BYTES:
        return bytes(view[pos:end]), end
    if tag == TAG_STR:
        try:
            return bytes(view[pos:end]).decode("utf-8"), end
        except UnicodeDecodeError as exc:
            raise DecodeError("bad utf-8") from exc
    if tag == TAG_SEQ:
        items = []
        cur = pos
        while cur < end:
            item, cur = _decode_at(view[:end], cur)
            items.append(item)
        return items, end
    raise DecodeError(f"unknown tag 0x{tag:02x}")


# -- hashing ---------------------------------------------------------------

HASH_ALGORITHMS = {
    # name: (tag used in file headers, output width in octets)
    "sha256": (1, 32),
    "sha1": (2, 20),
    "sha3_256": (3, 32),
    "sha512": (4, 64),
}


class SigScheme(IntEnum):
    ED25519 = 1
    ECDSA_P256 = 2


SIG_SCHEMES = {"ed25519": SigScheme.ED25519, "ecdsa-p256": SigScheme.ECDSA_P256}


@dataclass
class Suite:
    """Deployment-wide crypto configuration plus operation counters.

    One instance per node keeps the cost counters per node; the counters
    never influence any output.
    """

    algorithm: str = "sha256"
    sig_scheme: SigScheme = SigScheme.ED25519
    counters: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.algorithm not in HASH_ALGORITHMS:
            raise ValueError(f"unknown hash algorithm {self.algorithm!r}")
        self.sig_scheme = SigScheme(self.sig_scheme)
        self.hash_tag, self.width = HASH_ALGORITHMS[self.algorithm]
        self.zero = bytes(self.width)
        self._new = getattr(hashlib, self.algorithm)

    @classmethod
    def from_config(cls, config: dict) -> "Suite":
        hcfg = config.get("hash", {})
        algorithm = hcfg.get("algorithm", "sha256")
        suite = cls(algorithm, SIG_SCHEMES[config.get("sig", {}).get("scheme", "ed25519")])
        width = hcfg.get("width_octets")
        if width is not None and width != suite.width:
            raise ValueError(f"{algorithm} produces {suite.width} octets, config says {width}")
        return suite

    @classmethod
    def from_hash_tag(cls, tag: int, sig_scheme: SigScheme = SigScheme.ED25519) -> "Suite":
        for name, (t, _) in HASH_ALGORITHMS.items():
            if t == tag:
                return cls(name, sig_scheme)
        raise ValueError(f"unknown hash tag {tag}")

    def to_config(self) -> dict:
        scheme = {v: k for k, v in SIG_SCHEMES.items()}[self.sig_scheme]
        return {"hash": {"algorithm": self.algorithm, "width_octets": self.width},
                "sig": {"scheme": scheme}}

    def fresh(self) -> "Suite":
        """Same configuration, independent counters."""
        return Suite(self.algorithm, self.sig_scheme)

    def hash(self, data: bytes) -> bytes:
        counters = self.counters
        counters["hash_calls"] += 1
        counters["hash_bytes"] += len(data)
        return self._new(data).digest()

    def h(self, *fields: Any) -> bytes:
        """``hash(encode(fields))``: the one-way combiner used everywhere."""
        out = bytearray()
        _encode_into(fields, out)
        return self.hash(bytes(out))

    def is_digest(self, value: Any) -> bool:
        return isinstance(value, bytes) and len(value) == self.width


DEFAULT_SUITE = Suite()


# -- signatures ------------------------------------------------------------

@dataclass(frozen=True)
class ServiceId:
    """A service's identity: scheme byte followed by its raw public key."""

    id: bytes
    name: str = field(default="", compare=False)

    @property
    def scheme(self) -> int:
        return self.id[0] if self.id else 0

    def to_wire(self) -> bytes:
        # the display name is local metadata and never travels
        return self.id

    @classmethod
    def from_wire(cls, wire: bytes, name: str = "") -> "ServiceId":
        if not isinstance(wire, bytes) or not wire:
            raise DecodeError("bad service id")
        return cls(wire, name)

    def short(self) -> str:
        return self.name or self.id[1:5].hex()


@dataclass(frozen=True)
class Signature:
    scheme: int
    data: bytes

    def to_wire(self) -> list:
        return [int(self.scheme), self.data]

    @classmethod
    def from_wire(cls, wire: list) -> "Signature":
        scheme, data = wire
        if not isinstance(scheme, int) or not isinstance(data, bytes):
            raise DecodeError("bad signature")
        return cls(scheme, data)


class SigningKey:
    """Private signing key for one service."""

    def __init__(self, private, scheme: SigScheme):
        self._private = private
        self.scheme = SigScheme(scheme)

    @classmethod
    def generate(cls, scheme: SigScheme = SigScheme.ED25519) -> "SigningKey":
        if scheme == SigScheme.ED25519:
            return cls(ed25519.Ed25519PrivateKey.generate(), scheme)
        return cls(ec.generate_private_key(ec.SECP256R1()), scheme)

    @classmethod
    def from_seed(cls, seed: bytes, scheme: SigScheme = SigScheme.ED25519) -> "SigningKey":
        """Deterministic key derivation, used by the simulator and tests."""
        material = hashlib.sha256(b"timeweave-key\x00" + seed).digest()
        if scheme == SigScheme.ED25519:
            return cls(ed25519.Ed25519PrivateKey.from_private_bytes(material), scheme)
        order = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
        scalar = int.from_bytes(material, "big") % (order - 1) + 1
        return cls(ec.derive_private_key(scalar, ec.SECP256R1()), scheme)

    def private_bytes(self) -> bytes:
        if self.scheme == SigScheme.ED25519:
            return self._private.private_bytes(
                serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                serialization.NoEncryption())
        return self._private.private_numbers().private_value.to_bytes(32, "big")

    @classmethod
    def from_private_bytes(cls, raw: bytes, scheme: SigScheme = SigScheme.ED25519) -> "SigningKey":
        if scheme == SigScheme.ED25519:
            return cls(ed25519.Ed25519PrivateKey.from_private_bytes(raw), scheme)
        return cls(ec.derive_private_key(int.from_bytes(raw, "big"), ec.SECP256R1()), scheme)

    def public_bytes(self) -> bytes:
        pub = self._private.public_key()
        if self.scheme == SigScheme.ED25519:
            raw = pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        else:
            raw = pub.public_bytes(serialization.Encoding.X962,
                                   serialization.PublicFormat.CompressedPoint)
        return bytes([self.scheme]) + raw

    def service_id(self, name: str = "") -> ServiceId:
        return ServiceId(self.public_bytes(), name)

    def sign(self, body: bytes) -> Signature:
        if self.scheme == SigScheme.ED25519:
            return Signature(self.scheme, self._private.sign(body))
        return Signature(self.scheme, self._private.sign(body, ec.ECDSA(hashes.SHA256())))


def sign(key: SigningKey, body: bytes) -> Signature:
    return key.sign(body)


def verify_sig(sid: ServiceId, body: bytes, sig: Signature) -> bool:
    """True iff ``sig`` is a valid signature by ``sid`` over ``body``.

    Malformed keys or signatures yield ``False``, never an exception.
    """
    try:
        if not sid.id or sig.scheme != sid.id[0]:
            return False
        raw = sid.id[1:]
        if sig.scheme == SigScheme.ED25519:
            ed25519.Ed25519PublicKey.from_public_bytes(raw).verify(sig.data, body)
        elif sig.scheme == SigScheme.ECDSA_P256:
            pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), raw)
            pub.verify(sig.data, body, ec.ECDSA(hashes.SHA256()))
        else:
            return False
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True
