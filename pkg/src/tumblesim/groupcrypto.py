"""Prime-order group cryptography.

Two backends share one interface: secp256k1 (via libsecp256k1 bindings, the
default) and a multiplicative Schnorr subgroup of Z_p* whose tiny order makes
brute-force checks possible in tests.

Group elements are written multiplicatively, so ``a * b`` is the group
operation and ``a ** s`` exponentiation by a scalar. Scalars are plain ints
reduced modulo the group order.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import coincurve
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

SCALAR_SIZE = 32
TAG_SIZE = 16
LENGTH_PREFIX = 4
MAX_PAYLOAD = 4096

LABEL_R = b"tumbler/r"
LABEL_CHAL = b"tumbler/chal"
LABEL_KDF = b"tumbler/kdf"
LABEL_NONCE = b"tumbler/nonce"

_AEAD_NONCE = bytes(12)


def _scalar_bytes(s: int) -> bytes:
    return s.to_bytes(SCALAR_SIZE, "big")


class CryptoError(Exception):
    pass


class InvalidEncoding(CryptoError, ValueError):
    """Bytes that do not decode to a value of the expected type."""


class IntegrityFailure(CryptoError):
    """Authenticated decryption failed: wrong key or tampered ciphertext."""


class PayloadTooLong(CryptoError, ValueError):
    pass


class Group(ABC):
    name: str
    order: int
    element_size: int

    @abstractmethod
    def generator(self) -> GroupElement: ...

    @abstractmethod
    def base_mul(self, s: int) -> GroupElement:
        """Return g ** s."""

    @abstractmethod
    def _exp(self, a: GroupElement, s: int) -> GroupElement: ...

    @abstractmethod
    def _op(self, a: GroupElement, b: GroupElement) -> GroupElement: ...

    @abstractmethod
    def _validate(self, data: bytes) -> None: ...

    def deserialize(self, data: bytes) -> GroupElement:
        data = bytes(data)
        if len(data) != self.element_size:
            raise InvalidEncoding(
                f"{self.name}: expected {self.element_size} bytes, got {len(data)}"
            )
        self._validate(data)
        return GroupElement(self, data)

    def random_scalar(self, rng) -> int:
        return rng.randrange(1, self.order)

    def __repr__(self):
        return f"<Group {self.name}>"


@dataclass(frozen=True)
class GroupElement:
    group: Group = field(compare=False, repr=False)
    data: bytes

    def __mul__(self, other: GroupElement) -> GroupElement:
        if not isinstance(other, GroupElement):
            return NotImplemented
        if other.group is not self.group:
            raise ValueError("elements belong to different groups")
        return self.group._op(self, other)

    def __pow__(self, s: int) -> GroupElement:
        return self.group._exp(self, s % self.group.order)

    def __bytes__(self):
        return self.data

    def hex(self) -> str:
        return self.data.hex()


class Secp256k1Group(Group):
    name = "secp256k1"
    order = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
    element_size = 33

    def __init__(self):
        self._g = GroupElement(self, coincurve.PublicKey.from_secret(_scalar_bytes(1)).format())

    def generator(self):
        return self._g

    def base_mul(self, s):
        s %= self.order
        if s == 0:
            raise ValueError("identity has no compressed encoding")
        return GroupElement(self, coincurve.PublicKey.from_secret(_scalar_bytes(s)).format())

    def _exp(self, a, s):
        if s == 0:
            raise ValueError("identity has no compressed encoding")
        return GroupElement(self, coincurve.PublicKey(a.data).multiply(_scalar_bytes(s)).format())

    def _op(self, a, b):
        combined = coincurve.PublicKey.combine_keys(
            [coincurve.PublicKey(a.data), coincurve.PublicKey(b.data)]
        )
        return GroupElement(self, combined.format())

    def _validate(self, data):
        if data[0] not in (2, 3):
            raise InvalidEncoding("not a compressed secp256k1 point")
        try:
            coincurve.PublicKey(data)
        except ValueError as exc:
            raise InvalidEncoding("not a point on secp256k1") from exc


class SchnorrGroup(Group):
    """Order-q subgroup of Z_p* with p = q*cofactor + 1."""

    def __init__(self, p: int, q: int, g: int, name: str = "schnorr"):
        if pow(g, q, p) != 1 or g in (0, 1):
            raise ValueError("g does not generate the order-q subgroup")
        self.p = p
        self.order = q
        self.name = name
        self.element_size = (p.bit_length() + 7) // 8
        self._g = self._wrap(g)

    def _wrap(self, x: int) -> GroupElement:
        return GroupElement(self, x.to_bytes(self.element_size, "big"))

    def _int(self, a: GroupElement) -> int:
        return int.from_bytes(a.data, "big")

    def generator(self):
        return self._g

    def base_mul(self, s):
        return self._exp(self._g, s % self.order)

    def _exp(self, a, s):
        return self._wrap(pow(self._int(a), s, self.p))

    def _op(self, a, b):
        return self._wrap(self._int(a) * self._int(b) % self.p)

    def _validate(self, data):
        x = int.from_bytes(data, "big")
        if not 1 <= x < self.p or pow(x, self.order, self.p) != 1:
            raise InvalidEncoding("not an element of the order-q subgroup")


SECP256K1 = Secp256k1Group()

# q is prime and close to 2**32, so exponents can be brute-forced in tests.
TINY = SchnorrGroup(
    p=4610560299938873387,
    q=4293918721,
    g=2276326194177127644,
    name="tiny-schnorr",
)

DEFAULT_GROUP: Group = SECP256K1


def scalar_to_bytes(s: int) -> bytes:
    if not 0 <= s < 2 ** (8 * SCALAR_SIZE):
        raise ValueError("scalar out of range")
    return _scalar_bytes(s)


def scalar_from_bytes(data: bytes, group: Group = DEFAULT_GROUP) -> int:
    if len(data) != SCALAR_SIZE:
        raise InvalidEncoding(f"scalar must be {SCALAR_SIZE} bytes")
    s = int.from_bytes(data, "big")
    if s >= group.order:
        raise InvalidEncoding("scalar not reduced modulo the group order")
    return s


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: GroupElement

    @property
    def group(self) -> Group:
        return self.pk.group


def keygen(rng, group: Group = DEFAULT_GROUP) -> KeyPair:
    sk = group.random_scalar(rng)
    return KeyPair(sk, group.base_mul(sk))


def hash_to_scalar(data: bytes, group: Group = DEFAULT_GROUP, label: bytes = LABEL_R) -> int:
    digest = hashlib.sha256(label + bytes(data)).digest()
    return int.from_bytes(digest, "big") % group.order


def derive_sig_scalar(channel_id: bytes, pk_enc: GroupElement) -> int:
    return hash_to_scalar(bytes(channel_id) + pk_enc.data, pk_enc.group)


def derive_sig_pk(channel_id: bytes, pk_enc: GroupElement) -> GroupElement:
    """The signing key anyone can compute from a channel id and an announced key."""
    r = derive_sig_scalar(channel_id, pk_enc)
    return pk_enc * pk_enc.group.base_mul(r)


def derive_sig_keypair(channel_id: bytes, enc_keys: KeyPair) -> KeyPair:
    group = enc_keys.group
    r = derive_sig_scalar(channel_id, enc_keys.pk)
    return KeyPair((enc_keys.sk + r) % group.order, enc_keys.pk * group.base_mul(r))


# -- hybrid encryption -------------------------------------------------------


@dataclass(frozen=True)
class Ciphertext:
    ephemeral: GroupElement
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return (
            self.ephemeral.data
            + len(self.body).to_bytes(LENGTH_PREFIX, "big")
            + self.body
            + self.tag
        )

    @classmethod
    def from_bytes(cls, data: bytes, group: Group = DEFAULT_GROUP) -> Ciphertext:
        e = group.element_size
        if len(data) < e + LENGTH_PREFIX + TAG_SIZE:
            raise InvalidEncoding("ciphertext too short")
        n = int.from_bytes(data[e : e + LENGTH_PREFIX], "big")
        if len(data) != e + LENGTH_PREFIX + n + TAG_SIZE:
            raise InvalidEncoding("ciphertext length field does not match")
        eph = group.deserialize(data[:e])
        start = e + LENGTH_PREFIX
        return cls(eph, bytes(data[start : start + n]), bytes(data[start + n :]))


def ciphertext_size(payload_len: int, group: Group = DEFAULT_GROUP) -> int:
    return group.element_size + LENGTH_PREFIX + payload_len + TAG_SIZE


def _kdf(shared: GroupElement) -> bytes:
    return hashlib.sha256(LABEL_KDF + shared.data).digest()


def pke_encrypt(pk: GroupElement, payload: bytes, rng) -> Ciphertext:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLong(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    group = pk.group
    y = group.random_scalar(rng)
    eph = group.base_mul(y)
    sealed = ChaCha20Poly1305(_kdf(pk ** y)).encrypt(_AEAD_NONCE, bytes(payload), eph.data)
    return Ciphertext(eph, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def pke_decrypt(sk: int, ct, group: Group = DEFAULT_GROUP) -> bytes:
    """Decrypt a Ciphertext (or its serialization).

    Any failure, including an ephemeral that is not a group element, surfaces as
    IntegrityFailure.
    """
    if not isinstance(ct, Ciphertext):
        try:
            ct = Ciphertext.from_bytes(ct, group)
        except InvalidEncoding as exc:
            raise IntegrityFailure(str(exc)) from exc
    try:
        key = _kdf(ct.ephemeral ** sk)
        return ChaCha20Poly1305(key).decrypt(_AEAD_NONCE, ct.body + ct.tag, ct.ephemeral.data)
    except (InvalidTag, ValueError) as exc:
        raise IntegrityFailure("authentication tag mismatch") from exc


# -- Schnorr signatures -------------------------------------------------------


@dataclass(frozen=True)
class Signature:
    commitment: GroupElement
    response: int

    def to_bytes(self) -> bytes:
        return self.commitment.data + scalar_to_bytes(self.response)

    @classmethod
    def from_bytes(cls, data: bytes, group: Group = DEFAULT_GROUP) -> Signature:
        if len(data) != signature_size(group):
            raise InvalidEncoding("bad signature length")
        e = group.element_size
        return cls(group.deserialize(data[:e]), scalar_from_bytes(data[e:], group))


def signature_size(group: Group = DEFAULT_GROUP) -> int:
    return group.element_size + SCALAR_SIZE


def _challenge(commitment: GroupElement, pk: GroupElement, msg: bytes) -> int:
    return hash_to_scalar(commitment.data + pk.data + msg, pk.group, LABEL_CHAL)


def sign(sk: int, msg: bytes, group: Group = DEFAULT_GROUP) -> Signature:
    # Deterministic nonce: same (sk, msg) always yields the same signature.
    k = hash_to_scalar(_scalar_bytes(sk) + bytes(msg), group, LABEL_NONCE) or 1
    commitment = group.base_mul(k)
    c = _challenge(commitment, group.base_mul(sk), bytes(msg))
    return Signature(commitment, (k + c * sk) % group.order)


def verify(pk: GroupElement, msg: bytes, sig) -> bool:
    try:
        group = pk.group
        if not isinstance(sig, Signature):
            sig = Signature.from_bytes(sig, group)
        if sig.commitment.group is not group or not 0 <= sig.response < group.order:
            return False
        c = _challenge(sig.commitment, pk, bytes(msg))
        return group.base_mul(sig.response) == sig.commitment * pk ** c
    except Exception:
        return False
