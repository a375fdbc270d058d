"""Layered encryption of destination addresses.

A destination is wrapped once per chain position; position 1 removes the
outermost layer. Every layer adds a fixed overhead, so the blob length of an
onion depends only on its depth and never on who built it.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .groupcrypto import (
    DEFAULT_GROUP,
    LENGTH_PREFIX,
    MAX_PAYLOAD,
    TAG_SIZE,
    Group,
    GroupElement,
    IntegrityFailure,
    PayloadTooLong,
    derive_sig_pk,
    pke_decrypt,
    pke_encrypt,
)

ADDRESS_SIZE = 20
ORDER_SUFFIX_CHARS = 3


class OnionError(Exception):
    pass


class DuplicateKey(OnionError, ValueError):
    pass


class GroupTooSmall(OnionError, ValueError):
    pass


class StageIntegrityFailure(OnionError):
    """An incoming onion did not decrypt under the stage key."""

    def __init__(self, index: int):
        super().__init__(f"onion at index {index} failed integrity check")
        self.index = index


class MalformedLayer(OnionError):
    def __init__(self, index: int, detail: str = ""):
        super().__init__(f"onion at index {index} is malformed {detail}".strip())
        self.index = index


class MalformedPost(OnionError, ValueError):
    pass


class Destination(bytes):
    """A 20-byte payout address."""

    def __new__(cls, address):
        data = bytes.fromhex(address) if isinstance(address, str) else bytes(address)
        if len(data) != ADDRESS_SIZE:
            raise ValueError(f"destination must be {ADDRESS_SIZE} bytes, got {len(data)}")
        return super().__new__(cls, data)

    def __repr__(self):
        return f"Destination({self.hex()})"


def layer_overhead(group: Group = DEFAULT_GROUP) -> int:
    return group.element_size + LENGTH_PREFIX + TAG_SIZE


def blob_length(depth: int, group: Group = DEFAULT_GROUP) -> int:
    return ADDRESS_SIZE + depth * layer_overhead(group)


def pad(dest: Destination) -> bytes:
    # Addresses are already fixed-width; the innermost plaintext is the address itself.
    return bytes(Destination(dest))


@dataclass(frozen=True)
class Onion:
    depth: int
    blob: bytes

    def well_formed(self, group: Group = DEFAULT_GROUP) -> bool:
        return self.depth >= 0 and len(self.blob) == blob_length(self.depth, group)


@dataclass(frozen=True)
class ChainEntry:
    position: int
    pk_enc: GroupElement
    pk_sig: GroupElement | None = None
    # Per-round layer key; when unset, layers are encrypted under pk_enc.
    layer_pk: GroupElement | None = None

    @property
    def encryption_key(self) -> GroupElement:
        return self.layer_pk if self.layer_pk is not None else self.pk_enc


@dataclass(frozen=True)
class ChainOrder:
    entries: tuple[ChainEntry, ...]

    def __post_init__(self):
        positions = [e.position for e in self.entries]
        if positions != list(range(1, len(positions) + 1)):
            raise ValueError("chain positions must be contiguous from 1")
        if len({e.pk_enc.data for e in self.entries}) != len(self.entries):
            raise DuplicateKey("duplicate key in chain order")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, position: int) -> ChainEntry:
        return self.entries[position - 1]

    @property
    def group(self) -> Group:
        return self.entries[0].pk_enc.group

    def position_of(self, pk_enc: GroupElement) -> int:
        for e in self.entries:
            if e.pk_enc == pk_enc:
                return e.position
        raise KeyError(pk_enc.hex())

    def with_layer_keys(self, layer_pks: dict[int, GroupElement]) -> ChainOrder:
        return ChainOrder(tuple(replace(e, layer_pk=layer_pks[e.position]) for e in self.entries))


def order_key(pk: GroupElement) -> tuple[str, str]:
    h = pk.hex()
    return h[-ORDER_SUFFIX_CHARS:], h


def order_participants(pks: Iterable[GroupElement], channel_id: bytes | None = None) -> ChainOrder:
    """Sort keys by the last three hex characters of their encoding.

    Ties fall back to the full encoding. With a channel id, each entry also
    carries the derived signing key.
    """
    pks = list(pks)
    if len({pk.data for pk in pks}) != len(pks):
        raise DuplicateKey("duplicate public key")
    if len(pks) < 2:
        raise GroupTooSmall("need at least two participants")
    ordered = sorted(pks, key=order_key)
    return ChainOrder(
        tuple(
            ChainEntry(i, pk, derive_sig_pk(channel_id, pk) if channel_id is not None else None)
            for i, pk in enumerate(ordered, 1)
        )
    )


def build_onion_layers(dest: Destination, order: ChainOrder, rng) -> list[bytes]:
    """Blobs at every depth: entry d is the onion with d layers left."""
    blobs = [pad(dest)]
    for entry in reversed(order.entries):
        if len(blobs[-1]) > MAX_PAYLOAD:
            raise PayloadTooLong(f"layer plaintext of {len(blobs[-1])} bytes")
        blobs.append(pke_encrypt(entry.encryption_key, blobs[-1], rng).to_bytes())
    return blobs


def build_onion(dest: Destination, order: ChainOrder, rng) -> Onion:
    return Onion(len(order), build_onion_layers(dest, order, rng)[-1])


def peel_onion(sk: int, onion: Onion, group: Group = DEFAULT_GROUP) -> Onion:
    """Remove one layer. Raises IntegrityFailure or MalformedLayer(0)."""
    if not onion.well_formed(group) or onion.depth < 1:
        raise MalformedLayer(0, "(bad depth or length)")
    inner = Onion(onion.depth - 1, pke_decrypt(sk, onion.blob, group))
    if not inner.well_formed(group):
        raise MalformedLayer(0, "(inner length)")
    return inner


@dataclass(frozen=True)
class StagePost:
    position: int
    items: tuple  # Onion, or Destination once every layer is gone

    @property
    def is_final(self) -> bool:
        return all(isinstance(x, Destination) for x in self.items)

    def blobs(self) -> list[bytes]:
        return [bytes(x) if isinstance(x, Destination) else x.blob for x in self.items]

    def to_bytes(self) -> bytes:
        head = self.position.to_bytes(2, "big") + len(self.items).to_bytes(2, "big")
        return head + b"".join(self.blobs())

    @classmethod
    def from_bytes(cls, data: bytes, n: int, group: Group = DEFAULT_GROUP) -> StagePost:
        """Parse a post from a chain of length n; depth is implied by the position."""
        if len(data) < 4:
            raise MalformedPost("post shorter than its header")
        position = int.from_bytes(data[:2], "big")
        count = int.from_bytes(data[2:4], "big")
        if position > n:
            raise MalformedPost(f"position {position} beyond chain length {n}")
        depth = n - position
        width = blob_length(depth, group)
        if len(data) != 4 + count * width:
            raise MalformedPost(f"expected {count} blobs of {width} bytes")
        raw = [data[4 + i * width : 4 + (i + 1) * width] for i in range(count)]
        if depth == 0:
            items = tuple(Destination(b) for b in raw)
        else:
            items = tuple(Onion(depth, b) for b in raw)
        return cls(position, items)


def peel_stage(sk: int, incoming: Sequence[Onion], rng, position: int = 0,
               group: Group = DEFAULT_GROUP) -> StagePost:
    """Peel one layer off every onion and shuffle the results."""
    depths = {o.depth for o in incoming}
    if len(depths) > 1:
        bad = next(i for i, o in enumerate(incoming) if o.depth != incoming[0].depth)
        raise MalformedLayer(bad, "(mixed depths)")
    out = []
    for i, onion in enumerate(incoming):
        try:
            inner = peel_onion(sk, onion, group)
        except IntegrityFailure:
            raise StageIntegrityFailure(i) from None
        except MalformedLayer as exc:
            raise MalformedLayer(i, str(exc)) from None
        out.append(Destination(inner.blob) if inner.depth == 0 else inner)
    rng.shuffle(out)
    return StagePost(position, tuple(out))


def check_destinations(final: Sequence[Destination], own: Destination, n: int) -> bool:
    return len(final) == n and Counter(final)[own] > 0


def same_multiset(a: Iterable[bytes], b: Iterable[bytes]) -> bool:
    return Counter(bytes(x) for x in a) == Counter(bytes(x) for x in b)
