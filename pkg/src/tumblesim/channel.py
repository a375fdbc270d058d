"""Authenticated broadcast chatroom with a seeded delivery schedule."""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Hashable

from .groupcrypto import DEFAULT_GROUP, Group, GroupElement, sign, verify

MSG_LABEL = b"tumbler/msg"
CHANNEL_ID_SIZE = 32


class Kind(str, Enum):
    ANNOUNCE_PK = "AnnouncePk"
    ONION_POST = "OnionPost"
    STAGE_POST = "StagePost"
    FINAL_LIST = "FinalList"
    SIG_TAG = "SigTag"
    BLAME_OPEN = "BlameOpen"
    BLAME_EVIDENCE = "BlameEvidence"
    BLAME_PROOF = "BlameProof"


_KIND_CODES = {kind: i for i, kind in enumerate(Kind)}
_CODE_KINDS = {i: kind for kind, i in _KIND_CODES.items()}


class InvalidSignature(Exception):
    pass


@dataclass(frozen=True)
class SignedMessage:
    channel_id: bytes
    round: int
    sender_position: int
    kind: Kind
    payload: bytes
    sig: bytes

    @property
    def slot(self) -> tuple:
        return (self.channel_id, self.round, self.sender_position, self.kind)

    @staticmethod
    def signing_bytes(channel_id: bytes, round: int, sender_position: int, kind: Kind,
                      payload: bytes) -> bytes:
        return (
            MSG_LABEL
            + channel_id
            + round.to_bytes(8, "big")
            + sender_position.to_bytes(2, "big")
            + bytes([_KIND_CODES[kind]])
            + payload
        )

    @classmethod
    def create(cls, channel_id: bytes, round: int, sender_position: int, kind: Kind,
               payload: bytes, sk: int, group: Group = DEFAULT_GROUP) -> SignedMessage:
        msg = cls.signing_bytes(channel_id, round, sender_position, kind, payload)
        return cls(channel_id, round, sender_position, Kind(kind), bytes(payload),
                   sign(sk, msg, group).to_bytes())

    def verify_with(self, pk: GroupElement) -> bool:
        return verify(
            pk,
            self.signing_bytes(self.channel_id, self.round, self.sender_position, self.kind, self.payload),
            self.sig,
        )

    def to_bytes(self) -> bytes:
        return (
            self.channel_id
            + self.round.to_bytes(8, "big")
            + self.sender_position.to_bytes(2, "big")
            + bytes([_KIND_CODES[self.kind]])
            + len(self.payload).to_bytes(4, "big")
            + self.payload
            + len(self.sig).to_bytes(2, "big")
            + self.sig
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple[SignedMessage, int]:
        """Parse one message from the front of data; returns (message, bytes consumed)."""
        try:
            cid = data[:32]
            rnd = int.from_bytes(data[32:40], "big")
            pos = int.from_bytes(data[40:42], "big")
            kind = _CODE_KINDS[data[42]]
            plen = int.from_bytes(data[43:47], "big")
            payload = data[47 : 47 + plen]
            off = 47 + plen
            slen = int.from_bytes(data[off : off + 2], "big")
            sig = data[off + 2 : off + 2 + slen]
        except (IndexError, KeyError) as exc:
            raise ValueError("truncated message") from exc
        if len(cid) != 32 or len(payload) != plen or len(sig) != slen:
            raise ValueError("truncated message")
        return cls(bytes(cid), rnd, pos, kind, bytes(payload), bytes(sig)), off + 2 + slen

    def to_record(self) -> dict:
        return {
            "channel_id": self.channel_id.hex(),
            "round": self.round,
            "sender_position": self.sender_position,
            "kind": self.kind.value,
            "payload": self.payload.hex(),
            "sig": self.sig.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> SignedMessage:
        return cls(
            bytes.fromhex(rec["channel_id"]),
            int(rec["round"]),
            int(rec["sender_position"]),
            Kind(rec["kind"]),
            bytes.fromhex(rec["payload"]),
            bytes.fromhex(rec["sig"]),
        )


def pack_messages(msgs) -> bytes:
    return b"".join(m.to_bytes() for m in msgs)


def unpack_messages(data: bytes) -> list[SignedMessage]:
    out = []
    while data:
        msg, used = SignedMessage.from_bytes(data)
        out.append(msg)
        data = data[used:]
    return out


Roster = Callable[[int], dict]


class Channel:
    """Reliable authenticated broadcast.

    ``roster(round)`` maps a round number to {sender position: signing key}.
    Every accepted message is delivered once to every subscriber (sender
    included) after a delay drawn from the channel's own seeded generator.
    """

    def __init__(self, channel_id: bytes, roster: Roster, seed: int, max_delay: int = 2):
        if len(channel_id) != CHANNEL_ID_SIZE:
            raise ValueError("channel id must be 32 bytes")
        if max_delay < 1:
            raise ValueError("max_delay must be at least 1")
        self.channel_id = bytes(channel_id)
        self.roster = roster
        self.max_delay = max_delay
        self.rng = random.Random(seed)
        self.now = 0
        self.subscribers: list[Hashable] = []
        self.transcript: list[tuple[int, SignedMessage]] = []
        self.rejected: list[tuple[int, SignedMessage]] = []
        self._slots: dict[tuple, list[SignedMessage]] = {}
        self._pending: list = []
        self._seq = 0
        self._last_at: dict[tuple, int] = {}

    def subscribe(self, recipient: Hashable) -> None:
        if recipient not in self.subscribers:
            self.subscribers.append(recipient)

    def sender_key(self, msg: SignedMessage) -> GroupElement | None:
        return self.roster(msg.round).get(msg.sender_position)

    def authentic(self, msg: SignedMessage) -> bool:
        pk = self.sender_key(msg)
        return msg.channel_id == self.channel_id and pk is not None and msg.verify_with(pk)

    def broadcast(self, msg: SignedMessage) -> None:
        if not self.authentic(msg):
            self.rejected.append((self.now, msg))
            raise InvalidSignature(f"{msg.kind.value} from position {msg.sender_position} refused")
        self.transcript.append((self.now, msg))
        same_slot = self._slots.setdefault(msg.slot, [])
        if all(m.payload != msg.payload for m in same_slot):
            same_slot.append(msg)
        sender = (msg.round, msg.sender_position)
        at = max(self.now + self.rng.randint(1, self.max_delay), self._last_at.get(sender, 0))
        self._last_at[sender] = at
        for recipient in self.subscribers:
            heapq.heappush(self._pending, (at, self._seq, recipient, msg))
            self._seq += 1

    def tick(self) -> list[tuple[Hashable, SignedMessage]]:
        self.now += 1
        due = []
        while self._pending and self._pending[0][0] <= self.now:
            _, _, recipient, msg = heapq.heappop(self._pending)
            due.append((recipient, msg))
        return due

    def equivocation_check(self, slot: tuple) -> tuple[SignedMessage, SignedMessage] | None:
        msgs = self._slots.get(slot, [])
        if len(msgs) >= 2:
            return msgs[0], msgs[1]
        return None

    def equivocations(self) -> list[tuple[SignedMessage, SignedMessage]]:
        return [(m[0], m[1]) for m in self._slots.values() if len(m) >= 2]

    def messages(self) -> list[SignedMessage]:
        return [m for _, m in self.transcript]

    def export_lines(self) -> list[str]:
        lines = []
        for tick, msg in self.transcript:
            rec = {"tick": tick, **msg.to_record()}
            lines.append(json.dumps(rec, separators=(",", ":")))
        return lines
