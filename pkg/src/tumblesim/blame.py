"""Reveal-and-replay blame.

Once secret layer keys are revealed, anyone can recompute what each chain
position should have posted and compare it against what was posted. Signed
channel posts are authoritative; a participant's own claims only matter where
no signed post is available, and conflicting claims open a dispute that the
accused can settle by presenting signed originals within a time window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .channel import Kind, SignedMessage, unpack_messages
from .groupcrypto import (
    DEFAULT_GROUP,
    SCALAR_SIZE,
    CryptoError,
    Group,
    GroupElement,
    InvalidEncoding,
    scalar_from_bytes,
    scalar_to_bytes,
)
from .onion import MalformedLayer, MalformedPost, Onion, StagePost, peel_onion, same_multiset

_ABSENT = 0xFFFFFFFF
POST_KINDS = (Kind.STAGE_POST, Kind.FINAL_LIST)


class Reason(str, Enum):
    BAD_PEEL = "BadPeel"
    BAD_EVIDENCE = "BadEvidence"
    FALSE_ACCUSATION = "FalseAccusation"
    TIMEOUT = "Timeout"
    SILENT = "Silent"
    BAD_ONION = "BadOnion"
    EQUIVOCATION = "Equivocation"


@dataclass(frozen=True)
class BlameEvidence:
    """Revealed layer key plus the claimed input and output posts (StagePost wire bytes)."""

    position: int
    revealed_sk: int
    claimed_in: bytes | None
    claimed_out: bytes | None

    def to_bytes(self) -> bytes:
        out = self.position.to_bytes(2, "big") + scalar_to_bytes(self.revealed_sk)
        for part in (self.claimed_in, self.claimed_out):
            if part is None:
                out += _ABSENT.to_bytes(4, "big")
            else:
                out += len(part).to_bytes(4, "big") + part
        return out

    @classmethod
    def from_bytes(cls, data: bytes, group: Group = DEFAULT_GROUP) -> BlameEvidence:
        if len(data) < 2 + SCALAR_SIZE + 8:
            raise InvalidEncoding("evidence too short")
        position = int.from_bytes(data[:2], "big")
        sk = scalar_from_bytes(data[2 : 2 + SCALAR_SIZE], group)
        off = 2 + SCALAR_SIZE
        parts = []
        for _ in range(2):
            n = int.from_bytes(data[off : off + 4], "big")
            off += 4
            if n == _ABSENT:
                parts.append(None)
                continue
            if off + n > len(data):
                raise InvalidEncoding("evidence truncated")
            parts.append(bytes(data[off : off + n]))
            off += n
        if off != len(data):
            raise InvalidEncoding("trailing bytes in evidence")
        return cls(position, sk, parts[0], parts[1])


@dataclass(frozen=True)
class Dispute:
    """Conflicting claims about the post made by position ``boundary``."""

    boundary: int
    claims: tuple  # ((claimant position, claimed bytes), ...)

    @property
    def parties(self) -> tuple[int, ...]:
        return tuple(sorted({who for who, _ in self.claims}))


@dataclass
class _Context:
    n: int
    channel_id: bytes | None
    round: int | None
    roster: Mapping[int, GroupElement] | None
    group: Group
    sks: dict
    boundaries: dict
    openers: tuple


@dataclass(frozen=True)
class BlameVerdict:
    reasons: Mapping[int, Reason] = field(default_factory=dict)
    disputes: tuple[Dispute, ...] = ()
    context: _Context | None = field(default=None, compare=False, repr=False)

    @property
    def ejected(self) -> frozenset[int]:
        return frozenset(self.reasons)

    @property
    def pending(self) -> bool:
        return bool(self.disputes)

    def to_record(self) -> dict:
        return {str(p): r.value for p, r in sorted(self.reasons.items())}


def _authenticated(msgs: Iterable[SignedMessage], roster) -> list[SignedMessage]:
    if roster is None:
        return list(msgs)
    out = []
    for m in msgs:
        pk = roster.get(m.sender_position)
        if pk is not None and m.verify_with(pk):
            out.append(m)
    return out


def _peel_blobs(sk: int, post: StagePost, group: Group) -> list[bytes] | None:
    peeled = []
    for item in post.items:
        if not isinstance(item, Onion):
            return None
        try:
            peeled.append(peel_onion(sk, item, group).blob)
        except (CryptoError, MalformedLayer):
            return None
    return peeled


def _fully_peels(onion: Onion, sks: Sequence[int], group: Group) -> bool:
    try:
        for sk in sks:
            onion = peel_onion(sk, onion, group)
    except (CryptoError, MalformedLayer):
        return False
    return onion.depth == 0


def _peel_checks(ctx: _Context, reasons: dict) -> None:
    for i in range(1, ctx.n + 1):
        if i not in ctx.sks or i in reasons:
            continue
        inp, out = ctx.boundaries.get(i - 1), ctx.boundaries.get(i)
        if inp is None or out is None:
            # a position that stopped once blame opened is never judged here
            continue
        try:
            in_post = StagePost.from_bytes(inp, ctx.n, ctx.group)
        except (MalformedPost, ValueError):
            continue
        peeled = _peel_blobs(ctx.sks[i], in_post, ctx.group)
        try:
            out_post = StagePost.from_bytes(out, ctx.n, ctx.group)
        except (MalformedPost, ValueError):
            out_post = None
        if (
            out_post is None
            or out_post.position != i
            or peeled is None
            or not same_multiset(out_post.blobs(), peeled)
        ):
            reasons[i] = Reason.BAD_PEEL


def blame_replay(all_evidence: Sequence[BlameEvidence], channel_transcript: Sequence[SignedMessage],
                 initial_onions: Sequence[Onion], *, roster: Mapping[int, GroupElement] | None = None,
                 group: Group = DEFAULT_GROUP) -> BlameVerdict:
    """Localize deviating chain positions.

    ``initial_onions`` is indexed by builder position (entry i-1 was posted by
    position i). With a roster, transcript messages whose signatures do not
    verify are ignored.
    """
    msgs = _authenticated(channel_transcript, roster)
    announces: dict[int, GroupElement] = {}
    for m in msgs:
        if m.kind is Kind.ANNOUNCE_PK and m.sender_position not in announces:
            try:
                announces[m.sender_position] = group.deserialize(m.payload)
            except InvalidEncoding:
                pass
    n = max([len(initial_onions), *announces.keys()], default=0)
    reasons: dict[int, Reason] = {}

    posts: dict[int, bytes] = {}
    for m in msgs:
        if m.kind in POST_KINDS:
            prev = posts.get(m.sender_position)
            if prev is None:
                posts[m.sender_position] = m.payload
            elif prev != m.payload:
                reasons[m.sender_position] = Reason.EQUIVOCATION
    for pos in [p for p, r in reasons.items() if r is Reason.EQUIVOCATION]:
        posts.pop(pos, None)

    evidence: dict[int, BlameEvidence] = {}
    for ev in all_evidence:
        evidence.setdefault(ev.position, ev)
    sks = {}
    for pos in range(1, n + 1):
        ev = evidence.get(pos)
        if ev is None:
            reasons.setdefault(pos, Reason.TIMEOUT)
        elif (
            pos not in announces
            or not 0 < ev.revealed_sk < group.order
            or group.base_mul(ev.revealed_sk) != announces[pos]
        ):
            reasons.setdefault(pos, Reason.BAD_EVIDENCE)
        else:
            sks[pos] = ev.revealed_sk

    complete_initial = len(initial_onions) == n and n > 0
    if complete_initial and len(sks) == n:
        chain = [sks[i] for i in range(1, n + 1)]
        for builder, onion in enumerate(initial_onions, 1):
            if not _fully_peels(onion, chain, group):
                reasons.setdefault(builder, Reason.BAD_ONION)

    boundaries: dict[int, bytes] = {}
    if complete_initial:
        boundaries[0] = StagePost(0, tuple(initial_onions)).to_bytes()
    disputes = []
    for j in range(0, n + 1):
        claims = []
        if j >= 1 and j in evidence and evidence[j].claimed_out is not None:
            claims.append((j, evidence[j].claimed_out))
        if j < n and j + 1 in evidence and evidence[j + 1].claimed_in is not None:
            claims.append((j + 1, evidence[j + 1].claimed_in))
        authentic = boundaries.get(0) if j == 0 else posts.get(j)
        if authentic is not None:
            boundaries[j] = authentic
            for who, claim in claims:
                if claim != authentic:
                    reasons.setdefault(who, Reason.FALSE_ACCUSATION)
        elif claims:
            if len({c for _, c in claims}) == 1:
                boundaries[j] = claims[0][1]
            else:
                disputes.append(Dispute(j, tuple(claims)))

    first = msgs[0] if msgs else None
    ctx = _Context(
        n=n,
        channel_id=first.channel_id if first else None,
        round=first.round if first else None,
        roster=roster,
        group=group,
        sks=sks,
        boundaries=boundaries,
        openers=tuple(sorted({m.sender_position for m in msgs if m.kind is Kind.BLAME_OPEN})),
    )
    _peel_checks(ctx, reasons)
    if not reasons and not disputes:
        # nothing deviated, so whoever opened blame did so without cause
        for pos in ctx.openers:
            reasons[pos] = Reason.FALSE_ACCUSATION
    return BlameVerdict(dict(sorted(reasons.items())), tuple(disputes), ctx)


def blame_resolve_window(pending: BlameVerdict, proofs: Sequence, window: int) -> BlameVerdict:
    """Settle open disputes with signed originals that arrived inside the window.

    ``proofs`` holds (ticks since the window opened, BlameProof message) pairs;
    a bare message counts as arriving at tick 0. A dispute with a verified
    original ejects every claimant whose claim differs from it. A dispute
    without one ejects all of its parties.
    """
    if not pending.disputes:
        return pending
    ctx = pending.context
    roster = ctx.roster if ctx is not None else None
    originals: dict[int, bytes] = {}
    timed = [p if isinstance(p, tuple) else (0, p) for p in proofs]
    for tick, proof in sorted(timed, key=lambda p: p[0]):
        if tick >= window or roster is None or proof.kind is not Kind.BLAME_PROOF:
            continue
        sender_pk = roster.get(proof.sender_position)
        if sender_pk is None or not proof.verify_with(sender_pk):
            continue
        try:
            inner = unpack_messages(proof.payload)
        except ValueError:
            continue
        for m in inner:
            if m.kind not in POST_KINDS:
                continue
            if ctx.channel_id is not None and (m.channel_id != ctx.channel_id or m.round != ctx.round):
                continue
            pk = roster.get(m.sender_position)
            if pk is not None and m.verify_with(pk):
                originals.setdefault(m.sender_position, m.payload)

    reasons = dict(pending.reasons)
    boundaries = dict(ctx.boundaries) if ctx is not None else {}
    for d in pending.disputes:
        original = originals.get(d.boundary)
        if original is None:
            for who in d.parties:
                reasons.setdefault(who, Reason.TIMEOUT)
            continue
        boundaries[d.boundary] = original
        for who, claim in d.claims:
            if claim != original:
                reasons.setdefault(who, Reason.FALSE_ACCUSATION)
    new_ctx = replace(ctx, boundaries=boundaries) if ctx is not None else None
    if new_ctx is not None:
        _peel_checks(new_ctx, reasons)
    return BlameVerdict(dict(sorted(reasons.items())), (), new_ctx)


def originals_for(disputes: Iterable[Dispute], my_position: int,
                  held: Mapping[int, SignedMessage]) -> list[SignedMessage]:
    """Signed posts this participant can contribute to disputes it is party to."""
    out = []
    for d in disputes:
        if my_position in d.parties and d.boundary in held:
            msg = held[d.boundary]
            if msg not in out:
                out.append(msg)
    return out
