"""Event-driven participant state machine.

A participant reacts to three kinds of events: ledger events (public chain
activity), channel messages, and timer ticks. Each call to ``step`` returns the
channel messages to broadcast and the ledger transactions to submit; the host
loop owns the clock, the channel and the ledger.

Keys come in two layers. The key registered with the deposit (``enc_keys``)
fixes the chain position and, through the derived signing key, authenticates
every channel message. Onion layers are encrypted under a fresh per-round key
announced on the channel, so revealing it during blame exposes only that
round.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .blame import BlameEvidence, BlameVerdict, Reason, blame_replay, blame_resolve_window, originals_for
from .channel import Kind, SignedMessage, pack_messages
from .groupcrypto import (
    DEFAULT_GROUP,
    CryptoError,
    Group,
    InvalidEncoding,
    KeyPair,
    Signature,
    derive_sig_keypair,
    keygen,
    sign,
    verify,
)
from .ledger import (
    CHANNEL_ID_SIZE,
    CreateEscrowTx,
    DepositTx,
    EventKind,
    LedgerEvent,
    PayoutMessage,
    PayoutTx,
    WithdrawTx,
    payout_bytes,
)
from .onion import (
    ChainOrder,
    Destination,
    MalformedLayer,
    MalformedPost,
    Onion,
    StageIntegrityFailure,
    StagePost,
    blob_length,
    build_onion_layers,
    check_destinations,
    order_participants,
    peel_stage,
)

STAY = "StayIfPossible"
FRESH = "FreshEscrow"
RESTART_POLICIES = (STAY, FRESH)


class ParticipantPhase(str, Enum):
    IDLE = "Idle"
    DEPOSITED = "Deposited"
    ANNOUNCED = "Announced"
    ORDERED = "Ordered"
    SHUFFLING = "Shuffling"
    CHECKING = "Checking"
    BLAMING = "Blaming"
    SIGNING = "Signing"
    DONE = "Done"
    ABORTED = "Aborted"


TERMINAL = frozenset({ParticipantPhase.DONE, ParticipantPhase.ABORTED})


@dataclass(frozen=True)
class TimerTick:
    tick: int


@dataclass
class StepOutput:
    messages: list = field(default_factory=list)
    txs: list = field(default_factory=list)


@dataclass
class ParticipantConfig:
    label: str
    payer: bytes
    dest: Destination
    seed: int
    escrow_id: bytes
    channel_id: bytes
    group: Group = DEFAULT_GROUP
    phase_timeout: int = 10
    blame_window: int = 3
    fill_timeout: int = 40
    restart_policy: str = STAY
    history: str = "full"
    # ticks after a dispute opens before this participant sends its proof; None never sends
    proof_delay: int | None = 0
    withdraw_at: str | None = None


@dataclass
class VerdictRecord:
    channel_id: bytes
    round: int
    verdict: BlameVerdict
    accounts: dict  # chain position -> account id

    @property
    def ejected_accounts(self) -> frozenset:
        return frozenset(self.accounts[p] for p in self.verdict.ejected if p in self.accounts)


@dataclass
class Round:
    escrow_id: bytes
    channel_id: bytes
    epoch: int
    order: ChainOrder
    accounts: dict
    my_position: int
    layer: KeyPair
    deadline: int
    slots: dict = field(default_factory=dict)
    announces: dict = field(default_factory=dict)
    onion_posts: dict = field(default_factory=dict)
    parsed: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    own_blobs: list = field(default_factory=list)
    initial: list | None = None
    final: tuple | None = None
    my_in: bytes | None = None
    my_out: bytes | None = None
    blame_open: bool = False
    evidence: dict = field(default_factory=dict)
    pending: BlameVerdict | None = None
    window_start: int = 0
    proofs: list = field(default_factory=list)
    scheduled: list = field(default_factory=list)
    tags_complete_at: int | None = None
    payout_sent: bool = False

    @property
    def n(self) -> int:
        return len(self.order)

    def initial_post(self) -> StagePost:
        return StagePost(0, tuple(self.initial))


class Participant:
    """Honest protocol behaviour; adversaries override individual hooks."""

    adversarial = False

    def __init__(self, cfg: ParticipantConfig):
        if cfg.restart_policy not in RESTART_POLICIES:
            raise ValueError(f"unknown restart policy {cfg.restart_policy!r}")
        self.cfg = cfg
        self.group = cfg.group
        self.payer = bytes(cfg.payer)
        self.dest = Destination(cfg.dest)
        self.rng = random.Random(cfg.seed)
        self.phase = ParticipantPhase.IDLE
        self.escrow_id = bytes(cfg.escrow_id)
        self.channel_id = bytes(cfg.channel_id)
        self.enc_keys = keygen(self.rng, self.group)
        self.sig_keys = derive_sig_keypair(self.channel_id, self.enc_keys)
        self.round: Round | None = None
        self.used_rounds: set = set()
        self.rounds_started: list = []
        self.verdicts: list[VerdictRecord] = []
        self.banned: set = set()
        self.view: dict | None = None
        self.waiting: str | None = None  # "fill", "leave" or "create"
        self.deadline: int | None = None
        self.creator: bytes | None = None
        self.remaining: list = []
        self.early: dict = {}
        self.now = 0
        self.withdrew_by_script = False
        self._out = StepOutput()

    # -- plumbing --------------------------------------------------------------

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL

    def step(self, event) -> StepOutput:
        self._out = StepOutput()
        if self.terminal:
            return self._out
        if isinstance(event, TimerTick):
            self.now = event.tick
            self._on_tick()
        elif isinstance(event, LedgerEvent):
            self._on_ledger(event)
        elif isinstance(event, SignedMessage):
            self._on_message(event)
        else:
            raise TypeError(f"unexpected event {event!r}")
        return self._out

    def _submit(self, tx) -> None:
        self._out.txs.append(tx)

    def _broadcast(self, kind: Kind, payload: bytes) -> SignedMessage:
        r = self.round
        msg = SignedMessage.create(r.channel_id, r.epoch, r.my_position, kind, payload,
                                   self.sig_keys.sk, self.group)
        self._out.messages.append(msg)
        return msg

    def _enter(self, phase: ParticipantPhase) -> bool:
        """Move to ``phase``; False when a scripted withdrawal fired instead."""
        self.phase = phase
        if self.cfg.withdraw_at == phase.value and not self.withdrew_by_script:
            self.withdrew_by_script = True
            self._withdraw_and_abort()
            return False
        return True

    def _withdraw_and_abort(self) -> None:
        if self.waiting != "create":
            self._submit(WithdrawTx(self.escrow_id, self.payer))
        self.round = None
        self.waiting = None
        self.phase = ParticipantPhase.ABORTED

    def _wait_for_fill(self) -> None:
        self.waiting = "fill"
        self.deadline = self.now + self.cfg.fill_timeout

    # -- timers ----------------------------------------------------------------

    def _on_tick(self) -> None:
        if self.phase is ParticipantPhase.IDLE:
            self._submit(DepositTx(self.escrow_id, self.payer, self.enc_keys.pk))
            if self._enter(ParticipantPhase.DEPOSITED):
                self._wait_for_fill()
            return
        r = self.round
        if r is not None:
            due = [p for p in r.scheduled if p[0] <= self.now]
            r.scheduled = [p for p in r.scheduled if p[0] > self.now]
            for _, kind, payload in due:
                self._broadcast(kind, payload)
            if r.pending is not None:
                if self.now - r.window_start >= self.cfg.blame_window:
                    self._resolve_window()
                return
            if self.phase is ParticipantPhase.SIGNING:
                self._maybe_submit()
            if self.round is r and self.now >= r.deadline:
                self._on_round_timeout()
            return
        if self.waiting is not None and self.deadline is not None and self.now >= self.deadline:
            if self.waiting == "leave":
                self._go_fresh()
            else:
                self._withdraw_and_abort()

    def _on_round_timeout(self) -> None:
        r = self.round
        n = r.n
        missing: set[int] = set()
        if r.blame_open:
            self._evaluate_blame()
            return
        if self.phase is ParticipantPhase.ANNOUNCED:
            missing = {p for p in range(1, n + 1) if p not in r.announces}
        elif self.phase is ParticipantPhase.ORDERED:
            missing = {p for p in range(1, n + 1) if p not in r.onion_posts}
        elif self.phase is ParticipantPhase.SHUFFLING:
            missing = {min(p for p in range(1, n + 1) if p not in r.parsed)}
        elif self.phase is ParticipantPhase.SIGNING:
            missing = {p for p in range(1, n + 1) if p not in r.tags}
            if not missing:
                if self.now < r.tags_complete_at + (n + 1) * self.cfg.phase_timeout:
                    # the submitter fallback chain is still running
                    r.deadline = self.now + self.cfg.phase_timeout
                    return
                # every tag is in but no payout ever landed; give up on this escrow
                self._withdraw_and_abort()
                return
        if not missing:
            r.deadline = self.now + self.cfg.phase_timeout
            return
        self._apply_verdict(BlameVerdict({p: Reason.SILENT for p in sorted(missing)}))

    # -- ledger ----------------------------------------------------------------

    def _on_ledger(self, ev: LedgerEvent) -> None:
        p = ev.payload
        if ev.kind is EventKind.CREATE and self.waiting == "create":
            if p.get("parent") == self.escrow_id.hex() and p.get("from") == (self.creator or b"").hex():
                self._adopt(ev)
            return
        if ev.escrow != self.escrow_id.hex():
            return
        if self.waiting == "fill":
            self.deadline = self.now + self.cfg.fill_timeout
        if "buffer" in p:
            self.view = p
        if ev.kind is EventKind.FLUSH and self.payer.hex() in p.get("consumed", ()):
            self.round = None
            self.waiting = None
            self.phase = ParticipantPhase.DONE
            return
        if ev.kind in (EventKind.DEPOSIT, EventKind.WITHDRAW, EventKind.FLUSH):
            self._on_view_change()

    def _adopt(self, ev: LedgerEvent) -> None:
        self.escrow_id = bytes.fromhex(ev.payload["escrow"])
        self.channel_id = bytes.fromhex(ev.payload["channel_id"])
        self.enc_keys = keygen(self.rng, self.group)
        self.sig_keys = derive_sig_keypair(self.channel_id, self.enc_keys)
        self.banned = set()
        self.view = None
        self.early = {}
        self._submit(DepositTx(self.escrow_id, self.payer, self.enc_keys.pk))
        if self._enter(ParticipantPhase.DEPOSITED):
            self._wait_for_fill()

    def _on_view_change(self) -> None:
        v = self.view
        if v is None or self.terminal or self.waiting == "create":
            return
        r = self.round
        if r is not None and r.epoch != v["epoch"]:
            # buffer membership changed under the running round
            self.round = None
            self.phase = ParticipantPhase.DEPOSITED
            self._wait_for_fill()
        if self.round is not None:
            return
        accounts = [bytes.fromhex(a) for a, _ in v["buffer"]]
        ready = v["phase"] == "Mixing" or v.get("reduced")
        key = (self.channel_id, v["epoch"])
        if (
            ready
            and self.payer in accounts
            and not self.banned.intersection(accounts)
            and key not in self.used_rounds
        ):
            self._start_round(v)

    # -- round -----------------------------------------------------------------

    def _start_round(self, v: dict) -> None:
        members = {bytes.fromhex(pk): bytes.fromhex(a) for a, pk in v["buffer"]}
        pks = [self.group.deserialize(pk) for pk in members]
        order = order_participants(pks, self.channel_id)
        accounts = {e.position: members[e.pk_enc.data] for e in order}
        r = Round(
            escrow_id=self.escrow_id,
            channel_id=self.channel_id,
            epoch=v["epoch"],
            order=order,
            accounts=accounts,
            my_position=order.position_of(self.enc_keys.pk),
            layer=keygen(self.rng, self.group),
            deadline=self.now + self.cfg.phase_timeout,
        )
        self.round = r
        self.waiting = None
        self.used_rounds.add((self.channel_id, r.epoch))
        self.rounds_started.append((self.channel_id, r.epoch))
        if not self._enter(ParticipantPhase.ANNOUNCED):
            return
        self._broadcast(Kind.ANNOUNCE_PK, r.layer.pk.data)
        stashed = self.early.pop((self.channel_id, r.epoch), [])
        self.early = {k: m for k, m in self.early.items() if k[1] > r.epoch}
        for msg in stashed:
            if self.round is not r:
                break
            self._on_message(msg)

    def _on_message(self, m: SignedMessage) -> None:
        if m.channel_id != self.channel_id:
            return
        if self.waiting == "fill":
            self.deadline = self.now + self.cfg.fill_timeout
        r = self.round
        if r is None or m.round != r.epoch:
            if r is None or m.round > r.epoch:
                self.early.setdefault((m.channel_id, m.round), []).append(m)
            return
        prev = r.slots.get(m.slot)
        if prev is not None:
            if prev.payload != m.payload and m.kind in (Kind.STAGE_POST, Kind.FINAL_LIST):
                self._open_blame(b"equivocation")
            return
        r.slots[m.slot] = m
        handler = {
            Kind.ANNOUNCE_PK: self._on_announce,
            Kind.ONION_POST: self._on_onion_post,
            Kind.STAGE_POST: self._on_stage_post,
            Kind.FINAL_LIST: self._on_stage_post,
            Kind.SIG_TAG: self._on_tag,
            Kind.BLAME_OPEN: self._on_blame_open,
            Kind.BLAME_EVIDENCE: self._on_evidence,
            Kind.BLAME_PROOF: self._on_proof,
        }[m.kind]
        handler(m)

    def _progress(self) -> None:
        self.round.deadline = self.now + self.cfg.phase_timeout

    def _on_announce(self, m: SignedMessage) -> None:
        r = self.round
        try:
            r.announces[m.sender_position] = self.group.deserialize(m.payload)
        except InvalidEncoding:
            return
        self._progress()
        if len(r.announces) == r.n and self.phase is ParticipantPhase.ANNOUNCED:
            self._post_onion()

    def _post_onion(self) -> None:
        r = self.round
        r.order = r.order.with_layer_keys(r.announces)
        r.own_blobs = build_onion_layers(self.dest, r.order, self.rng)
        if not self._enter(ParticipantPhase.ORDERED):
            return
        self._broadcast(Kind.ONION_POST, self._onion_to_post(r.own_blobs[-1]))
        self._progress()

    def _onion_to_post(self, blob: bytes) -> bytes:
        return blob

    def _on_onion_post(self, m: SignedMessage) -> None:
        r = self.round
        if len(m.payload) != blob_length(r.n, self.group):
            return  # not a usable onion; the builder will look silent
        r.onion_posts[m.sender_position] = m.payload
        self._progress()
        if len(r.onion_posts) == r.n and self.phase is ParticipantPhase.ORDERED:
            r.initial = [Onion(r.n, r.onion_posts[p]) for p in range(1, r.n + 1)]
            if self._enter(ParticipantPhase.SHUFFLING):
                self._advance_shuffle()

    def _on_stage_post(self, m: SignedMessage) -> None:
        r = self.round
        pos = m.sender_position
        self._progress()
        try:
            post = StagePost.from_bytes(m.payload, r.n, self.group)
        except (MalformedPost, ValueError):
            post = None
        expected_kind = Kind.FINAL_LIST if pos == r.n else Kind.STAGE_POST
        if post is None or post.position != pos or len(post.items) != r.n or m.kind is not expected_kind:
            self._open_blame(b"malformed post")
            return
        r.parsed[pos] = post
        self._advance_shuffle()

    def _advance_shuffle(self) -> None:
        r = self.round
        if self.phase is not ParticipantPhase.SHUFFLING or r is None:
            return
        p = r.my_position
        if r.my_out is None:
            inp = r.initial_post() if p == 1 else r.parsed.get(p - 1)
            if inp is not None:
                self._do_peel(inp)
        if self.round is r and self.phase is ParticipantPhase.SHUFFLING and r.n in r.parsed:
            self._check_final()

    def _do_peel(self, inp: StagePost) -> None:
        r = self.round
        r.my_in = inp.to_bytes()
        try:
            post = peel_stage(r.layer.sk, inp.items, self.rng, position=r.my_position, group=self.group)
        except (StageIntegrityFailure, MalformedLayer, CryptoError):
            self._open_blame(b"peel failure")
            return
        post = self._tamper(post)
        r.my_out = post.to_bytes()
        self._broadcast(Kind.FINAL_LIST if r.my_position == r.n else Kind.STAGE_POST, r.my_out)

    def _tamper(self, post: StagePost) -> StagePost:
        return post

    def _check_final(self) -> None:
        r = self.round
        if not self._enter(ParticipantPhase.CHECKING):
            return
        r.final = tuple(r.parsed[r.n].items)
        if not check_destinations(r.final, self.dest, r.n):
            self._open_blame(b"destination check failed")
            return
        self._post_tag()

    def _post_tag(self) -> None:
        r = self.round
        if not self._enter(ParticipantPhase.SIGNING):
            return
        msg = payout_bytes(r.final, r.escrow_id, r.epoch)
        self._broadcast(Kind.SIG_TAG, sign(self.sig_keys.sk, msg, self.group).to_bytes())
        self._progress()
        self._maybe_submit()

    def _on_tag(self, m: SignedMessage) -> None:
        r = self.round
        r.tags[m.sender_position] = m.payload
        self._progress()
        if len(r.tags) == r.n and r.tags_complete_at is None:
            r.tags_complete_at = self.now
        self._maybe_submit()

    def _maybe_submit(self) -> None:
        r = self.round
        if self.phase is not ParticipantPhase.SIGNING or r.payout_sent or len(r.tags) < r.n:
            return
        if r.tags_complete_at is None:
            r.tags_complete_at = self.now
        # last position submits; each lower position takes over one timeout later
        rank = r.n - r.my_position
        if self.now < r.tags_complete_at + rank * self.cfg.phase_timeout:
            return
        signed = payout_bytes(r.final, r.escrow_id, r.epoch)
        pks, sigs = [], []
        for entry in r.order:
            raw = r.tags[entry.position]
            try:
                sig = Signature.from_bytes(raw, self.group)
            except InvalidEncoding:
                sig = None
            if sig is None or not verify(entry.pk_sig, signed, sig):
                del r.tags[entry.position]
                r.tags_complete_at = None
                return
            pks.append(entry.pk_sig)
            sigs.append(sig)
        r.payout_sent = True
        self._submit(PayoutTx(r.escrow_id, PayoutMessage(r.final, tuple(pks), tuple(sigs)), self.payer))

    # -- blame -----------------------------------------------------------------

    def _open_blame(self, why: bytes) -> None:
        r = self.round
        if r is None or r.blame_open:
            return
        r.blame_open = True
        if not self._enter(ParticipantPhase.BLAMING):
            return
        self._broadcast(Kind.BLAME_OPEN, why)
        self._post_evidence()

    def _join_blame(self) -> None:
        r = self.round
        if r.blame_open:
            return
        r.blame_open = True
        if not self._enter(ParticipantPhase.BLAMING):
            return
        self._post_evidence()

    def _make_evidence(self) -> BlameEvidence:
        r = self.round
        claimed_in = r.my_in
        if claimed_in is None:
            if r.my_position == 1 and r.initial is not None:
                claimed_in = r.initial_post().to_bytes()
            elif r.my_position > 1 and r.my_position - 1 in r.parsed:
                claimed_in = r.parsed[r.my_position - 1].to_bytes()
        return BlameEvidence(r.my_position, r.layer.sk, claimed_in, r.my_out)

    def _post_evidence(self) -> None:
        self._broadcast(Kind.BLAME_EVIDENCE, self._make_evidence().to_bytes())
        self._progress()

    def _on_blame_open(self, m: SignedMessage) -> None:
        self._join_blame()

    def _on_evidence(self, m: SignedMessage) -> None:
        r = self.round
        try:
            ev = BlameEvidence.from_bytes(m.payload, self.group)
        except (InvalidEncoding, ValueError):
            return
        if ev.position != m.sender_position:
            return
        r.evidence[ev.position] = ev
        self._progress()
        self._join_blame()
        if self.round is r and len(r.evidence) == r.n and r.pending is None:
            self._evaluate_blame()

    def _on_proof(self, m: SignedMessage) -> None:
        self.round.proofs.append((self.now, m))

    def public_record(self) -> list[SignedMessage]:
        msgs = list(self.round.slots.values())
        if self.cfg.history == "none":
            msgs = [m for m in msgs if m.kind not in (Kind.STAGE_POST, Kind.FINAL_LIST)]
        return msgs

    def roster(self) -> dict:
        return {e.position: e.pk_sig for e in self.round.order}

    def _evaluate_blame(self) -> None:
        r = self.round
        if r.pending is not None:
            return
        verdict = blame_replay(
            list(r.evidence.values()),
            self.public_record(),
            r.initial or [],
            roster=self.roster(),
            group=self.group,
        )
        if verdict.pending:
            r.pending = verdict
            r.window_start = self.now
            self._send_proof(verdict)
            return
        self._apply_verdict(verdict)

    def _send_proof(self, verdict: BlameVerdict) -> None:
        r = self.round
        if self.cfg.proof_delay is None:
            return
        held = {
            m.sender_position: m
            for m in r.slots.values()
            if m.kind in (Kind.STAGE_POST, Kind.FINAL_LIST)
        }
        originals = originals_for(verdict.disputes, r.my_position, held)
        if not originals:
            return
        payload = pack_messages(originals)
        if self.cfg.proof_delay <= 0:
            self._broadcast(Kind.BLAME_PROOF, payload)
        else:
            r.scheduled.append((self.now + self.cfg.proof_delay, Kind.BLAME_PROOF, payload))

    def _resolve_window(self) -> None:
        r = self.round
        proofs = [(max(0, t - r.window_start), m) for t, m in r.proofs]
        self._apply_verdict(blame_resolve_window(r.pending, proofs, self.cfg.blame_window))

    def _apply_verdict(self, verdict: BlameVerdict) -> None:
        r = self.round
        self.verdicts.append(VerdictRecord(r.channel_id, r.epoch, verdict, dict(r.accounts)))
        self.round = None
        self.phase = ParticipantPhase.BLAMING
        ejected = verdict.ejected
        if r.my_position in ejected:
            self._withdraw_and_abort()
            return
        self.banned |= {r.accounts[p] for p in ejected}
        remaining = [p for p in range(1, r.n + 1) if p not in ejected]
        if len(remaining) < 2:
            self._withdraw_and_abort()
            return
        self.remaining = [r.accounts[p] for p in remaining]
        if self.cfg.restart_policy == STAY:
            self.waiting = "leave"
            self.deadline = self.now + self.cfg.phase_timeout
            self._on_view_change()
        else:
            self._go_fresh()

    def _go_fresh(self) -> None:
        creator = self.remaining[0]
        self._submit(WithdrawTx(self.escrow_id, self.payer))
        self.waiting = "create"
        self.creator = creator
        self.deadline = self.now + 2 * self.cfg.phase_timeout
        self.phase = ParticipantPhase.BLAMING
        if creator == self.payer:
            self._submit(CreateEscrowTx(self.payer, len(self.remaining),
                                        self.rng.randbytes(CHANNEL_ID_SIZE), self.escrow_id))
