"""Simulated blockchain hosting mixing escrows.

The ledger is a single-owner state machine: transactions are applied one at a
time in submission order and every successful (or rejected) transaction appends
a LedgerEvent. Balances are integers in atomic coin units and conservation is
exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .groupcrypto import (
    DEFAULT_GROUP,
    Group,
    GroupElement,
    Signature,
    derive_sig_pk,
    verify,
)
from .onion import Destination

ACCOUNT_SIZE = 20
CHANNEL_ID_SIZE = 32
PAYOUT_LABEL = b"tumbler/payout"


class Phase(str, Enum):
    FILLING = "Filling"
    MIXING = "Mixing"
    CLOSED = "Closed"  # part of the contract surface; no transition leads here


class EventKind(str, Enum):
    MINT = "Mint"
    CREATE = "Create"
    DEPOSIT = "Deposit"
    WITHDRAW = "Withdraw"
    PAYOUT = "Payout"
    FLUSH = "Flush"
    REJECT = "Reject"


class RejectReason(str, Enum):
    COUNT_MISMATCH = "CountMismatch"
    BAD_SIGNATURE = "BadSignature"
    UNKNOWN_SIGNER = "UnknownSigner"
    DUPLICATE_SIGNER = "DuplicateSigner"
    WRONG_PHASE = "WrongPhase"


class LedgerError(Exception):
    pass


class InvalidParams(LedgerError, ValueError):
    pass


class InsufficientFunds(LedgerError):
    pass


class AlreadyDeposited(LedgerError):
    pass


class NotADepositor(LedgerError):
    pass


class UnknownEscrow(LedgerError, KeyError):
    pass


@dataclass
class Account:
    id: bytes
    balance: int = 0


@dataclass(frozen=True)
class Member:
    account: bytes
    pk_enc: GroupElement

    def as_record(self) -> list[str]:
        return [self.account.hex(), self.pk_enc.hex()]


@dataclass(frozen=True)
class Placement:
    where: str  # "Buffer" or "Pool"
    position: int


@dataclass
class EscrowState:
    escrow_id: bytes
    channel_id: bytes
    denomination: int
    k: int
    gas_fee: int
    buffer: list[Member] = field(default_factory=list)
    pool: list[Member] = field(default_factory=list)
    escrow_balance: int = 0
    phase: Phase = Phase.FILLING
    epoch: int = 0
    # account ids of the last buffer that filled up; a buffer that shrinks from
    # it without refilling may still pay out as a reduced round
    mixing_snapshot: frozenset = frozenset()
    history: dict = field(default_factory=dict)

    def members(self) -> list[Member]:
        return self.buffer + self.pool

    def find(self, account: bytes) -> Member | None:
        for m in self.members():
            if m.account == account:
                return m
        return None

    @property
    def reduced_round(self) -> bool:
        return (
            self.phase is Phase.FILLING
            and len(self.buffer) >= 2
            and {m.account for m in self.buffer} <= self.mixing_snapshot
        )

    @property
    def payout_size(self) -> int | None:
        if self.phase is Phase.MIXING:
            return self.k
        if self.reduced_round:
            return len(self.buffer)
        return None

    def check_invariants(self) -> None:
        assert self.escrow_balance == self.denomination * len(self.members())
        assert len(self.buffer) <= self.k
        assert self.phase is not Phase.MIXING or len(self.buffer) == self.k
        ids = [m.account for m in self.members()]
        assert len(ids) == len(set(ids))

    def public_view(self) -> dict:
        return {
            "escrow": self.escrow_id.hex(),
            "phase": self.phase.value,
            "epoch": self.epoch,
            "buffer": [m.as_record() for m in self.buffer],
            "pool": [m.as_record() for m in self.pool],
            "reduced": self.reduced_round,
        }


def payout_bytes(destinations: Sequence[bytes], escrow_id: bytes, epoch: int) -> bytes:
    """Canonical bytes every buffer member signs to authorize a payout."""
    body = b"".join(bytes(Destination(d)) for d in destinations)
    return (
        PAYOUT_LABEL
        + len(destinations).to_bytes(2, "big")
        + body
        + escrow_id
        + epoch.to_bytes(8, "big")
    )


@dataclass(frozen=True)
class PayoutMessage:
    destinations: tuple
    signer_pks: tuple
    sigs: tuple

    def __post_init__(self):
        object.__setattr__(self, "destinations", tuple(Destination(d) for d in self.destinations))
        object.__setattr__(self, "signer_pks", tuple(self.signer_pks))
        object.__setattr__(self, "sigs", tuple(self.sigs))


@dataclass(frozen=True)
class PayoutResult:
    accepted: bool
    reason: RejectReason | None = None
    index: int | None = None

    def __bool__(self):
        return self.accepted


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    kind: EventKind
    payload: dict

    @property
    def escrow(self) -> str | None:
        return self.payload.get("escrow")

    def to_record(self) -> dict:
        rec = {
            "seq": self.seq,
            "kind": self.kind.value,
            "from": self.payload.get("from"),
            "amount": self.payload.get("amount"),
            "reason": self.payload.get("reason"),
        }
        for key, value in self.payload.items():
            if key not in rec:
                rec[key] = value
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


class Ledger:
    def __init__(self, group: Group = DEFAULT_GROUP):
        self.group = group
        self.accounts: dict[bytes, Account] = {}
        self.escrows: dict[bytes, EscrowState] = {}
        self.events: list[LedgerEvent] = []
        self.gas_collected = 0
        self.minted = 0

    # -- bookkeeping ----------------------------------------------------------

    def _emit(self, kind: EventKind, **payload) -> LedgerEvent:
        ev = LedgerEvent(len(self.events) + 1, kind, payload)
        self.events.append(ev)
        return ev

    def account(self, account_id: bytes) -> Account:
        account_id = bytes(account_id)
        if len(account_id) != ACCOUNT_SIZE:
            raise InvalidParams(f"account ids are {ACCOUNT_SIZE} bytes")
        if account_id not in self.accounts:
            self.accounts[account_id] = Account(account_id)
        return self.accounts[account_id]

    def balance(self, account_id: bytes) -> int:
        acct = self.accounts.get(bytes(account_id))
        return acct.balance if acct else 0

    def escrow(self, escrow_id: bytes) -> EscrowState:
        try:
            return self.escrows[bytes(escrow_id)]
        except KeyError:
            raise UnknownEscrow(bytes(escrow_id).hex()) from None

    def _charge_gas(self, acct: Account, gas: int) -> None:
        acct.balance -= gas
        self.gas_collected += gas

    def mint(self, account_id: bytes, amount: int) -> None:
        if amount < 0:
            raise InvalidParams("cannot mint a negative amount")
        acct = self.account(account_id)
        acct.balance += amount
        self.minted += amount
        self._emit(EventKind.MINT, to=acct.id.hex(), amount=amount)

    def total_held(self) -> int:
        return (
            sum(a.balance for a in self.accounts.values())
            + sum(e.escrow_balance for e in self.escrows.values())
            + self.gas_collected
        )

    def conserved(self) -> bool:
        return self.total_held() == self.minted

    def _bump_epoch(self, st: EscrowState) -> None:
        st.epoch += 1
        st.history[st.epoch] = tuple(st.buffer)

    def buffer_at(self, escrow_id: bytes, epoch: int) -> tuple[Member, ...]:
        return self.escrow(escrow_id).history.get(epoch, ())

    # -- contract operations --------------------------------------------------

    def new_escrow(self, denomination: int, k: int, gas_fee: int = 0, *,
                   channel_id: bytes | None = None, creator: bytes | None = None,
                   parent: bytes | None = None, rng=None) -> EscrowState:
        if denomination <= 0 or k < 2 or gas_fee < 0:
            raise InvalidParams(f"denomination={denomination} k={k} gas_fee={gas_fee}")
        if channel_id is None:
            channel_id = rng.randbytes(CHANNEL_ID_SIZE) if rng is not None else os.urandom(CHANNEL_ID_SIZE)
        if len(channel_id) != CHANNEL_ID_SIZE:
            raise InvalidParams("channel id must be 32 bytes")
        acct = None
        if creator is not None:
            acct = self.account(creator)
            if acct.balance < gas_fee:
                raise InsufficientFunds("creator cannot pay gas")
        escrow_id = hashlib.sha256(b"tumbler/escrow" + len(self.escrows).to_bytes(8, "big")).digest()[:ACCOUNT_SIZE]
        st = EscrowState(escrow_id, bytes(channel_id), denomination, k, gas_fee)
        st.history[0] = ()
        self.escrows[escrow_id] = st
        if acct is not None:
            self._charge_gas(acct, gas_fee)
        self._emit(
            EventKind.CREATE,
            escrow=escrow_id.hex(),
            channel_id=st.channel_id.hex(),
            denomination=denomination,
            k=k,
            gas=gas_fee if acct is not None else 0,
            **{"from": acct.id.hex() if acct else None},
            parent=parent.hex() if parent else None,
        )
        return st

    def deposit(self, escrow_id: bytes, account_id: bytes, pk_enc: GroupElement) -> Placement:
        st = self.escrow(escrow_id)
        acct = self.account(account_id)
        if st.find(acct.id) is not None:
            raise AlreadyDeposited(acct.id.hex())
        if acct.balance < st.denomination + st.gas_fee:
            raise InsufficientFunds(f"{acct.id.hex()} holds {acct.balance}")
        if st.phase is Phase.CLOSED:
            raise InvalidParams("escrow is closed")
        self._charge_gas(acct, st.gas_fee)
        acct.balance -= st.denomination
        st.escrow_balance += st.denomination
        member = Member(acct.id, pk_enc)
        if st.phase is Phase.FILLING and len(st.buffer) < st.k:
            st.buffer.append(member)
            placement = Placement("Buffer", len(st.buffer))
            self._bump_epoch(st)
            self._maybe_start_mixing(st)
        else:
            st.pool.append(member)
            placement = Placement("Pool", len(st.pool))
        self._emit(
            EventKind.DEPOSIT,
            **{"from": acct.id.hex()},
            amount=st.denomination,
            gas=st.gas_fee,
            pk_enc=pk_enc.hex(),
            placement=placement.where,
            position=placement.position,
            **st.public_view(),
        )
        return placement

    def _maybe_start_mixing(self, st: EscrowState) -> None:
        if len(st.buffer) == st.k:
            st.phase = Phase.MIXING
            st.mixing_snapshot = frozenset(m.account for m in st.buffer)

    def _promote(self, st: EscrowState) -> int:
        moved = 0
        while st.pool and len(st.buffer) < st.k:
            st.buffer.append(st.pool.pop(0))
            moved += 1
        return moved

    def withdraw(self, escrow_id: bytes, account_id: bytes) -> int:
        st = self.escrow(escrow_id)
        acct = self.account(account_id)
        member = st.find(acct.id)
        if member is None:
            raise NotADepositor(acct.id.hex())
        if acct.balance + st.denomination < st.gas_fee:
            raise InsufficientFunds("cannot pay gas for withdrawal")
        in_buffer = member in st.buffer
        if in_buffer:
            st.buffer.remove(member)
        else:
            st.pool.remove(member)
        st.escrow_balance -= st.denomination
        acct.balance += st.denomination
        self._charge_gas(acct, st.gas_fee)
        if in_buffer:
            if st.phase is Phase.MIXING:
                st.phase = Phase.FILLING
            self._promote(st)
            self._bump_epoch(st)
            self._maybe_start_mixing(st)
        self._emit(
            EventKind.WITHDRAW,
            **{"from": acct.id.hex()},
            amount=st.denomination,
            gas=st.gas_fee,
            **st.public_view(),
        )
        return st.denomination

    def _reject(self, st: EscrowState, submitter: bytes | None, reason: RejectReason,
                index: int | None = None) -> PayoutResult:
        self._emit(
            EventKind.REJECT,
            **{"from": submitter.hex() if submitter else None},
            reason=reason.value,
            index=index,
            escrow=st.escrow_id.hex(),
            epoch=st.epoch,
        )
        return PayoutResult(False, reason, index)

    def submit_payout(self, escrow_id: bytes, msg: PayoutMessage,
                      submitter: bytes | None = None) -> PayoutResult:
        """Validate a concatenated multi-signature payout and apply it atomically."""
        st = self.escrow(escrow_id)
        size = st.payout_size
        if size is None:
            return self._reject(st, submitter, RejectReason.WRONG_PHASE)
        if not len(msg.destinations) == len(msg.sigs) == len(msg.signer_pks) == size:
            return self._reject(st, submitter, RejectReason.COUNT_MISMATCH)
        if submitter is not None and self.balance(submitter) < st.gas_fee:
            raise InsufficientFunds("submitter cannot pay gas")

        signed = payout_bytes(msg.destinations, st.escrow_id, st.epoch)
        for i, (pk, sig) in enumerate(zip(msg.signer_pks, msg.sigs)):
            if not isinstance(pk, GroupElement) or not verify(pk, signed, sig):
                return self._reject(st, submitter, RejectReason.BAD_SIGNATURE, i)

        expected = {derive_sig_pk(st.channel_id, m.pk_enc).data: m for m in st.buffer}
        matched: set[bytes] = set()
        for i, pk in enumerate(msg.signer_pks):
            if pk.data not in expected:
                return self._reject(st, submitter, RejectReason.UNKNOWN_SIGNER, i)
            if pk.data in matched:
                return self._reject(st, submitter, RejectReason.DUPLICATE_SIGNER, i)
            matched.add(pk.data)

        if submitter is not None:
            self._charge_gas(self.account(submitter), st.gas_fee)
        paid_epoch = st.epoch
        for dest in msg.destinations:
            self.account(dest).balance += st.denomination
            st.escrow_balance -= st.denomination
            self._emit(
                EventKind.PAYOUT,
                **{"from": st.escrow_id.hex()},
                to=dest.hex(),
                amount=st.denomination,
                escrow=st.escrow_id.hex(),
                epoch=paid_epoch,
            )
        consumed = [m.account.hex() for m in st.buffer]
        st.buffer.clear()
        st.mixing_snapshot = frozenset()
        st.phase = Phase.FILLING
        promoted = self.flush(st)
        self._emit(
            EventKind.FLUSH,
            **{"from": submitter.hex() if submitter else None},
            gas=st.gas_fee if submitter is not None else 0,
            consumed=consumed,
            promoted=promoted,
            paid_epoch=paid_epoch,
            **st.public_view(),
        )
        return PayoutResult(True)

    def flush(self, st: EscrowState) -> int:
        """Move pool members into the emptied buffer in FIFO order."""
        promoted = self._promote(st)
        self._bump_epoch(st)
        self._maybe_start_mixing(st)
        return promoted

    def log_lines(self) -> list[str]:
        return [ev.to_json() for ev in self.events]


# -- transactions as submitted by participants -------------------------------


@dataclass(frozen=True)
class DepositTx:
    escrow_id: bytes
    account: bytes
    pk_enc: GroupElement


@dataclass(frozen=True)
class WithdrawTx:
    escrow_id: bytes
    account: bytes


@dataclass(frozen=True)
class PayoutTx:
    escrow_id: bytes
    message: PayoutMessage
    submitter: bytes


@dataclass(frozen=True)
class CreateEscrowTx:
    """Open a follow-up escrow; denomination and gas are copied from ``parent``."""

    creator: bytes
    k: int
    channel_id: bytes
    parent: bytes


def apply_tx(ledger: Ledger, tx):
    if isinstance(tx, DepositTx):
        return ledger.deposit(tx.escrow_id, tx.account, tx.pk_enc)
    if isinstance(tx, WithdrawTx):
        return ledger.withdraw(tx.escrow_id, tx.account)
    if isinstance(tx, PayoutTx):
        return ledger.submit_payout(tx.escrow_id, tx.message, tx.submitter)
    if isinstance(tx, CreateEscrowTx):
        parent = ledger.escrow(tx.parent)
        return ledger.new_escrow(parent.denomination, tx.k, parent.gas_fee,
                                 channel_id=tx.channel_id, creator=tx.creator, parent=tx.parent)
    raise TypeError(f"not a ledger transaction: {tx!r}")
