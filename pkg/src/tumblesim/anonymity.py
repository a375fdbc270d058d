"""External-observer anonymity check.

Works only from exported records: the ledger log and channel transcript. It
deliberately re-derives chain order and onion structure from the raw records
instead of calling into the protocol modules; only the decryption primitive is
shared, and only to open onions whose layer keys were published during blame.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass

from .groupcrypto import SECP256K1, TINY, CryptoError, pke_decrypt

MAX_EXHAUSTIVE = 7
_ADDRESS = 20
_LEN = 4
_TAG = 16
_GROUPS_BY_WIDTH = {g.element_size: g for g in (SECP256K1, TINY)}


class KTooLargeForExhaustive(Exception):
    def __init__(self, set_size: int):
        super().__init__(f"{set_size}! assignments is too many to enumerate")
        self.set_size = set_size


@dataclass(frozen=True)
class AnonymityResult:
    set_size: int
    consistent_assignments: int
    reduced: bool
    structural_ok: bool = True
    pinned: int = 0

    def to_record(self) -> dict:
        return {
            "set_size": self.set_size,
            "consistent_assignments": self.consistent_assignments,
            "reduced": self.reduced,
            "structural_ok": self.structural_ok,
            "pinned": self.pinned,
        }


def _buffers(ledger_records) -> dict:
    """(escrow hex, epoch) -> list of (account hex, pk hex) as published."""
    out = {}
    for rec in ledger_records:
        if "buffer" in rec and "epoch" in rec and "escrow" in rec:
            out[(rec["escrow"], rec["epoch"])] = [tuple(x) for x in rec["buffer"]]
    return out


def _chain(buffer) -> list:
    # position order: last three hex digits of the key, ties by the whole key
    return sorted(buffer, key=lambda m: (m[1][-3:], m[1]))


def _open_onion(blob: bytes, sks: list[int]) -> bytes | None:
    n = len(sks)
    if n == 0 or (len(blob) - _ADDRESS) % n:
        return None
    width = (len(blob) - _ADDRESS) // n - _LEN - _TAG
    group = _GROUPS_BY_WIDTH.get(width)
    if group is None:
        return None
    try:
        for sk in sks:
            blob = pke_decrypt(sk, blob, group)
    except CryptoError:
        return None
    return blob if len(blob) == _ADDRESS else None


def _pins(ledger_records, channel_records) -> dict:
    """payer -> destination links exposed by rounds whose every layer key was revealed."""
    escrow_of = {r["channel_id"]: r["escrow"] for r in ledger_records if r.get("kind") == "Create"}
    buffers = _buffers(ledger_records)
    rounds: dict = {}
    for rec in channel_records:
        key = (rec["channel_id"], rec["round"])
        rounds.setdefault(key, []).append(rec)
    pins = {}
    for (cid, rnd), msgs in rounds.items():
        announced = {m["sender_position"] for m in msgs if m["kind"] == "AnnouncePk"}
        sks = {}
        for m in msgs:
            if m["kind"] == "BlameEvidence":
                raw = bytes.fromhex(m["payload"])
                sks.setdefault(int.from_bytes(raw[:2], "big"), int.from_bytes(raw[2:34], "big"))
        n = len(announced)
        if n < 2 or set(sks) != set(range(1, n + 1)):
            continue
        buffer = buffers.get((escrow_of.get(cid), rnd))
        if buffer is None or len(buffer) != n:
            continue
        payer_at = {i: acct for i, (acct, _) in enumerate(_chain(buffer), 1)}
        chain_sks = [sks[i] for i in range(1, n + 1)]
        for m in msgs:
            if m["kind"] != "OnionPost":
                continue
            dest = _open_onion(bytes.fromhex(m["payload"]), chain_sks)
            if dest is not None:
                pins.setdefault(payer_at[m["sender_position"]], dest.hex())
    return pins


def _structural(channel_records, cid: str | None, rnd: int, dests: list[str]) -> bool:
    if cid is None:
        return True
    msgs = [m for m in channel_records if m["channel_id"] == cid and m["round"] == rnd]
    m_count = len(dests)
    widths = set()
    final = None
    for m in msgs:
        if m["kind"] not in ("StagePost", "FinalList"):
            continue
        raw = bytes.fromhex(m["payload"])
        count = int.from_bytes(raw[2:4], "big")
        if count != m_count or (len(raw) - 4) % max(count, 1):
            return False
        widths.add((int.from_bytes(raw[:2], "big"), (len(raw) - 4) // max(count, 1)))
        if m["kind"] == "FinalList":
            final = [raw[4 + i * _ADDRESS : 4 + (i + 1) * _ADDRESS].hex() for i in range(count)]
    if final is None:
        return True
    return Counter(final) == Counter(dests)


def analyze_anonymity(ledger_records, channel_records, k: int | None = None) -> AnonymityResult:
    """Count payer-to-destination assignments consistent with the public record.

    Looks at the first payout. ``k`` defaults to the group size of the escrow
    that paid; a payout smaller than it is reported as a reduced set.
    """
    ledger_records = list(ledger_records)
    channel_records = list(channel_records)
    flush = next((r for r in ledger_records if r.get("kind") == "Flush" and r.get("consumed")), None)
    if flush is None:
        raise ValueError("no payout in the ledger log")
    escrow, epoch = flush["escrow"], flush["paid_epoch"]
    payers = list(flush["consumed"])
    dests = [r["to"] for r in ledger_records
             if r.get("kind") == "Payout" and r.get("escrow") == escrow and r.get("epoch") == epoch]
    created = next((r for r in ledger_records if r.get("kind") == "Create" and r.get("escrow") == escrow), None)
    if k is None:
        k = created["k"] if created else len(payers)
    m = len(payers)
    if m > MAX_EXHAUSTIVE:
        raise KTooLargeForExhaustive(m)
    cid = created["channel_id"] if created else None
    structural_ok = _structural(channel_records, cid, epoch, dests)

    pins = _pins(ledger_records, channel_records)
    consistent = 0
    if structural_ok and len(dests) == m:
        for perm in itertools.permutations(range(m)):
            if all(pins.get(payer, dests[j]) == dests[j] for payer, j in zip(payers, perm)):
                consistent += 1
    reduced = consistent < math.factorial(m) or m < k
    pinned = sum(1 for p in payers if p in pins)
    return AnonymityResult(m, consistent, reduced, structural_ok, pinned)
