"""Shared builders for ledger-level tests."""

import hashlib
import random

from tumblesim.groupcrypto import TINY, derive_sig_keypair, keygen, sign
from tumblesim.ledger import Ledger, PayoutMessage, payout_bytes


def acct(label) -> bytes:
    return hashlib.sha256(f"acct/{label}".encode()).digest()[:20]


def mixing_escrow(k, group=TINY, denom=100, gas=1, seed=0):
    """A ledger with one escrow whose buffer is full. Returns (ledger, escrow, keypairs, payers)."""
    rng = random.Random(seed)
    led = Ledger(group)
    st = led.new_escrow(denom, k, gas, channel_id=bytes(32))
    kps, payers = [], []
    for i in range(k):
        payer = acct(i)
        led.mint(payer, 1000)
        kp = keygen(rng, group)
        led.deposit(st.escrow_id, payer, kp.pk)
        kps.append(kp)
        payers.append(payer)
    return led, st, kps, payers


def signed_payout(st, kps, dests, group=TINY, epoch=None):
    msg = payout_bytes(dests, st.escrow_id, st.epoch if epoch is None else epoch)
    sig_kps = [derive_sig_keypair(st.channel_id, kp) for kp in kps]
    return PayoutMessage(tuple(dests), tuple(k.pk for k in sig_kps),
                         tuple(sign(k.sk, msg, group) for k in sig_kps))


def snapshot(led):
    """Everything that must stay put when a transaction is rejected."""
    return (
        {a: x.balance for a, x in led.accounts.items()},
        {e: (s.escrow_balance, s.phase, s.epoch, tuple(s.buffer), tuple(s.pool))
         for e, s in led.escrows.items()},
        led.gas_collected,
    )
