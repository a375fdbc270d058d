"""Deterministic scenario runner.

One tick proceeds as: channels advance and hand out due messages; ledger events
from the previous tick reach every participant; channel deliveries are
processed; every participant gets a timer tick. Broadcasts are accepted by the
channel immediately. Ledger transactions are applied at the end of the tick
in submission order, and their events are seen the following tick.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

from .adversary import make_adversary
from .anonymity import KTooLargeForExhaustive, analyze_anonymity
from .channel import Channel, InvalidSignature
from .config import ScenarioConfig
from .ledger import EventKind, Ledger, LedgerError, apply_tx
from .onion import Destination, order_participants
from .participant import Participant, ParticipantConfig, ParticipantPhase, TimerTick

COMPLETED = "Completed"
COMPLETED_AFTER_BLAME = "CompletedAfterBlame"
ALL_WITHDRAWN = "AllWithdrawn"


class TickBudgetExceeded(RuntimeError):
    pass


def derive_seed(seed: int, *labels) -> int:
    h = hashlib.sha256(str(seed).encode())
    for label in labels:
        h.update(b"/" + str(label).encode())
    return int.from_bytes(h.digest()[:8], "big")


def _address(seed: int, *labels) -> bytes:
    return hashlib.sha256(f"{seed}/{'/'.join(map(str, labels))}".encode()).digest()[:20]


@dataclass
class Report:
    outcome: str
    rounds_used: int
    ejections: list
    ejected_positions: list
    balance_deltas: dict
    participant_deltas: dict
    gas: int
    anonymity: dict | None
    transcript_paths: dict
    ticks: int
    budget_exceeded: bool = False
    phases: dict = field(default_factory=dict)
    failed_txs: int = 0
    gas_paid: dict = field(default_factory=dict)
    minted: int = 0

    def principal_delta(self, label: str) -> int:
        """Net change for a participant (payer plus destination) with gas added back."""
        return self.participant_deltas[label] + self.gas_paid.get(label, 0)

    def conserved(self) -> bool:
        return sum(self.balance_deltas.values()) + self.gas == 0

    def to_record(self) -> dict:
        return {
            "outcome": self.outcome,
            "rounds_used": self.rounds_used,
            "ejections": self.ejections,
            "ejected_positions": self.ejected_positions,
            "balance_deltas": self.balance_deltas,
            "participant_deltas": self.participant_deltas,
            "gas": self.gas,
            "anonymity": self.anonymity,
            "transcript_paths": self.transcript_paths,
            "ticks": self.ticks,
            "budget_exceeded": self.budget_exceeded,
            "phases": self.phases,
            "failed_txs": self.failed_txs,
            "gas_paid": self.gas_paid,
            "minted": self.minted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n"


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.group = cfg.group_obj()
        self.ledger = Ledger(self.group)
        self.channels: dict[bytes, Channel] = {}
        self._rosters: dict = {}
        self.failed_txs: list = []
        self.tick = 0
        seed = cfg.seed
        self.payers = [_address(seed, "payer", i) for i in range(cfg.participants)]
        self.dests = [Destination(_address(seed, "dest", i)) for i in range(cfg.participants)]
        for payer in self.payers:
            self.ledger.mint(payer, cfg.initial_balance)
        genesis_cid = hashlib.sha256(f"{seed}/genesis-channel".encode()).digest()
        genesis = self.ledger.new_escrow(cfg.denomination, cfg.k, cfg.gas_fee, channel_id=genesis_cid)
        self.genesis = genesis.escrow_id
        self._open_channel(genesis.escrow_id, genesis.channel_id)
        self.participants = self._build_participants(genesis.escrow_id, genesis.channel_id)
        for ch in self.channels.values():
            for i in range(len(self.participants)):
                ch.subscribe(i)

    # -- setup -----------------------------------------------------------------

    def _base_config(self, i: int, escrow_id: bytes, channel_id: bytes) -> ParticipantConfig:
        c = self.cfg
        return ParticipantConfig(
            label=f"p{i}",
            payer=self.payers[i],
            dest=self.dests[i],
            seed=derive_seed(c.seed, "participant", i),
            escrow_id=escrow_id,
            channel_id=channel_id,
            group=self.group,
            phase_timeout=c.phase_timeout,
            blame_window=c.blame_window,
            fill_timeout=c.fill_timeout,
            restart_policy=c.restart_policy,
            history=c.history,
        )

    def _build_participants(self, escrow_id: bytes, channel_id: bytes) -> list[Participant]:
        c = self.cfg
        configs = [self._base_config(i, escrow_id, channel_id) for i in range(c.participants)]
        probe = [Participant(cfg) for cfg in configs[: c.k]]
        order = order_participants([p.enc_keys.pk for p in probe])
        by_key = {p.enc_keys.pk.data: i for i, p in enumerate(probe)}
        # chain position in the first round -> participant index; pool members follow
        self.index_of = {e.position: by_key[e.pk_enc.data] for e in order}
        for j in range(c.n_extra_pool):
            self.index_of[c.k + 1 + j] = c.k + j
        self.position_of_account = {self.payers[i]: pos for pos, i in self.index_of.items()}

        for w in c.withdrawals:
            i = self.index_of[w.position]
            configs[i] = replace(configs[i], withdraw_at=w.phase)
        for adv in c.adversaries:
            if adv.kind == "false_accuser_pair":
                i = self.index_of[adv.position]
                configs[i] = replace(configs[i], proof_delay=adv.proof_delay)
        participants: list[Participant] = [Participant(cfg) for cfg in configs]
        for adv in c.adversaries:
            for pos in adv.positions():
                i = self.index_of[pos]
                participants[i] = make_adversary(adv, configs[i], pos)
        return participants

    def _open_channel(self, escrow_id: bytes, channel_id: bytes) -> Channel:
        def roster(rnd: int, _escrow=escrow_id, _cid=channel_id) -> dict:
            key = (_escrow, rnd)
            if key not in self._rosters:
                members = self.ledger.buffer_at(_escrow, rnd)
                if len(members) < 2:
                    self._rosters[key] = {}
                else:
                    order = order_participants([m.pk_enc for m in members], _cid)
                    self._rosters[key] = {e.position: e.pk_sig for e in order}
            return self._rosters[key]

        ch = Channel(channel_id, roster, derive_seed(self.cfg.seed, "channel", channel_id.hex()),
                     self.cfg.max_delay)
        ch.now = self.tick
        self.channels[channel_id] = ch
        for i in range(len(getattr(self, "participants", []))):
            ch.subscribe(i)
        return ch

    # -- loop ------------------------------------------------------------------

    def honest(self) -> list[Participant]:
        return [p for p in self.participants if not p.adversarial]

    def _dispatch(self, out, txs: list) -> None:
        for msg in out.messages:
            ch = self.channels.get(msg.channel_id)
            if ch is None:
                continue
            try:
                ch.broadcast(msg)
            except InvalidSignature:
                pass
        txs.extend(out.txs)

    def _apply(self, txs: list) -> list:
        start = len(self.ledger.events)
        for tx in txs:
            try:
                apply_tx(self.ledger, tx)
            except LedgerError as exc:
                self.failed_txs.append((self.tick, tx, str(exc)))
        new = self.ledger.events[start:]
        for ev in new:
            if ev.kind is EventKind.CREATE:
                p = ev.payload
                self._open_channel(bytes.fromhex(p["escrow"]), bytes.fromhex(p["channel_id"]))
        return new

    def run(self) -> bool:
        """Drive ticks until every honest participant is finished; False if the budget ran out."""
        pending = []
        for t in range(1, self.cfg.tick_budget + 1):
            self.tick = t
            deliveries = []
            for ch in self.channels.values():
                deliveries.extend(ch.tick())
            txs: list = []
            for ev in pending:
                for p in self.participants:
                    self._dispatch(p.step(ev), txs)
            for recipient, msg in deliveries:
                self._dispatch(self.participants[recipient].step(msg), txs)
            for p in self.participants:
                self._dispatch(p.step(TimerTick(t)), txs)
            pending = self._apply(txs)
            if all(p.terminal for p in self.honest()):
                return True
        return False

    # -- reporting -------------------------------------------------------------

    def ledger_records(self) -> list[dict]:
        return [ev.to_record() for ev in self.ledger.events]

    def channel_records(self) -> list[dict]:
        out = []
        for ch in self.channels.values():
            for tick, msg in ch.transcript:
                out.append({"tick": tick, **msg.to_record()})
        return out

    def channel_lines(self) -> list[str]:
        return [line for ch in self.channels.values() for line in ch.export_lines()]

    def _verdicts(self) -> list:
        seen = {}
        for p in self.honest():
            for rec in p.verdicts:
                seen.setdefault((rec.channel_id, rec.round), rec)
        return [seen[k] for k in sorted(seen, key=lambda k: (list(self.channels).index(k[0]), k[1]))]

    def report(self, finished: bool, paths: dict | None = None) -> Report:
        verdicts = self._verdicts()
        ejections = []
        ejected_positions = set()
        for rec in verdicts:
            ejections.append({
                "channel_id": rec.channel_id.hex(),
                "round": rec.round,
                "reasons": rec.verdict.to_record(),
                "accounts": {str(pos): rec.accounts[pos].hex() for pos in sorted(rec.verdict.ejected)},
            })
            for acct in rec.ejected_accounts:
                ejected_positions.add(self.position_of_account.get(acct))
        deltas = {}
        for acct in sorted(self.ledger.accounts):
            start = self.cfg.initial_balance if acct in self.payers else 0
            deltas[acct.hex()] = self.ledger.accounts[acct].balance - start
        for eid, st in self.ledger.escrows.items():
            deltas[f"escrow:{eid.hex()}"] = st.escrow_balance
        participant_deltas = {
            p.cfg.label: deltas.get(p.payer.hex(), 0) + deltas.get(bytes(p.dest).hex(), 0)
            for p in self.participants
        }
        gas_by_account: dict = {}
        for ev in self.ledger.events:
            payer = ev.payload.get("from")
            if ev.payload.get("gas") and payer:
                gas_by_account[payer] = gas_by_account.get(payer, 0) + ev.payload["gas"]
        gas_paid = {p.cfg.label: gas_by_account.get(p.payer.hex(), 0) for p in self.participants}
        honest = self.honest()
        if any(p.phase is ParticipantPhase.DONE for p in honest):
            outcome = COMPLETED_AFTER_BLAME if verdicts else COMPLETED
        else:
            outcome = ALL_WITHDRAWN
        rounds = {(m.channel_id, m.round) for ch in self.channels.values() for m in ch.messages()}
        anonymity = None
        if any(ev.kind is EventKind.FLUSH and ev.payload.get("consumed") for ev in self.ledger.events):
            try:
                anonymity = analyze_anonymity(self.ledger_records(), self.channel_records()).to_record()
            except KTooLargeForExhaustive as exc:
                anonymity = {"set_size": exc.set_size, "consistent_assignments": None, "reduced": None}
        return Report(
            outcome=outcome,
            rounds_used=len(rounds),
            ejections=ejections,
            ejected_positions=sorted(ejected_positions),
            balance_deltas=deltas,
            participant_deltas=participant_deltas,
            gas=self.ledger.gas_collected,
            anonymity=anonymity,
            transcript_paths=paths or {},
            ticks=self.tick,
            budget_exceeded=not finished,
            phases={p.cfg.label: p.phase.value for p in self.participants},
            failed_txs=len(self.failed_txs),
            gas_paid=gas_paid,
            minted=self.ledger.minted,
        )

    def write(self, out_dir, finished: bool) -> Report:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"ledger": "ledger.jsonl", "channel": "channel.jsonl", "report": "report.json"}
        with open(os.path.join(out_dir, paths["ledger"]), "w") as fh:
            fh.writelines(line + "\n" for line in self.ledger.log_lines())
        with open(os.path.join(out_dir, paths["channel"]), "w") as fh:
            fh.writelines(line + "\n" for line in self.channel_lines())
        report = self.report(finished, paths)
        with open(os.path.join(out_dir, paths["report"]), "w") as fh:
            fh.write(report.to_json())
        return report


def run_scenario(cfg: ScenarioConfig, out_dir=None, *, return_sim: bool = False):
    """Run one scenario; with ``out_dir`` the logs and report are written there."""
    sim = Simulation(cfg)
    started = time.perf_counter()
    finished = sim.run()
    sim.elapsed = time.perf_counter() - started
    report = sim.write(out_dir, finished) if out_dir is not None else sim.report(finished)
    return (report, sim) if return_sim else report
