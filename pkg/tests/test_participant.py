import pytest

from tumblesim.adversary import (
    AdversarySpec,
    Dropper,
    FalseAccuser,
    InvalidAdversaryParams,
    Modifier,
    NonSigner,
    Silent,
    make_adversary,
)
from tumblesim.config import ScenarioConfig, Withdrawal
from tumblesim.groupcrypto import TINY, derive_sig_pk
from tumblesim.harness import ALL_WITHDRAWN, COMPLETED, COMPLETED_AFTER_BLAME, run_scenario
from tumblesim.ledger import DepositTx, Ledger, WithdrawTx
from tumblesim.onion import Destination
from tumblesim.participant import Participant, ParticipantConfig, ParticipantPhase, TimerTick


def base(label="p0", **kw):
    return ParticipantConfig(label=label, payer=b"\x01" * 20, dest=Destination(b"\x02" * 20),
                             seed=5, escrow_id=b"\x03" * 20, channel_id=b"\x04" * 32, group=TINY, **kw)


def test_first_tick_deposits_the_encryption_key():
    p = Participant(base())
    out = p.step(TimerTick(1))
    assert out.txs == [DepositTx(b"\x03" * 20, b"\x01" * 20, p.enc_keys.pk)]
    assert out.messages == []
    assert p.phase is ParticipantPhase.DEPOSITED


def test_signing_key_is_derived_from_the_deposit_key():
    p = Participant(base())
    assert p.sig_keys.pk == derive_sig_pk(b"\x04" * 32, p.enc_keys.pk)


def test_scripted_withdrawal_at_deposit():
    p = Participant(base(withdraw_at="Deposited"))
    out = p.step(TimerTick(1))
    assert isinstance(out.txs[-1], WithdrawTx)
    assert p.phase is ParticipantPhase.ABORTED
    assert p.step(TimerTick(2)).txs == []


def test_fill_timeout_withdraws():
    p = Participant(base(fill_timeout=5))
    p.step(TimerTick(1))
    txs = []
    for t in range(2, 10):
        txs += p.step(TimerTick(t)).txs
    assert txs == [WithdrawTx(b"\x03" * 20, b"\x01" * 20)]
    assert p.phase is ParticipantPhase.ABORTED


def test_unknown_events_and_policies():
    with pytest.raises(TypeError):
        Participant(base()).step("hello")
    with pytest.raises(ValueError):
        Participant(base(restart_policy="Sometimes"))


def test_silent_goes_quiet_after_depositing():
    s = Silent(base())
    assert s.step(TimerTick(1)).txs
    assert all(s.step(TimerTick(t)).txs == [] for t in range(2, 100))


@pytest.mark.parametrize("kind,cls", [("silent", Silent), ("nonsigner", NonSigner),
                                      ("dropper", Dropper), ("modifier", Modifier)])
def test_make_adversary_kinds(kind, cls):
    adv = make_adversary(AdversarySpec(kind, 2), base(), 2, k=3)
    assert isinstance(adv, cls) and adv.adversarial


def test_false_accuser_roles():
    spec = AdversarySpec("false_accuser_pair", 3)
    assert spec.positions() == (2, 4)
    assert make_adversary(spec, base(), 2, k=5).role == "before"
    assert make_adversary(spec, base(), 4, k=5).role == "after"
    assert isinstance(make_adversary(spec, base(), 4, k=5), FalseAccuser)


@pytest.mark.parametrize("spec,k", [
    (AdversarySpec("teleporter", 1), 3),
    (AdversarySpec("dropper", 4), 3),
    (AdversarySpec("dropper", 0), 3),
    (AdversarySpec("false_accuser_pair", 1), 3),
    (AdversarySpec("false_accuser_pair", 3), 3),
    (AdversarySpec("modifier", 1, substitute="poison"), 3),
    (AdversarySpec("dropper", 1, index=-1), 3),
    (AdversarySpec("false_accuser_pair", 2, proof_delay=-1), 3),
])
def test_invalid_adversary_params(spec, k):
    with pytest.raises(InvalidAdversaryParams):
        make_adversary(spec, base(), spec.position, k=k)


def test_adversary_must_act_at_its_position():
    with pytest.raises(InvalidAdversaryParams):
        make_adversary(AdversarySpec("dropper", 2), base(), 3, k=3)


# -- behaviours observed through whole runs ------------------------------------


def run(k, *advs, **kw):
    return run_scenario(ScenarioConfig(k=k, seed=kw.pop("seed", 3), adversaries=tuple(advs), **kw),
                        return_sim=True)


def test_honest_round_completes_with_one_payout_each():
    report, sim = run(3)
    assert report.outcome == COMPLETED
    assert all(p.phase is ParticipantPhase.DONE for p in sim.participants)
    assert all(sim.ledger.balance(d) == 100 for d in sim.dests)


def test_silent_partner_in_pair_means_everyone_withdraws():
    report, sim = run(2, AdversarySpec("silent", 1))
    assert report.outcome == ALL_WITHDRAWN
    honest = sim.honest()[0]
    assert report.participant_deltas[honest.cfg.label] == -2
    assert report.principal_delta(honest.cfg.label) == 0


@pytest.mark.parametrize("kind", ["dropper", "modifier"])
def test_tamperer_is_ejected_and_the_rest_complete(kind):
    report, sim = run(4, AdversarySpec(kind, 2))
    assert report.outcome == COMPLETED_AFTER_BLAME
    assert report.ejected_positions == [2]
    assert report.ejections[0]["reasons"] == {"2": "BadPeel"}
    for p in sim.honest():
        assert report.principal_delta(p.cfg.label) == 0
        assert sim.ledger.balance(p.dest) == 100


def test_nonsigner_is_ejected_as_silent():
    report, sim = run(3, AdversarySpec("nonsigner", 3))
    assert report.ejected_positions == [3]
    assert set(report.ejections[0]["reasons"].values()) == {"Silent"}
    assert report.conserved()


def test_stay_policy_keeps_escrow_and_fresh_policy_moves():
    stay, _ = run(4, AdversarySpec("modifier", 3))
    fresh, sim = run(4, AdversarySpec("modifier", 3), restart_policy="FreshEscrow")
    assert sum(k.startswith("escrow:") for k in stay.balance_deltas) == 1
    assert sum(k.startswith("escrow:") for k in fresh.balance_deltas) == 2
    assert fresh.outcome == COMPLETED_AFTER_BLAME
    assert all(fresh.principal_delta(p.cfg.label) == 0 for p in sim.honest())


def test_pool_members_fill_the_next_round():
    report, sim = run(3, n_extra_pool=3)
    assert report.outcome == COMPLETED
    assert all(sim.ledger.balance(d) == 100 for d in sim.dests)
    assert report.conserved()


def test_unfilled_pool_is_refunded():
    report, sim = run(3, n_extra_pool=2, fill_timeout=15)
    assert [sim.ledger.balance(d) for d in sim.dests] == [100, 100, 100, 0, 0]
    assert all(report.principal_delta(p.cfg.label) == 0 for p in sim.participants)
    assert report.conserved()


@pytest.mark.parametrize("phase", ["Deposited", "Announced", "Ordered", "Shuffling", "Checking", "Signing"])
def test_scripted_withdrawal_refunds_in_every_phase(phase):
    report, sim = run(3, withdrawals=(Withdrawal(2, phase),))
    leaver = next(p for p in sim.participants if p.withdrew_by_script)
    assert report.principal_delta(leaver.cfg.label) == 0
    assert report.conserved()
    assert not report.budget_exceeded
