import hashlib
import json
import math
import os

import pytest

from tumblesim import cli
from tumblesim.adversary import AdversarySpec
from tumblesim.anonymity import KTooLargeForExhaustive, analyze_anonymity
from tumblesim.config import SEED_ENV, ConfigError, ScenarioConfig, config_from_dict, load_config
from tumblesim.harness import COMPLETED, derive_seed, run_scenario
from tumblesim.matrix import Case, framed_position, matrix_cases, run_case

HERE = os.path.dirname(__file__)
CONFIGS = os.path.join(HERE, "..", "configs")


def write(tmp_path, text, name="s.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- configuration -------------------------------------------------------------


def test_example_configs_load():
    cfg = load_config(os.path.join(CONFIGS, "honest5.toml"), env={})
    assert (cfg.k, cfg.seed) == (5, 7)
    mod = load_config(os.path.join(CONFIGS, "modifier3.toml"), env={})
    assert mod.adversaries == (AdversarySpec("modifier", 3),)


def test_seed_precedence(tmp_path):
    path = write(tmp_path, "k = 3\nseed = 1\n")
    assert load_config(path, env={}).seed == 1
    assert load_config(path, env={SEED_ENV: "9"}).seed == 9
    assert load_config(path, seed=4, env={SEED_ENV: "9"}).seed == 4
    with pytest.raises(ConfigError):
        load_config(path, env={SEED_ENV: "nine"})


def test_proof_delay_never(tmp_path):
    path = write(tmp_path, """k = 4
[[adversaries]]
kind = "false_accuser_pair"
position = 2
proof_delay = "never"
""")
    assert load_config(path, env={}).adversaries[0].proof_delay is None


@pytest.mark.parametrize("data", [
    {"k": 1},
    {"n_extra_pool": 0},
    {"k": 3, "colour": "blue"},
    {"k": 3, "restart_policy": "Maybe"},
    {"k": 3, "history": "partial"},
    {"k": 3, "group": "p256"},
    {"k": 3, "initial_balance": 50},
    {"k": 3, "phase_timeout": 0},
    {"k": 3, "adversaries": [{"kind": "silent", "position": 4}]},
    {"k": 3, "adversaries": [{"kind": "silent", "position": 1}, {"kind": "dropper", "position": 1}]},
    {"k": 3, "adversaries": [{"kind": "false_accuser_pair", "position": 1}]},
    {"k": 3, "adversaries": [{"kind": "ghost", "position": 1}]},
    {"k": 3, "adversaries": [{"kind": "silent"}]},
    {"k": 3, "withdrawals": [{"position": 1, "phase": "Dancing"}]},
    {"k": 3, "withdrawals": [{"position": 5, "phase": "Shuffling"}]},
])
def test_config_validation(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_malformed_toml_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "k = = 3"), env={})


def test_derive_seed_is_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") == int.from_bytes(hashlib.sha256(b"1/a").digest()[:8], "big")


# -- runs ----------------------------------------------------------------------


def test_run_writes_logs_and_report(tmp_path):
    report = run_scenario(ScenarioConfig(k=3, seed=2), str(tmp_path))
    assert report.transcript_paths == {"ledger": "ledger.jsonl", "channel": "channel.jsonl",
                                       "report": "report.json"}
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["outcome"] == COMPLETED
    assert on_disk["anonymity"]["consistent_assignments"] == 6
    assert all(json.loads(line) for line in (tmp_path / "ledger.jsonl").read_text().splitlines())


def test_same_seed_gives_identical_files(tmp_path):
    cfg = ScenarioConfig(k=4, seed=21, adversaries=(AdversarySpec("dropper", 3),))
    run_scenario(cfg, str(tmp_path / "a"))
    run_scenario(cfg, str(tmp_path / "b"))
    for name in ("ledger.jsonl", "channel.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run_scenario(cfg.with_seed(22), str(tmp_path / "c"))
    assert (tmp_path / "a" / "channel.jsonl").read_bytes() != (tmp_path / "c" / "channel.jsonl").read_bytes()


def test_tick_budget_exhaustion_is_reported():
    report = run_scenario(ScenarioConfig(k=3, seed=1, tick_budget=3))
    assert report.budget_exceeded


def test_tiny_group_runs():
    report = run_scenario(ScenarioConfig(k=4, seed=1, group="tiny"))
    assert report.outcome == COMPLETED and report.conserved()


# -- anonymity -----------------------------------------------------------------


def _synthetic(m, dests=None):
    """A ledger log where m payers were paid out to m destinations, no channel traffic."""
    payers = [f"{i:040x}" for i in range(m)]
    dests = dests or [f"{0xd0 + i:040x}" for i in range(m)]
    recs = [{"kind": "Create", "escrow": "e", "channel_id": "c", "k": m}]
    recs += [{"kind": "Payout", "to": d, "escrow": "e", "epoch": 5} for d in dests]
    recs.append({"kind": "Flush", "escrow": "e", "consumed": payers, "paid_epoch": 5})
    return recs


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6, 7])
def test_unlinked_payout_admits_every_assignment(m):
    res = analyze_anonymity(_synthetic(m), [])
    assert res.consistent_assignments == math.factorial(m)
    assert not res.reduced


def test_duplicate_destinations_still_count_every_assignment():
    dests = ["aa" * 20, "aa" * 20, "bb" * 20]
    assert analyze_anonymity(_synthetic(3, dests), []).consistent_assignments == 6


def test_too_large_for_exhaustive_count():
    with pytest.raises(KTooLargeForExhaustive):
        analyze_anonymity(_synthetic(8), [])


def test_smaller_payout_than_group_is_reduced():
    recs = _synthetic(3)
    recs[0]["k"] = 4
    assert analyze_anonymity(recs, []).reduced


def test_no_payout_is_an_error():
    with pytest.raises(ValueError):
        analyze_anonymity([{"kind": "Mint", "to": "x", "amount": 1}], [])


def test_revealed_keys_reduce_the_anonymity_set():
    report = run_scenario(ScenarioConfig(k=3, seed=11, restart_policy="FreshEscrow",
                                         adversaries=(AdversarySpec("modifier", 2),)))
    assert report.anonymity["reduced"]
    assert report.anonymity["consistent_assignments"] < math.factorial(report.anonymity["set_size"])


# -- matrix --------------------------------------------------------------------


def test_matrix_covers_every_kind_and_position():
    cases = matrix_cases()
    names = {c.name for c in cases}
    assert "k=5 modifier/garbage@5" in names and "k=3 false_accuser_pair/no-proof@2" in names
    assert len(cases) == sum(5 * k + 2 * (k - 2) for k in (3, 4, 5))


def test_framed_position_clamps():
    assert [framed_position(p, 5) for p in range(0, 7)] == [2, 2, 2, 3, 4, 4, 4]


@pytest.mark.parametrize("case", [
    Case(4, AdversarySpec("dropper", 1)),
    Case(5, AdversarySpec("false_accuser_pair", 3, proof_delay=1), "none"),
    Case(5, AdversarySpec("false_accuser_pair", 3, proof_delay=None), "none"),
], ids=lambda c: c.name)
def test_matrix_case_passes(case):
    result = run_case(case)
    assert result.passed, result.detail


# -- command line ----------------------------------------------------------------


def test_cli_run_and_report(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["run", "--config", os.path.join(CONFIGS, "honest5.toml"), "--out", out]) == 0
    assert "outcome=Completed" in capsys.readouterr().out
    assert cli.main(["report", "--in", out]) == 0
    assert "conservation: ok" in capsys.readouterr().out


@pytest.mark.parametrize("field_name", ["Mint", "Payout"])
def test_cli_report_catches_tampered_logs(tmp_path, capsys, field_name):
    out = tmp_path / "run"
    run_scenario(ScenarioConfig(k=3, seed=4), str(out))
    lines = (out / "ledger.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    target = next(r for r in recs if r["kind"] == field_name)
    target["amount"] += 1
    (out / "ledger.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert cli.main(["report", "--in", str(out)]) == 1
    assert "conservation violation" in capsys.readouterr().err


def test_cli_report_missing_dir(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path / "nope")]) == 1


def test_cli_blame_demo(capsys):
    assert cli.main(["blame-demo", "--adversary", "modifier", "--position", "2", "--k", "4"]) == 0
    assert "ejections={2}" in capsys.readouterr().out
    assert cli.main(["blame-demo", "--adversary", "FalseAccuserPair", "--position", "1", "--k", "4"]) == 0


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["blame-demo", "--adversary", "dropper", "--position", "9", "--k", "3"]) == 2
    assert cli.main(["run", "--config", write(tmp_path, "k = 1\n")]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["blame-demo", "--adversary", "ghost", "--position", "1", "--k", "3"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        cli.main([])


# -- frozen whole-run outcomes ------------------------------------------------


def test_honest_five_uses_one_round():
    report = run_scenario(load_config(os.path.join(CONFIGS, "honest5.toml"), env={}))
    assert (report.outcome, report.rounds_used, report.ejected_positions) == (COMPLETED, 1, [])


def test_modifier_at_three_of_five():
    report, sim = run_scenario(load_config(os.path.join(CONFIGS, "modifier3.toml"), env={}),
                               return_sim=True)
    assert report.outcome == "CompletedAfterBlame"
    assert report.ejected_positions == [3]
    for p in sim.honest():
        assert report.participant_deltas[p.cfg.label] >= -2 * sim.cfg.gas_fee


def test_silent_second_of_two_everyone_withdraws():
    report, sim = run_scenario(ScenarioConfig(k=2, seed=8, adversaries=(AdversarySpec("silent", 2),)),
                               return_sim=True)
    assert report.outcome == "AllWithdrawn"
    (honest,) = sim.honest()
    assert report.participant_deltas[honest.cfg.label] == -2 * sim.cfg.gas_fee


def test_silent_member_leads_to_fresh_escrow():
    report, sim = run_scenario(ScenarioConfig(k=3, seed=8, adversaries=(AdversarySpec("silent", 1),)),
                               return_sim=True)
    assert len(sim.ledger.escrows) == 2
    assert report.outcome == "CompletedAfterBlame"
    assert all(sim.ledger.balance(p.dest) == 100 for p in sim.honest())


def test_honest_loss_is_bounded_by_own_gas():
    for spec in (AdversarySpec("modifier", 1), AdversarySpec("nonsigner", 2), AdversarySpec("silent", 3)):
        report, sim = run_scenario(ScenarioConfig(k=3, seed=5, adversaries=(spec,)), return_sim=True)
        for p in sim.honest():
            own_txs = sum(1 for ev in sim.ledger.events
                          if ev.payload.get("from") == p.payer.hex() and ev.payload.get("gas"))
            assert report.participant_deltas[p.cfg.label] >= -sim.cfg.gas_fee * own_txs
