"""Command line entry point: ``tumblesim run|blame-demo|report|matrix``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adversary import KINDS, AdversarySpec, InvalidAdversaryParams
from .config import ConfigError, ScenarioConfig, load_config
from .harness import run_scenario
from .matrix import framed_position, matrix_cases, run_case

ALIASES = {"falseaccuserpair": "false_accuser_pair", "false-accuser-pair": "false_accuser_pair"}


def _summary(report) -> str:
    anon = report.anonymity or {}
    return (
        f"outcome={report.outcome} rounds={report.rounds_used} "
        f"ejections={{{', '.join(map(str, report.ejected_positions))}}} "
        f"gas={report.gas} ticks={report.ticks} "
        f"anonymity={anon.get('consistent_assignments')}/{anon.get('set_size')}"
    )


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    report = run_scenario(cfg, args.out)
    print(_summary(report))
    print(f"wrote {os.path.join(args.out, 'report.json')}")
    return 0 if report.conserved() and not report.budget_exceeded else 1


def cmd_blame_demo(args) -> int:
    kind = ALIASES.get(args.adversary.lower(), args.adversary.lower())
    position = args.position
    if kind == "false_accuser_pair":
        position = framed_position(position, args.k)
    spec = AdversarySpec(kind, position, substitute=args.substitute)
    spec.validate(args.k)
    cfg = ScenarioConfig(k=args.k, seed=args.seed, adversaries=(spec,))
    report = run_scenario(cfg, args.out)
    print(_summary(report))
    for ej in report.ejections:
        print(f"  round {ej['round']}: {ej['reasons']}")
    expected = set(spec.positions()) if kind == "false_accuser_pair" else {position}
    return 0 if set(report.ejected_positions) == expected and report.conserved() else 1


def _replay_balances(records):
    balances, escrows, minted, gas, views = {}, {}, {}, 0, {}

    def add(acct, amount):
        balances[acct] = balances.get(acct, 0) + amount

    for rec in records:
        kind, src, amount = rec["kind"], rec.get("from"), rec.get("amount") or 0
        fee = rec.get("gas") or 0
        if kind == "Mint":
            add(rec["to"], amount)
            minted[rec["to"]] = minted.get(rec["to"], 0) + amount
        elif kind == "Create":
            escrows.setdefault(rec["escrow"], 0)
            if src:
                add(src, -fee)
                gas += fee
        elif kind == "Deposit":
            add(src, -amount - fee)
            escrows[rec["escrow"]] = escrows.get(rec["escrow"], 0) + amount
            gas += fee
        elif kind == "Withdraw":
            add(src, amount - fee)
            escrows[rec["escrow"]] = escrows.get(rec["escrow"], 0) - amount
            gas += fee
        elif kind == "Payout":
            add(rec["to"], amount)
            escrows[rec["escrow"]] = escrows.get(rec["escrow"], 0) - amount
        elif kind == "Flush":
            if src:
                add(src, -fee)
                gas += fee
        if "buffer" in rec and "escrow" in rec:
            views[rec["escrow"]] = len(rec["buffer"]) + len(rec.get("pool", []))
    return balances, escrows, minted, gas, views


def cmd_report(args) -> int:
    try:
        with open(os.path.join(args.dir, "report.json")) as fh:
            report = json.load(fh)
        with open(os.path.join(args.dir, "ledger.jsonl")) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except (OSError, ValueError) as exc:
        print(f"cannot read run directory: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2, sort_keys=True))
    balances, escrows, minted, gas, views = _replay_balances(records)
    denominations = {r["escrow"]: r["denomination"] for r in records if r["kind"] == "Create"}
    problems = []
    deltas = {a: b - minted.get(a, 0) for a, b in balances.items()}
    deltas.update({f"escrow:{e}": v for e, v in escrows.items()})
    if sum(deltas.values()) + gas != 0:
        problems.append("ledger log does not balance")
    if sum(minted.values()) != report.get("minted"):
        problems.append(f"log mints {sum(minted.values())}, report says {report.get('minted')}")
    if gas != report.get("gas"):
        problems.append(f"gas {gas} != reported {report.get('gas')}")
    for acct, value in sorted(deltas.items()):
        if report.get("balance_deltas", {}).get(acct) != value:
            problems.append(f"{acct}: log gives {value}, report says {report.get('balance_deltas', {}).get(acct)}")
    reported = report.get("balance_deltas", {})
    if sum(reported.values()) + (report.get("gas") or 0) != 0:
        problems.append("reported deltas and gas do not sum to zero")
    for e, bal in escrows.items():
        if bal != denominations.get(e, 0) * views.get(e, 0):
            problems.append(f"escrow {e} holds {bal} for {views.get(e, 0)} depositors")
    if any(b < 0 for b in balances.values()):
        problems.append("negative account balance")
    if problems:
        print("conservation violation: " + "; ".join(problems), file=sys.stderr)
        return 1
    print("conservation: ok")
    return 0


def cmd_matrix(args) -> int:
    failures = 0
    for case in matrix_cases():
        result = run_case(case, seed=args.seed)
        failures += not result.passed
        print(f"{'PASS' if result.passed else 'FAIL'} {case.name}: {result.detail}")
    print(f"{failures} failure(s)")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumblesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("blame-demo", help="run one adversary and show the verdict")
    p.add_argument("--adversary", required=True)
    p.add_argument("--position", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--substitute", default="valid", choices=("valid", "garbage"))
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_blame_demo)

    p = sub.add_parser("report", help="print a run report and re-check conservation")
    p.add_argument("--in", dest="dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("matrix", help="run the full adversary matrix")
    p.add_argument("--seed", type=int, default=11)
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "blame-demo":
        kind = ALIASES.get(args.adversary.lower(), args.adversary.lower())
        if kind not in KINDS:
            parser.error(f"unknown adversary {args.adversary!r}; choose from {', '.join(KINDS)}")
    try:
        return args.func(args)
    except (ConfigError, InvalidAdversaryParams, FileNotFoundError) as exc:
        print(f"tumblesim: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
