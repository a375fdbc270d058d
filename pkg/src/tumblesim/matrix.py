"""The adversary matrix: every deviation at every position for small groups."""

from __future__ import annotations

from dataclasses import dataclass

from .adversary import AdversarySpec
from .config import ScenarioConfig
from .harness import run_scenario

MATRIX_KS = (3, 4, 5)
SINGLE_KINDS = ("silent", "dropper", "modifier", "nonsigner")


@dataclass(frozen=True)
class Case:
    k: int
    spec: AdversarySpec
    history: str = "full"

    @property
    def name(self) -> str:
        s = self.spec
        extra = ""
        if s.kind == "modifier":
            extra = f"/{s.substitute}"
        if s.kind == "false_accuser_pair":
            extra = "/proof" if s.proof_delay is not None else "/no-proof"
        return f"k={self.k} {s.kind}{extra}@{s.position}"

    def expected_ejected(self) -> set[int]:
        s = self.spec
        if s.kind == "false_accuser_pair":
            accusers = set(s.positions())
            return accusers if s.proof_delay is not None else accusers | {s.position}
        return {s.position}


def framed_position(position: int, k: int) -> int:
    """Clamp a requested position to one that has neighbours on both sides."""
    return min(max(position, 2), k - 1)


def matrix_cases(ks=MATRIX_KS, blame_window: int = 3) -> list[Case]:
    cases = []
    for k in ks:
        for pos in range(1, k + 1):
            for kind in SINGLE_KINDS:
                subs = ("valid", "garbage") if kind == "modifier" else ("valid",)
                for sub in subs:
                    cases.append(Case(k, AdversarySpec(kind, pos, substitute=sub)))
        for target in range(2, k):
            # signed stage posts withheld from replay so the dispute window decides
            cases.append(Case(k, AdversarySpec("false_accuser_pair", target, proof_delay=1), "none"))
            cases.append(Case(k, AdversarySpec("false_accuser_pair", target, proof_delay=None), "none"))
    return cases


@dataclass
class CaseResult:
    case: Case
    passed: bool
    detail: str


def run_case(case: Case, seed: int = 11) -> CaseResult:
    cfg = ScenarioConfig(k=case.k, seed=seed, history=case.history, adversaries=(case.spec,))
    report, sim = run_scenario(cfg, return_sim=True)
    problems = []
    if not report.conserved():
        problems.append("conservation")
    for p in sim.honest():
        if report.principal_delta(p.cfg.label) < 0:
            problems.append(f"{p.cfg.label} lost principal")
    if set(report.ejected_positions) != case.expected_ejected():
        problems.append(f"ejected {report.ejected_positions}")
    if case.spec.kind in ("dropper", "modifier"):
        first = report.ejections[0]["reasons"] if report.ejections else {}
        if first.get(str(case.spec.position)) != "BadPeel":
            problems.append(f"reasons {first}")
    if report.budget_exceeded:
        problems.append("tick budget exceeded")
    detail = "; ".join(problems) or f"{report.outcome} ejected={report.ejected_positions}"
    return CaseResult(case, not problems, detail)
