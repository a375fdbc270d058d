"""Scenario configuration.

One scenario per TOML file. Top-level keys (all optional except ``k``)::

    k = 5                       # group size, >= 2
    n_extra_pool = 0            # extra depositors that wait in the pool
    denomination = 100
    gas_fee = 1
    initial_balance = 1000      # minted to every payer account
    seed = 7
    restart_policy = "StayIfPossible"   # or "FreshEscrow"
    history = "full"            # "none": stage posts are left out of blame replay
    phase_timeout = 10
    blame_window = 3
    fill_timeout = 40
    max_delay = 2
    tick_budget = 10000
    group = "secp256k1"         # or "tiny" (test-only parameters)

    [[adversaries]]
    kind = "modifier"           # silent | dropper | modifier | nonsigner | false_accuser_pair
    position = 3                # chain position in the first round; k+i is the i-th pool member
    index = 0
    substitute = "valid"        # modifier only: valid | garbage
    proof_delay = 0             # false_accuser_pair only; "never" for no proof

    [[withdrawals]]
    position = 2
    phase = "Shuffling"         # withdraw on entering this phase
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import tomli

from .adversary import KINDS, AdversarySpec, InvalidAdversaryParams
from .groupcrypto import SECP256K1, TINY
from .participant import RESTART_POLICIES, ParticipantPhase

SEED_ENV = "TUMBLESIM_SEED"
GROUPS = {"secp256k1": SECP256K1, "tiny": TINY}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Withdrawal:
    position: int
    phase: str


@dataclass(frozen=True)
class ScenarioConfig:
    k: int
    n_extra_pool: int = 0
    denomination: int = 100
    gas_fee: int = 1
    initial_balance: int = 1000
    seed: int = 0
    restart_policy: str = "StayIfPossible"
    history: str = "full"
    phase_timeout: int = 10
    blame_window: int = 3
    fill_timeout: int = 40
    max_delay: int = 2
    tick_budget: int = 10_000
    group: str = "secp256k1"
    adversaries: tuple[AdversarySpec, ...] = ()
    withdrawals: tuple[Withdrawal, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.validate()

    @property
    def participants(self) -> int:
        return self.k + self.n_extra_pool

    def group_obj(self):
        return GROUPS[self.group]

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.n_extra_pool < 0 or self.denomination <= 0 or self.gas_fee < 0:
            raise ConfigError("n_extra_pool, denomination and gas_fee must be non-negative")
        if self.initial_balance < self.denomination + 4 * self.gas_fee:
            raise ConfigError("initial_balance cannot cover a deposit plus gas")
        if self.restart_policy not in RESTART_POLICIES:
            raise ConfigError(f"restart_policy must be one of {RESTART_POLICIES}")
        if self.history not in ("full", "none"):
            raise ConfigError("history must be 'full' or 'none'")
        if min(self.phase_timeout, self.blame_window, self.max_delay, self.tick_budget) < 1:
            raise ConfigError("timeouts, max_delay and tick_budget must be positive")
        if self.group not in GROUPS:
            raise ConfigError(f"group must be one of {sorted(GROUPS)}")
        seen: set[int] = set()
        for adv in self.adversaries:
            if adv.kind == "false_accuser_pair":
                try:
                    adv.validate(self.k)
                except InvalidAdversaryParams as exc:
                    raise ConfigError(str(exc)) from exc
            elif adv.kind not in KINDS:
                raise ConfigError(f"unknown adversary kind {adv.kind!r}")
            for pos in adv.positions():
                if not 1 <= pos <= self.participants:
                    raise ConfigError(f"adversary position {pos} outside 1..{self.participants}")
                if pos in seen:
                    raise ConfigError(f"two adversaries share position {pos}")
                seen.add(pos)
        phases = {p.value for p in ParticipantPhase}
        for w in self.withdrawals:
            if w.phase not in phases:
                raise ConfigError(f"unknown phase {w.phase!r}")
            if not 1 <= w.position <= self.participants:
                raise ConfigError(f"withdrawal position {w.position} out of range")

    def with_seed(self, seed: int) -> ScenarioConfig:
        return replace(self, seed=seed)


def _adversary(raw: dict) -> AdversarySpec:
    raw = dict(raw)
    delay = raw.pop("proof_delay", 0)
    if delay == "never":
        delay = None
    known = {f.name for f in fields(AdversarySpec)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown adversary keys {sorted(unknown)}")
    if "kind" not in raw or "position" not in raw:
        raise ConfigError("adversaries need kind and position")
    return AdversarySpec(proof_delay=delay, **raw)


def config_from_dict(data: dict) -> ScenarioConfig:
    data = dict(data)
    advs = tuple(_adversary(a) for a in data.pop("adversaries", []))
    wds = tuple(Withdrawal(int(w["position"]), str(w["phase"])) for w in data.pop("withdrawals", []))
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "k" not in data:
        raise ConfigError("k is required")
    return ScenarioConfig(adversaries=advs, withdrawals=wds, **data)


def load_config(path, seed: int | None = None, env=None) -> ScenarioConfig:
    """Read a scenario file. The environment seed overrides the file; ``seed`` overrides both."""
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(data)
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg.with_seed(seed) if seed is not None else cfg
