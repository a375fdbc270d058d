"""Deviating participants.

Each adversary behaves honestly except for one named deviation. Positions
refer to chain positions in the first mixing round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .blame import BlameEvidence
from .onion import ChainOrder, Destination, Onion, StagePost, build_onion_layers
from .participant import Participant, ParticipantConfig, ParticipantPhase, StepOutput

KINDS = ("silent", "dropper", "modifier", "nonsigner", "false_accuser_pair")
SUBSTITUTES = ("valid", "garbage")


class InvalidAdversaryParams(ValueError):
    pass


@dataclass(frozen=True)
class AdversarySpec:
    """One deviation.

    For ``false_accuser_pair`` the ``position`` is the framed participant; the
    accusers sit directly before and after it. ``proof_delay`` is when the
    framed participant sends its proof (None: it never does).
    """

    kind: str
    position: int
    index: int = 0
    substitute: str = "valid"
    proof_delay: int | None = 0

    def positions(self) -> tuple[int, ...]:
        if self.kind == "false_accuser_pair":
            return (self.position - 1, self.position + 1)
        return (self.position,)

    def validate(self, k: int) -> None:
        if self.kind not in KINDS:
            raise InvalidAdversaryParams(f"unknown adversary kind {self.kind!r}")
        if self.kind == "false_accuser_pair":
            if not 2 <= self.position <= k - 1:
                raise InvalidAdversaryParams(f"framed position must lie in 2..{k - 1}")
        elif not 1 <= self.position <= k:
            raise InvalidAdversaryParams(f"position {self.position} outside 1..{k}")
        if self.index < 0:
            raise InvalidAdversaryParams("index must be non-negative")
        if self.kind == "modifier" and self.substitute not in SUBSTITUTES:
            raise InvalidAdversaryParams(f"substitute must be one of {SUBSTITUTES}")
        if self.proof_delay is not None and self.proof_delay < 0:
            raise InvalidAdversaryParams("proof_delay must be non-negative")


class Silent(Participant):
    """Deposits, then never sends anything again (not even a withdrawal)."""

    adversarial = True

    def step(self, event):
        if self.phase is ParticipantPhase.IDLE:
            return super().step(event)
        return StepOutput()


class NonSigner(Participant):
    """Shuffles honestly but never posts a tag, and never withdraws."""

    adversarial = True

    def __init__(self, cfg):
        super().__init__(cfg)
        self.dark = False

    def step(self, event):
        if self.dark:
            self._out = StepOutput()
            return self._out
        return super().step(event)

    def _post_tag(self):
        self.dark = True


class _Tamperer(Participant):
    adversarial = True

    def __init__(self, cfg, index: int = 0):
        super().__init__(cfg)
        self.index = index
        self.tampered = False

    def _victim(self, post: StagePost) -> int:
        r = self.round
        depth = r.n - r.my_position
        own = r.own_blobs[depth] if r.own_blobs else None
        candidates = [i for i, b in enumerate(post.blobs()) if b != own]
        return candidates[self.index % len(candidates)]


class Dropper(_Tamperer):
    """Omits one onion that is not its own from its stage post."""

    def _tamper(self, post):
        items = list(post.items)
        del items[self._victim(post)]
        self.tampered = True
        return StagePost(post.position, tuple(items))


class Modifier(_Tamperer):
    """Replaces one onion that is not its own.

    A ``valid`` substitute is a well-formed onion over the remaining chain that
    pays the attacker; ``garbage`` is random bytes of the right length.
    """

    def __init__(self, cfg, index: int = 0, substitute: str = "valid"):
        super().__init__(cfg, index)
        self.substitute = substitute
        self.attacker_dest = Destination(self.rng.randbytes(20))

    def _tamper(self, post):
        r = self.round
        items = list(post.items)
        victim = self._victim(post)
        depth = r.n - r.my_position
        if self.substitute == "garbage":
            raw = self.rng.randbytes(len(post.blobs()[victim]))
            items[victim] = Destination(raw) if depth == 0 else Onion(depth, raw)
        elif depth == 0:
            items[victim] = self.attacker_dest
        else:
            rest = ChainOrder(tuple(
                replace(e, position=e.position - r.my_position)
                for e in r.order if e.position > r.my_position
            ))
            items[victim] = Onion(depth, build_onion_layers(self.attacker_dest, rest, self.rng)[-1])
        self.tampered = True
        return StagePost(post.position, tuple(items))


class FalseAccuser(Participant):
    """One half of a colluding pair framing the participant between them.

    The first accuser opens blame after a clean shuffle and misstates its own
    output; the second misstates its input. Neither ever sends proofs.
    """

    adversarial = True

    def __init__(self, cfg, role: str):
        super().__init__(cfg)
        if role not in ("before", "after"):
            raise InvalidAdversaryParams(f"unknown accuser role {role!r}")
        self.role = role

    def _check_final(self):
        if self.role == "before":
            r = self.round
            r.final = tuple(r.parsed[r.n].items)
            self._open_blame(b"destination check failed")
            return
        super()._check_final()

    def _garble(self, data: bytes | None) -> bytes | None:
        if data is None or len(data) <= 4:
            return data
        i = 4 + self.rng.randrange(len(data) - 4)
        return data[:i] + bytes([data[i] ^ 0xFF]) + data[i + 1 :]

    def _make_evidence(self):
        ev = super()._make_evidence()
        if self.role == "before":
            return BlameEvidence(ev.position, ev.revealed_sk, ev.claimed_in, self._garble(ev.claimed_out))
        return BlameEvidence(ev.position, ev.revealed_sk, self._garble(ev.claimed_in), ev.claimed_out)

    def _send_proof(self, verdict):
        return None


def make_adversary(spec: AdversarySpec, base_config: ParticipantConfig, chain_position: int,
                   k: int | None = None) -> Participant:
    """Build the behaviour for the participant at ``chain_position``."""
    if k is not None:
        spec.validate(k)
    if chain_position not in spec.positions():
        raise InvalidAdversaryParams(f"{spec.kind} does not act at position {chain_position}")
    if spec.kind == "silent":
        return Silent(base_config)
    if spec.kind == "nonsigner":
        return NonSigner(base_config)
    if spec.kind == "dropper":
        return Dropper(base_config, spec.index)
    if spec.kind == "modifier":
        if spec.substitute not in SUBSTITUTES:
            raise InvalidAdversaryParams(f"substitute must be one of {SUBSTITUTES}")
        return Modifier(base_config, spec.index, spec.substitute)
    if spec.kind == "false_accuser_pair":
        role = "before" if chain_position == spec.position - 1 else "after"
        return FalseAccuser(base_config, role)
    raise InvalidAdversaryParams(f"unknown adversary kind {spec.kind!r}")


__all__ = [
    "AdversarySpec",
    "Dropper",
    "FalseAccuser",
    "InvalidAdversaryParams",
    "KINDS",
    "Modifier",
    "NonSigner",
    "Silent",
    "make_adversary",
]
