"""Escrowed coin mixing with layered-encryption shuffling and reveal-and-replay blame."""

from .adversary import AdversarySpec, InvalidAdversaryParams, make_adversary
from .blame import BlameEvidence, BlameVerdict, Reason, blame_replay, blame_resolve_window
from .channel import Channel, Kind, SignedMessage
from .config import ScenarioConfig, load_config
from .harness import Report, run_scenario
from .ledger import Ledger, PayoutMessage, payout_bytes
from .participant import Participant, ParticipantConfig, ParticipantPhase, TimerTick

__all__ = [
    "AdversarySpec",
    "BlameEvidence",
    "BlameVerdict",
    "Channel",
    "InvalidAdversaryParams",
    "Kind",
    "Ledger",
    "Participant",
    "ParticipantConfig",
    "ParticipantPhase",
    "PayoutMessage",
    "Reason",
    "Report",
    "ScenarioConfig",
    "SignedMessage",
    "TimerTick",
    "blame_replay",
    "blame_resolve_window",
    "load_config",
    "make_adversary",
    "payout_bytes",
    "run_scenario",
]
