"""Intersection arbitration: first-come-first-serve crossing order.

Vehicles announce their arrival time, everyone sorts the announcements,
the fastest calculator proposes the order, and the proposal stands only
if every other participant independently recomputes the same order and
signs off. A committed session pays the proposer a fixed fee of 0.5
trust points (500 milli-trust) from the first vehicle in the order.

This module is the pure state machine; the vehicle agent drives it from
network events and timers.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import identity
from .identity import IvTpId, KeyPair
from .ledger import (
    ArbitrationTx,
    RewardTx,
    TimeFlag,
    agree_message,
    tx_signing_bytes,
)

REWARD_MILLI_TRUST = 500

# Who pays whom for a committed schedule. The default follows the
# reward table (first arrival pays the proposer); the alternative reads
# the fee as a bounty the proposer owes the right-of-way holder.
REWARD_FIRST_TO_PROPOSER = "first_to_proposer"
REWARD_PROPOSER_TO_FIRST = "proposer_to_first"


class EmptyIntentsError(ValueError):
    """Ordering requested with no arrival announcements at all."""


class NotUnanimousError(ValueError):
    """Commit attempted without agreement from every other participant."""


class SessionStateError(RuntimeError):
    """Operation invoked in a phase that does not allow it."""


class Phase(enum.Enum):
    COLLECTING = "collecting"
    PROPOSING = "proposing"
    AGREEING = "agreeing"
    COMMITTED = "committed"
    ABORTED = "aborted"


def compute_order(intents: Mapping[IvTpId, TimeFlag]) -> list[IvTpId]:
    """First come first serve: arrival time ascending, id ascending on
    ties, so every participant derives the identical order."""
    if not intents:
        raise EmptyIntentsError("no intents to order")
    return sorted(intents, key=lambda veh: (intents[veh], veh))


def elect_scheduler(
    participants: Iterable[IvTpId],
    compute_delays: Mapping[IvTpId, int],
    intent_completion_time: TimeFlag,
) -> tuple[IvTpId, TimeFlag]:
    """The vehicle that finishes computing the order first proposes it.

    Finish time = completion of intent collection + that vehicle's own
    compute delay; ties go to the lower id. Returns the scheduler and
    the time its proposal goes out.
    """
    pool = sorted(participants)
    if not pool:
        raise EmptyIntentsError("no participants")
    scheduler = min(pool, key=lambda veh: (intent_completion_time + compute_delays[veh], veh))
    return scheduler, intent_completion_time + compute_delays[scheduler]


@dataclass(frozen=True)
class Schedule:
    """A proposed crossing order together with the arrival times it was
    derived from, so receivers can recheck the sort."""

    ordering: tuple[IvTpId, ...]
    proposer: IvTpId
    basis: tuple[tuple[IvTpId, TimeFlag], ...]

    def consistent(self) -> bool:
        basis = dict(self.basis)
        if len(basis) != len(self.basis) or not basis:
            return False
        return list(self.ordering) == compute_order(basis)


@dataclass
class IntersectionSession:
    """One vehicle's view of one intersection negotiation."""

    intersection_id: str
    participants: frozenset[IvTpId]
    compute_delays: dict[IvTpId, int]
    collection_deadline: TimeFlag
    intents: dict[IvTpId, TimeFlag] = field(default_factory=dict)
    phase: Phase = Phase.COLLECTING
    round: int = 0
    proposer: IvTpId | None = None
    schedule: Schedule | None = None
    agreements: dict[IvTpId, bytes] = field(default_factory=dict)
    completion_tf: TimeFlag | None = None

    def add_intent(self, vehicle: IvTpId, tf: TimeFlag) -> bool:
        """Record an arrival announcement; re-broadcasts never overwrite
        the first recorded time. Returns True once all intents are in."""
        if vehicle not in self.participants:
            return False
        self.intents.setdefault(vehicle, tf)
        return self.is_complete()

    def is_complete(self) -> bool:
        return set(self.intents) == set(self.participants)

    def elect(self, now: TimeFlag) -> tuple[IvTpId, TimeFlag]:
        """Round 0 elects by compute speed; recovery rounds fall back to
        the lowest id so a retry cannot stall on the same failure."""
        if self.round == 0:
            return elect_scheduler(self.participants, self.compute_delays, now)
        scheduler = min(self.participants)
        return scheduler, now + self.compute_delays[scheduler]

    def make_schedule(self, proposer: IvTpId) -> Schedule:
        ordering = tuple(compute_order(self.intents))
        basis = tuple(sorted(self.intents.items()))
        return Schedule(ordering=ordering, proposer=proposer, basis=basis)

    def matches(self, schedule: Schedule) -> bool:
        """True when this vehicle's own intent set reproduces the
        proposed ordering exactly."""
        if not self.is_complete() or not schedule.consistent():
            return False
        return list(schedule.ordering) == compute_order(self.intents)

    def record_agreement(self, vehicle: IvTpId, sig: bytes) -> None:
        if vehicle in self.participants and vehicle != self.proposer:
            self.agreements.setdefault(vehicle, sig)

    def unanimous(self) -> bool:
        return set(self.agreements) == set(self.participants) - {self.proposer}

    def fallback_ordering(self) -> list[IvTpId]:
        """Safe deterministic order used when a session aborts."""
        return sorted(self.participants)


def on_schedule(session: IntersectionSession, schedule: Schedule) -> bool:
    """A participant's verdict on a received proposal: True = agree.

    Disagreement covers both a mismatching order and an intent set this
    vehicle never managed to complete (it cannot vouch for an order it
    cannot recompute).
    """
    if session.phase not in (Phase.COLLECTING, Phase.PROPOSING, Phase.AGREEING):
        raise SessionStateError(f"schedule received in phase {session.phase.value}")
    return session.matches(schedule)


def agreement_signature(keypair: KeyPair, intersection_id: str, ordering) -> bytes:
    return identity.sign(keypair, agree_message(intersection_id, ordering))


def recover(session: IntersectionSession) -> Phase:
    """Bounded retry: first failure restarts collection for one more
    round (lowest id will re-propose); a second failure aborts, leaving
    the id-sorted fallback ordering as the crossing rule."""
    if session.phase in (Phase.COMMITTED, Phase.ABORTED):
        return session.phase
    session.round += 1
    session.agreements.clear()
    session.schedule = None
    session.proposer = None
    session.completion_tf = None
    if session.round >= 2:
        session.phase = Phase.ABORTED
    else:
        session.phase = Phase.COLLECTING
    return session.phase


def commit_and_reward(
    session: IntersectionSession,
    agreements: Mapping[IvTpId, bytes],
    keys: Mapping[IvTpId, KeyPair],
    tf: TimeFlag,
    reward_direction: str = REWARD_FIRST_TO_PROPOSER,
) -> tuple[ArbitrationTx, RewardTx | None]:
    """Build the signed outcome transactions for a unanimous session.

    Needs the signing keys of the proposer and of the paying vehicle;
    in the networked simulation the payer signs its own reward after the
    outcome notice instead, this composite serves direct library use.
    """
    if session.schedule is None or session.proposer is None:
        raise SessionStateError("no proposed schedule to commit")
    ordering = session.schedule.ordering
    expected = set(session.participants) - {session.proposer}
    if set(agreements) != expected:
        missing = {v.hex()[:8] for v in expected - set(agreements)}
        raise NotUnanimousError(f"missing agreement from {sorted(missing)}")
    msg = agree_message(session.intersection_id, ordering)
    for veh, sig in agreements.items():
        if not identity.verify(keys[veh].public_key, msg, sig):
            raise NotUnanimousError(f"bad agreement signature from {veh.hex()[:8]}")

    arb = ArbitrationTx(
        author=session.proposer,
        tf=tf,
        signature=b"",
        intersection_id=session.intersection_id,
        ordering=ordering,
        proposer=session.proposer,
        agreements=tuple(sorted(agreements.items())),
    )
    arb = _signed(arb, keys[session.proposer])

    payer, payee = reward_parties(ordering, session.proposer, reward_direction)
    reward = None
    if payer != payee:
        reward = RewardTx(
            author=payer,
            tf=tf,
            signature=b"",
            from_id=payer,
            to_id=payee,
            amount=REWARD_MILLI_TRUST,
            reason=session.intersection_id,
        )
        reward = _signed(reward, keys[payer])
    session.phase = Phase.COMMITTED
    session.agreements = dict(agreements)
    return arb, reward


def reward_parties(ordering, proposer: IvTpId, direction: str) -> tuple[IvTpId, IvTpId]:
    """Resolve (payer, payee) for a committed ordering. Equal payer and
    payee means no reward changes hands (no self-payment)."""
    first = ordering[0]
    if direction == REWARD_PROPOSER_TO_FIRST:
        return proposer, first
    if direction == REWARD_FIRST_TO_PROPOSER:
        return first, proposer
    raise ValueError(f"unknown reward direction: {direction}")


def _signed(tx, keypair: KeyPair):
    return dataclasses.replace(tx, signature=identity.sign(keypair, tx_signing_bytes(tx)))
