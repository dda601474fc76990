"""Proof-of-Driving consensus: beacon freshness, endorsements, and the
strict-majority commit rule.

A transaction is only as good as the evidence that its author was
actually on the road: authors must hold a beacon no older than the
freshness window, and a pending transaction commits once strictly more
than half of the other active vehicles endorse it as valid. Vehicles
never count toward their own quorum.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from . import identity, ledger
from .identity import IvTpId
from .ledger import (
    ArbitrationTx,
    BeaconTx,
    Chain,
    CommTx,
    RegisterTx,
    RewardTx,
    TimeFlag,
    Transaction,
)

VERDICT_VALID = "valid"
VERDICT_INVALID = "invalid"


@dataclass(frozen=True)
class Endorsement:
    """A signed verdict on a pending transaction by a non-author."""

    tx_id: bytes
    endorser: IvTpId
    verdict: str  # VERDICT_VALID or VERDICT_INVALID
    signature: bytes  # over endorsement_message(tx_id, verdict)


def endorsement_message(tx_id: bytes, verdict: str) -> bytes:
    flag = b"\x01" if verdict == VERDICT_VALID else b"\x00"
    return b"ivtp/endorse" + tx_id + flag


def make_endorsement(
    tx_id: bytes, endorser: IvTpId, verdict: str, keypair: identity.KeyPair
) -> Endorsement:
    sig = identity.sign(keypair, endorsement_message(tx_id, verdict))
    return Endorsement(tx_id=tx_id, endorser=endorser, verdict=verdict, signature=sig)


def check_endorsement(e: Endorsement, endorser_pk: bytes) -> bool:
    return identity.verify(endorser_pk, endorsement_message(e.tx_id, e.verdict), e.signature)


@dataclass
class PodContext:
    """Snapshot of who counts as driving right now."""

    active_set: set[IvTpId]
    beacon_window_ms: int
    network_id: str = "net-0"


@dataclass(frozen=True)
class PodVerdict:
    valid: bool
    cause: str | None = None

    @staticmethod
    def ok() -> "PodVerdict":
        return PodVerdict(True, None)

    @staticmethod
    def bad(cause: str) -> "PodVerdict":
        return PodVerdict(False, cause)


def active_vehicles(
    chain: Chain,
    now: TimeFlag,
    window_ms: int,
    pending_beacons: dict[IvTpId, TimeFlag] | None = None,
) -> set[IvTpId]:
    """Vehicles whose freshest beacon, committed or still pending, has
    tf in the closed interval [now - window_ms, now]."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    latest: dict[IvTpId, TimeFlag] = dict(chain.state.last_beacon)
    for veh, tf in (pending_beacons or {}).items():
        if veh not in latest or tf > latest[veh]:
            latest[veh] = tf
    lo = now - window_ms
    return {veh for veh, tf in latest.items() if lo <= tf <= now and chain.is_registered(veh)}


def pod_check(ctx: PodContext, tx: Transaction, chain: Chain) -> PodVerdict:
    """One vehicle's validity verdict on a pending transaction."""
    if isinstance(tx, RegisterTx):
        # Registrations are dealer business, not driving evidence: check
        # the dealer binding and uniqueness against the current chain.
        cause = chain.state.check_tx(tx, chain.height + 1)
        return PodVerdict.ok() if cause is None else PodVerdict.bad(cause)

    pk = chain.public_key_of(tx.author)
    if pk is None:
        return PodVerdict.bad("not_registered")
    if not identity.verify(pk, ledger.tx_signing_bytes(tx), tx.signature):
        return PodVerdict.bad("bad_signature")
    if tx.author not in ctx.active_set:
        return PodVerdict.bad("not_driving")

    if isinstance(tx, CommTx):
        if tx.sender != tx.author:
            return PodVerdict.bad("sender_mismatch")
        for rcv in tx.receivers:
            if not chain.is_registered(rcv):
                return PodVerdict.bad("receiver_not_registered")
    elif isinstance(tx, RewardTx):
        if tx.author != tx.from_id:
            return PodVerdict.bad("author_not_payer")
        if tx.amount <= 0:
            return PodVerdict.bad("non_positive_amount")
        if not chain.is_registered(tx.to_id):
            return PodVerdict.bad("recipient_not_registered")
        if chain.state.balances.get(tx.from_id, 0) < tx.amount:
            return PodVerdict.bad("insufficient_balance")
    elif isinstance(tx, ArbitrationTx):
        cause = chain.state.check_tx(tx, chain.height + 1)
        if cause is not None:
            return PodVerdict.bad(cause)
        for member in tx.ordering:
            if member not in ctx.active_set:
                return PodVerdict.bad("member_not_active")
    return PodVerdict.ok()


def quorum_threshold(n_active_excluding_author: int) -> int:
    """Smallest endorsement count strictly above half of n. Zero when
    there is nobody else to ask, so lone networks still make progress."""
    n = n_active_excluding_author
    if n < 0:
        raise ValueError("active count cannot be negative")
    return 0 if n == 0 else n // 2 + 1


@dataclass
class PendingTx:
    tx: Transaction
    endorsements: dict[IvTpId, Endorsement] = field(default_factory=dict)

    def add(self, e: Endorsement) -> bool:
        """Record an endorsement; first verdict per endorser wins."""
        if e.endorser == self.tx.author or e.endorser in self.endorsements:
            return False
        self.endorsements[e.endorser] = e
        return True

    def count(self, verdict: str) -> int:
        return sum(1 for e in self.endorsements.values() if e.verdict == verdict)


@dataclass
class CommitResult:
    block: ledger.Block | None
    still_pending: list[PendingTx]
    rejected: list[tuple[PendingTx, str]]


def try_commit(
    pending: list[PendingTx], ctx: PodContext, chain: Chain, now: TimeFlag
) -> CommitResult:
    """Select every pending tx that reached quorum, commit them as one
    block (ordered by tf then tx_id), and report quorum-rejected txs.

    Endorsements are assumed signature-checked and deduplicated on
    ingestion. A tx that would no longer apply cleanly (say its payer
    spent the balance since endorsement) is rejected, not committed.
    """
    committable: list[PendingTx] = []
    still_pending: list[PendingTx] = []
    rejected: list[tuple[PendingTx, str]] = []
    for item in pending:
        others = ctx.active_set - {item.tx.author}
        needed = quorum_threshold(len(others))
        if item.count(VERDICT_VALID) >= needed:
            committable.append(item)
        elif needed > 0 and item.count(VERDICT_INVALID) >= needed:
            rejected.append((item, "quorum_invalid"))
        else:
            still_pending.append(item)

    if not committable:
        return CommitResult(None, still_pending, rejected)

    committable.sort(key=lambda p: (p.tx.tf, p.tx.tx_id))
    # Replay-check against a scratch state so one stale tx (say a payer
    # that spent its balance since endorsement) cannot poison the block.
    scratch = copy.deepcopy(chain.state)
    height = chain.height + 1
    accepted: list[Transaction] = []
    for item in committable:
        cause = scratch.check_tx(item.tx, height)
        if cause is None:
            scratch.apply_tx(item.tx, height)
            accepted.append(item.tx)
        else:
            rejected.append((item, cause))
    if not accepted:
        return CommitResult(None, still_pending, rejected)
    block = chain.append_block(accepted, timestamp=now)
    return CommitResult(block, still_pending, rejected)
