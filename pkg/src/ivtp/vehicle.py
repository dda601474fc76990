"""Vehicle agent: frame codec, verification pipeline, protocol handlers.

Every message on the air is a Frame: signed, self-delimiting, carrying
a kind tag, the sender's trust-point id, an audience, a time flag, and
a kind-specific payload. A receiver verifies the signature against the
sender's on-chain key before any handler sees the content; frames that
fail are dropped and counted, never raised.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import arbitration, consensus, identity, ledger
from .arbitration import IntersectionSession, Phase, Schedule
from .identity import IvTpId, KeyPair, sha256, short_id
from .ledger import (
    ArbitrationTx,
    BeaconTx,
    CommTx,
    FieldOverflowError,
    RewardTx,
    TimeFlag,
    Transaction,
    _Reader,
    agree_message,
    canonical_decode,
    canonical_encode,
    tx_signing_bytes,
)

KIND_BEACON = 1
KIND_COMM = 2
KIND_INTENT = 3
KIND_SCHEDULE = 4
KIND_AGREE = 5
KIND_DISAGREE = 6
KIND_ENDORSE = 7
KIND_REWARD_NOTICE = 8

KIND_LABELS = {
    KIND_BEACON: "beacon",
    KIND_COMM: "comm",
    KIND_INTENT: "intent",
    KIND_SCHEDULE: "schedule",
    KIND_AGREE: "agree",
    KIND_DISAGREE: "disagree",
    KIND_ENDORSE: "endorse",
    KIND_REWARD_NOTICE: "reward_notice",
}

_AUDIENCE_BROADCAST = 0
_AUDIENCE_DIRECTED = 1


class FrameDecodeError(ValueError):
    """Byte string is not a well-formed frame."""


class NotRegisteredError(ValueError):
    """Action requires the vehicle to be registered on the chain."""


class SessionExistsError(ValueError):
    """A vehicle runs at most one session per intersection at a time."""


@dataclass(frozen=True)
class Frame:
    """One broadcast message. audience None means everyone."""

    kind: int
    sender: IvTpId
    audience: tuple[IvTpId, ...] | None
    tf: TimeFlag
    payload: bytes
    signature: bytes = b""

    def __post_init__(self):
        if self.audience is not None:
            object.__setattr__(self, "audience", tuple(sorted(set(self.audience))))

    @property
    def kind_label(self) -> str:
        return KIND_LABELS.get(self.kind, f"kind-{self.kind}")


def _encode(f: Frame, with_signature: bool) -> bytes:
    if not 0 < f.kind < 256:
        raise FieldOverflowError(f"frame kind out of range: {f.kind}")
    if len(f.sender) != 32:
        raise FieldOverflowError("sender id must be 32 bytes")
    parts = [bytes([f.kind]), f.sender]
    if f.audience is None:
        parts.append(bytes([_AUDIENCE_BROADCAST]) + ledger._u32(0))
    else:
        parts.append(bytes([_AUDIENCE_DIRECTED]) + ledger._u32(len(f.audience)))
        for veh in f.audience:
            if len(veh) != 32:
                raise FieldOverflowError("audience id must be 32 bytes")
            parts.append(veh)
    parts.append(ledger._u64(f.tf))
    parts.append(ledger._blob(f.payload))
    if with_signature:
        if len(f.signature) != identity.SIGNATURE_LEN:
            raise FieldOverflowError("signature must be 64 bytes")
        parts.append(f.signature)
    return b"".join(parts)


def encode_frame(f: Frame) -> bytes:
    return _encode(f, with_signature=True)


def frame_signing_bytes(f: Frame) -> bytes:
    return _encode(f, with_signature=False)


def decode_frame(data: bytes) -> Frame:
    try:
        r = _Reader(data)
        kind = r.take(1)[0]
        sender = r.take(32)
        audience_tag = r.take(1)[0]
        count = r.u32()
        if audience_tag == _AUDIENCE_BROADCAST:
            if count != 0:
                raise FrameDecodeError("broadcast audience with nonzero count")
            audience = None
        elif audience_tag == _AUDIENCE_DIRECTED:
            audience = tuple(r.take(32) for _ in range(count))
        else:
            raise FrameDecodeError(f"unknown audience tag {audience_tag}")
        tf = r.u64()
        payload = r.blob()
        signature = r.take(identity.SIGNATURE_LEN)
        if not r.done():
            raise FrameDecodeError("trailing bytes after frame")
    except FrameDecodeError:
        raise
    except ValueError as exc:
        raise FrameDecodeError(str(exc)) from exc
    return Frame(
        kind=kind, sender=sender, audience=audience, tf=tf, payload=payload, signature=signature
    )


def make_frame(
    kind: int,
    keypair: KeyPair,
    sender: IvTpId,
    tf: TimeFlag,
    payload: bytes,
    audience: tuple[IvTpId, ...] | None = None,
) -> Frame:
    f = Frame(kind=kind, sender=sender, audience=audience, tf=tf, payload=payload)
    sig = identity.sign(keypair, frame_signing_bytes(f))
    return dataclasses.replace(f, signature=sig)


def verify_frame(f: Frame, sender_pk: bytes) -> bool:
    try:
        msg = frame_signing_bytes(f)
    except FieldOverflowError:
        return False
    return identity.verify(sender_pk, msg, f.signature)


def _compact(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------

@dataclass
class VehicleConfig:
    beacon_period_ms: int = 100
    beacon_window_ms: int = 500
    agree_timeout_ms: int = 150
    network_id: str = "net-0"
    position_zone: str = "zone-0"
    reward_direction: str = arbitration.REWARD_FIRST_TO_PROPOSER


class Vehicle:
    """Protocol endpoint driven by the event loop.

    Handlers take a verified frame (or a timer tag) plus the current
    time and return the frames to broadcast in response. All chain
    access goes through the shared replicated ledger object.
    """

    def __init__(
        self,
        ivtp_id: IvTpId,
        keypair: KeyPair,
        chain: ledger.Chain,
        config: VehicleConfig | None = None,
        alias: str | None = None,
    ):
        self.ivtp_id = ivtp_id
        self.keypair = keypair
        self.chain = chain
        self.config = config or VehicleConfig()
        self.alias = alias or short_id(ivtp_id)
        self.net = None  # netsim.Network, set when joining
        self.peer_beacons: dict[IvTpId, TimeFlag] = {}
        self.endorsed: set[bytes] = set()
        self.inbox: list[tuple[TimeFlag, str, IvTpId]] = []
        self.drop_count = 0
        self.drop_log: list[tuple[TimeFlag, str]] = []
        self.sessions: dict[str, IntersectionSession] = {}
        self._session_timers: dict[str, list[int]] = {}
        self.submitted: list[Transaction] = []

    # -- plumbing -----------------------------------------------------------

    def _sign_tx(self, tx: Transaction) -> Transaction:
        return dataclasses.replace(
            tx, signature=identity.sign(self.keypair, tx_signing_bytes(tx))
        )

    def _frame(self, kind: int, obj, now: TimeFlag, audience=None) -> Frame:
        return make_frame(kind, self.keypair, self.ivtp_id, now, _compact(obj), audience)

    def _drop(self, f: Frame, now: TimeFlag, reason: str) -> list[Frame]:
        self.drop_count += 1
        self.drop_log.append((now, reason))
        if self.net is not None:
            self.net.trace.append(
                {
                    "t_ms": now,
                    "vehicle": self.alias,
                    "dir": "drop",
                    "kind": f.kind_label,
                    "detail": {"reason": reason, "from": self.net.alias_of(f.sender)},
                }
            )
        return []

    def _note(self, now: TimeFlag, kind: str, detail) -> None:
        if self.net is not None:
            self.net.note(now, self.alias, kind, detail)

    def _set_timer(self, session_id: str | None, fire_at: TimeFlag, tag) -> None:
        if self.net is None:
            return
        timer_id = self.net.set_timer(self.ivtp_id, fire_at, tag)
        if session_id is not None:
            self._session_timers.setdefault(session_id, []).append(timer_id)

    def _cancel_session_timers(self, session_id: str) -> None:
        if self.net is None:
            return
        for timer_id in self._session_timers.pop(session_id, []):
            self.net.cancel_timer(timer_id)

    def active_peers(self, now: TimeFlag) -> set[IvTpId]:
        """Registered vehicles heard beaconing within the window,
        excluding this one."""
        lo = now - self.config.beacon_window_ms
        return {
            veh
            for veh, tf in self.peer_beacons.items()
            if lo <= tf <= now and veh != self.ivtp_id and self.chain.is_registered(veh)
        }

    def _pod_ctx(self, now: TimeFlag) -> consensus.PodContext:
        lo = now - self.config.beacon_window_ms
        active = {
            veh
            for veh, tf in self.peer_beacons.items()
            if lo <= tf <= now and self.chain.is_registered(veh)
        }
        return consensus.PodContext(
            active_set=active,
            beacon_window_ms=self.config.beacon_window_ms,
            network_id=self.config.network_id,
        )

    # -- sending ------------------------------------------------------------

    def emit_beacon(self, now: TimeFlag) -> Frame:
        """Signed liveness announcement; also refreshes our own entry in
        the local freshness table so we count ourselves active."""
        tx = self._sign_tx(
            BeaconTx(
                author=self.ivtp_id,
                tf=now,
                signature=b"",
                network_id=self.config.network_id,
                position_zone=self.config.position_zone,
            )
        )
        self.peer_beacons[self.ivtp_id] = now
        return self._frame(KIND_BEACON, {"tx": canonical_encode(tx).hex()}, now)

    def send_comm(self, payload: bytes, now: TimeFlag) -> tuple[Frame, CommTx]:
        """Broadcast a message and the matching on-chain record. The
        receiver set is the intended audience: peers active right now."""
        if not self.chain.is_registered(self.ivtp_id):
            raise NotRegisteredError(self.alias)
        receivers = tuple(sorted(self.active_peers(now)))
        tx = self._sign_tx(
            CommTx(
                author=self.ivtp_id,
                tf=now,
                signature=b"",
                sender=self.ivtp_id,
                receivers=receivers,
                message_hash=sha256(payload),
                tf_sent=now,
            )
        )
        self.submitted.append(tx)
        frame = self._frame(
            KIND_COMM, {"body": payload.hex(), "tx": canonical_encode(tx).hex()}, now
        )
        return frame, tx

    # -- sessions -----------------------------------------------------------

    def open_session(
        self,
        intersection_id: str,
        participants: frozenset[IvTpId],
        compute_delays: dict[IvTpId, int],
        collection_deadline: TimeFlag,
    ) -> IntersectionSession:
        if intersection_id in self.sessions:
            raise SessionExistsError(intersection_id)
        session = IntersectionSession(
            intersection_id=intersection_id,
            participants=participants,
            compute_delays=dict(compute_delays),
            collection_deadline=collection_deadline,
        )
        self.sessions[intersection_id] = session
        if self.ivtp_id in participants:
            self._set_timer(
                intersection_id, collection_deadline, ("collect_deadline", intersection_id, 0)
            )
        return session

    def announce_arrival(self, intersection_id: str, now: TimeFlag) -> list[Frame]:
        """Called at this vehicle's arrival time: broadcast the intent
        and record it locally."""
        session = self.sessions[intersection_id]
        out = [
            self._frame(
                KIND_INTENT, {"intersection": intersection_id, "tf": now}, now
            )
        ]
        if session.add_intent(self.ivtp_id, now) and session.phase is Phase.COLLECTING:
            out.extend(self._enter_election(session, now))
        return out

    def _enter_election(self, session: IntersectionSession, now: TimeFlag) -> list[Frame]:
        """All intents are in: everyone knows who will propose, and when
        to give up waiting for the outcome."""
        session.phase = Phase.PROPOSING
        session.completion_tf = now
        scheduler, t_prop = session.elect(now)
        session.proposer = scheduler
        iid = session.intersection_id
        if scheduler == self.ivtp_id:
            self._set_timer(iid, t_prop, ("propose", iid, session.round))
        self._set_timer(
            iid, now + self.config.agree_timeout_ms, ("agree_deadline", iid, session.round)
        )
        return []

    def _propose(self, session: IntersectionSession, now: TimeFlag) -> list[Frame]:
        session.phase = Phase.AGREEING
        schedule = session.make_schedule(self.ivtp_id)
        session.schedule = schedule
        payload = {
            "intersection": session.intersection_id,
            "ordering": [veh.hex() for veh in schedule.ordering],
            "basis": [[veh.hex(), tf] for veh, tf in schedule.basis],
            "round": session.round,
        }
        out = [self._frame(KIND_SCHEDULE, payload, now)]
        if session.unanimous():  # single-participant session
            out.extend(self._commit(session, now))
        return out

    def _commit(self, session: IntersectionSession, now: TimeFlag) -> list[Frame]:
        """Proposer side: unanimity reached, publish the outcome."""
        session.phase = Phase.COMMITTED
        self._cancel_session_timers(session.intersection_id)
        arb = self._sign_tx(
            ArbitrationTx(
                author=self.ivtp_id,
                tf=now,
                signature=b"",
                intersection_id=session.intersection_id,
                ordering=session.schedule.ordering,
                proposer=self.ivtp_id,
                agreements=tuple(sorted(session.agreements.items())),
            )
        )
        self.submitted.append(arb)
        self._note(
            now,
            "session_committed",
            {
                "intersection": session.intersection_id,
                "ordering": [self._alias_of(v) for v in session.schedule.ordering],
                "proposer": self.alias,
                "round": session.round,
            },
        )
        out = [
            self._frame(
                KIND_REWARD_NOTICE,
                {"intersection": session.intersection_id, "tx": canonical_encode(arb).hex()},
                now,
            )
        ]
        out.extend(self._maybe_pay_reward(arb, now))
        return out

    def _maybe_pay_reward(self, arb: ArbitrationTx, now: TimeFlag) -> list[Frame]:
        """Whoever owes the fee signs and announces its own transfer."""
        payer, payee = arbitration.reward_parties(
            arb.ordering, arb.proposer, self.config.reward_direction
        )
        if payer != self.ivtp_id or payer == payee:
            return []
        reward = self._sign_tx(
            RewardTx(
                author=self.ivtp_id,
                tf=now,
                signature=b"",
                from_id=self.ivtp_id,
                to_id=payee,
                amount=arbitration.REWARD_MILLI_TRUST,
                reason=arb.intersection_id,
            )
        )
        self.submitted.append(reward)
        return [
            self._frame(
                KIND_REWARD_NOTICE,
                {"intersection": arb.intersection_id, "tx": canonical_encode(reward).hex()},
                now,
            )
        ]

    def _enter_recovery(self, session: IntersectionSession, now: TimeFlag) -> list[Frame]:
        self._cancel_session_timers(session.intersection_id)
        phase = arbitration.recover(session)
        iid = session.intersection_id
        if phase is Phase.ABORTED:
            self._note(
                now,
                "session_aborted",
                {
                    "intersection": iid,
                    "fallback": [self._alias_of(v) for v in session.fallback_ordering()],
                },
            )
            return []
        self._note(now, "session_retry", {"intersection": iid, "round": session.round})
        out = []
        own_tf = session.intents.get(self.ivtp_id)
        if own_tf is not None:
            out.append(self._frame(KIND_INTENT, {"intersection": iid, "tf": own_tf}, now))
        self._set_timer(
            iid,
            now + self.config.agree_timeout_ms,
            ("collect_deadline", iid, session.round),
        )
        # A vehicle that already holds every intent re-elects right away;
        # the ones that were missing intents wait for the re-broadcasts.
        if session.is_complete():
            out.extend(self._enter_election(session, now))
        return out

    def _alias_of(self, veh: IvTpId) -> str:
        if self.net is not None:
            return self.net.alias_of(veh)
        return short_id(veh)

    # -- receiving ----------------------------------------------------------

    def on_receive(self, f: Frame, now: TimeFlag) -> list[Frame]:
        """Verification pipeline: on-chain key lookup, signature check,
        audience filter, then kind dispatch. Bad frames drop silently."""
        pk = self.chain.public_key_of(f.sender)
        if pk is None:
            return self._drop(f, now, "unknown_sender")
        if not verify_frame(f, pk):
            return self._drop(f, now, "bad_signature")
        if f.audience is not None and self.ivtp_id not in f.audience:
            return []
        self.inbox.append((now, f.kind_label, f.sender))
        handler = {
            KIND_BEACON: self._on_beacon,
            KIND_COMM: self._on_comm,
            KIND_INTENT: self._on_intent,
            KIND_SCHEDULE: self._on_schedule,
            KIND_AGREE: self._on_agree,
            KIND_DISAGREE: self._on_disagree,
            KIND_ENDORSE: self._on_endorse,
            KIND_REWARD_NOTICE: self._on_reward_notice,
        }.get(f.kind)
        if handler is None:
            return self._drop(f, now, "unknown_kind")
        try:
            return handler(f, now)
        except (ValueError, KeyError) as exc:
            return self._drop(f, now, f"bad_payload:{exc}")

    # netsim.Participant protocol
    handle_frame = on_receive

    def handle_timer(self, tag, now: TimeFlag) -> list[Frame]:
        kind = tag[0]
        if kind == "beacon":
            self._set_timer(None, now + self.config.beacon_period_ms, ("beacon",))
            return [self.emit_beacon(now)]
        if kind == "comm":
            frame, _tx = self.send_comm(bytes.fromhex(tag[1]), now)
            return [frame]
        if kind == "arrive":
            return self.announce_arrival(tag[1], now)
        session = self.sessions.get(tag[1])
        if session is None:
            return []
        if kind == "propose":
            if session.phase is Phase.PROPOSING and session.round == tag[2] and (
                session.proposer == self.ivtp_id
            ):
                return self._propose(session, now)
            return []
        if kind == "collect_deadline":
            if session.phase is Phase.COLLECTING and session.round == tag[2] and (
                not session.is_complete()
            ):
                return self._enter_recovery(session, now)
            return []
        if kind == "agree_deadline":
            if session.phase in (Phase.PROPOSING, Phase.AGREEING) and session.round == tag[2]:
                return self._enter_recovery(session, now)
            return []
        return []

    # -- kind handlers ------------------------------------------------------

    def _on_beacon(self, f: Frame, now: TimeFlag) -> list[Frame]:
        if f.tf > self.peer_beacons.get(f.sender, -1):
            self.peer_beacons[f.sender] = f.tf
        return []

    def _endorse_tx(self, tx: Transaction, verdict_override: str | None, now: TimeFlag):
        """One endorsement per transaction id, ever."""
        tx_id = tx.tx_id
        if tx_id in self.endorsed or tx.author == self.ivtp_id:
            return []
        self.endorsed.add(tx_id)
        if verdict_override is not None:
            verdict = verdict_override
        else:
            pod = consensus.pod_check(self._pod_ctx(now), tx, self.chain)
            verdict = consensus.VERDICT_VALID if pod.valid else consensus.VERDICT_INVALID
        e = consensus.make_endorsement(tx_id, self.ivtp_id, verdict, self.keypair)
        payload = {
            "tx_id": tx_id.hex(),
            "verdict": e.verdict,
            "sig": e.signature.hex(),
        }
        return [self._frame(KIND_ENDORSE, payload, now)]

    def _on_comm(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        tx = canonical_decode(bytes.fromhex(body["tx"]))
        if not isinstance(tx, CommTx) or tx.author != f.sender:
            return self._drop(f, now, "tx_sender_mismatch")
        verdict = None
        if sha256(bytes.fromhex(body["body"])) != tx.message_hash:
            verdict = consensus.VERDICT_INVALID  # content does not match record
        return self._endorse_tx(tx, verdict, now)

    def _on_intent(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        session = self.sessions.get(body["intersection"])
        if session is None or f.sender not in session.participants:
            return []
        if session.phase is not Phase.COLLECTING:
            return []
        if session.add_intent(f.sender, int(body["tf"])):
            return self._enter_election(session, now)
        return []

    def _on_schedule(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        iid = body["intersection"]
        session = self.sessions.get(iid)
        if session is None or self.ivtp_id not in session.participants:
            return []
        if session.phase in (Phase.COMMITTED, Phase.ABORTED) or f.sender == self.ivtp_id:
            return []
        if int(body["round"]) != session.round:
            return []  # leftover from an already-failed round
        if session.proposer is not None and f.sender != session.proposer:
            return []
        schedule = Schedule(
            ordering=tuple(bytes.fromhex(v) for v in body["ordering"]),
            proposer=f.sender,
            basis=tuple((bytes.fromhex(v), int(tf)) for v, tf in body["basis"]),
        )
        if arbitration.on_schedule(session, schedule):
            session.phase = Phase.AGREEING
            session.proposer = f.sender
            session.schedule = schedule
            sig = arbitration.agreement_signature(self.keypair, iid, schedule.ordering)
            payload = {"intersection": iid, "sig": sig.hex(), "round": session.round}
            return [self._frame(KIND_AGREE, payload, now)]
        mine = []
        if session.intents:
            mine = [v.hex() for v in arbitration.compute_order(session.intents)]
        disagree = self._frame(
            KIND_DISAGREE,
            {"intersection": iid, "ordering": mine, "round": session.round},
            now,
        )
        return [disagree] + self._enter_recovery(session, now)

    def _on_agree(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        session = self.sessions.get(body["intersection"])
        if (
            session is None
            or session.proposer != self.ivtp_id
            or session.phase is not Phase.AGREEING
            or f.sender not in session.participants
            or int(body["round"]) != session.round
        ):
            return []
        sig = bytes.fromhex(body["sig"])
        pk = self.chain.public_key_of(f.sender)
        msg = agree_message(session.intersection_id, session.schedule.ordering)
        if pk is None or not identity.verify(pk, msg, sig):
            return self._drop(f, now, "bad_agreement_sig")
        session.record_agreement(f.sender, sig)
        if session.unanimous():
            return self._commit(session, now)
        return []

    def _on_disagree(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        session = self.sessions.get(body["intersection"])
        if (
            session is None
            or self.ivtp_id not in session.participants
            or f.sender not in session.participants
            or session.phase in (Phase.COMMITTED, Phase.ABORTED)
            or int(body["round"]) < session.round
        ):
            return []
        return self._enter_recovery(session, now)

    def _on_endorse(self, f: Frame, now: TimeFlag) -> list[Frame]:
        return []  # consensus metadata; the ledger host consumes these

    def _on_reward_notice(self, f: Frame, now: TimeFlag) -> list[Frame]:
        body = json.loads(f.payload.decode())
        tx = canonical_decode(bytes.fromhex(body["tx"]))
        out: list[Frame] = []
        if isinstance(tx, ArbitrationTx):
            session = self.sessions.get(tx.intersection_id)
            if (
                session is not None
                and self.ivtp_id in session.participants
                and session.phase not in (Phase.COMMITTED, Phase.ABORTED)
            ):
                session.phase = Phase.COMMITTED
                session.proposer = tx.proposer
                self._cancel_session_timers(tx.intersection_id)
            out.extend(self._endorse_tx(tx, None, now))
            out.extend(self._maybe_pay_reward(tx, now))
        elif isinstance(tx, RewardTx):
            out.extend(self._endorse_tx(tx, None, now))
        return out
