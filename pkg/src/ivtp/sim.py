"""Simulation runner: wires scenario, network, vehicles and the ledger.

The replicated ledger is modeled as one network participant (the
"host") that hears every broadcast, pools transactions and their
endorsements, and commits a block whenever a pending transaction
reaches its quorum. Vehicles share the host's chain object for key
lookups and balance checks, which stands in for every node holding a
synchronized replica.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import consensus, identity, ledger, netsim
from .identity import IvTpId, sha256, short_id
from .ledger import ArbitrationTx, BeaconTx, RewardTx, TimeFlag, Transaction
from .scenario import ScenarioConfig, seed_bytes
from .vehicle import (
    KIND_BEACON,
    KIND_COMM,
    KIND_ENDORSE,
    KIND_REWARD_NOTICE,
    Frame,
    Vehicle,
    VehicleConfig,
    verify_frame,
)

HOST_ID = sha256(b"ivtp/ledger-host")


class LedgerHost:
    """Network participant that turns broadcasts into chain state."""

    def __init__(
        self,
        chain: ledger.Chain,
        beacon_window_ms: int,
        pending_ttl_ms: int,
        network_id: str = "net-0",
    ):
        self.ivtp_id = HOST_ID
        self.chain = chain
        self.beacon_window_ms = beacon_window_ms
        self.pending_ttl_ms = pending_ttl_ms
        self.network_id = network_id
        self.net = None
        self.pending: list[consensus.PendingTx] = []
        self.pending_beacons: dict[IvTpId, TimeFlag] = {}
        self.early_endorsements: dict[bytes, list[consensus.Endorsement]] = {}
        self.rejected: list[tuple[bytes, str, TimeFlag]] = []

    def _note(self, now: TimeFlag, kind: str, detail) -> None:
        if self.net is not None:
            self.net.note(now, "host", kind, detail)

    def _known(self, tx_id: bytes) -> bool:
        if tx_id in self.chain.tx_by_id:
            return True
        return any(p.tx.tx_id == tx_id for p in self.pending)

    def ingest_tx(self, tx: Transaction, now: TimeFlag, sweep: bool = True) -> None:
        """Pool a transaction for quorum. Beacons are kept out of the
        pool: they are liveness metadata, vehicles never endorse them."""
        if isinstance(tx, BeaconTx):
            pk = self.chain.public_key_of(tx.author)
            if pk is None or not identity.verify(
                pk, ledger.tx_signing_bytes(tx), tx.signature
            ):
                return
            if tx.tf > self.pending_beacons.get(tx.author, -1):
                self.pending_beacons[tx.author] = tx.tf
            return
        tx_id = tx.tx_id
        if self._known(tx_id):
            return
        item = consensus.PendingTx(tx=tx)
        for e in self.early_endorsements.pop(tx_id, []):
            item.add(e)
        self.pending.append(item)
        if sweep:
            self.sweep(now)

    def ingest_endorsement(self, e: consensus.Endorsement, now: TimeFlag) -> None:
        pk = self.chain.public_key_of(e.endorser)
        if pk is None or not consensus.check_endorsement(e, pk):
            return
        if e.tx_id in self.chain.tx_by_id:
            return
        for item in self.pending:
            if item.tx.tx_id == e.tx_id:
                item.add(e)
                break
        else:
            self.early_endorsements.setdefault(e.tx_id, []).append(e)
        self.sweep(now)

    def sweep(self, now: TimeFlag) -> None:
        """Reap expired transactions, then commit whatever has quorum."""
        fresh: list[consensus.PendingTx] = []
        for item in self.pending:
            if now - item.tx.tf > self.pending_ttl_ms:
                self._note(
                    now,
                    "tx_expired",
                    {"tx_id": item.tx.tx_id.hex()[:16], "kind": type(item.tx).__name__},
                )
            else:
                fresh.append(item)
        self.pending = fresh

        ctx = consensus.PodContext(
            active_set=consensus.active_vehicles(
                self.chain, now, self.beacon_window_ms, self.pending_beacons
            ),
            beacon_window_ms=self.beacon_window_ms,
            network_id=self.network_id,
        )
        result = consensus.try_commit(self.pending, ctx, self.chain, now)
        self.pending = result.still_pending
        for item, cause in result.rejected:
            self.rejected.append((item.tx.tx_id, cause, now))
            self._note(
                now,
                "tx_rejected",
                {"tx_id": item.tx.tx_id.hex()[:16], "cause": cause},
            )
        if result.block is not None:
            self._note(
                now,
                "block_committed",
                {
                    "height": result.block.height,
                    "txs": len(result.block.txs),
                    "hash": result.block.block_hash.hex()[:16],
                },
            )

    # -- netsim.Participant ---------------------------------------------------

    def handle_frame(self, f: Frame, now: TimeFlag) -> list:
        pk = self.chain.public_key_of(f.sender)
        if pk is None or not verify_frame(f, pk):
            return []
        if f.kind in (KIND_BEACON, KIND_COMM, KIND_REWARD_NOTICE):
            try:
                body = json.loads(f.payload.decode())
                tx = ledger.canonical_decode(bytes.fromhex(body["tx"]))
            except (ValueError, KeyError):
                return []
            if tx.author == f.sender:
                self.ingest_tx(tx, now)
        elif f.kind == KIND_ENDORSE:
            try:
                body = json.loads(f.payload.decode())
                e = consensus.Endorsement(
                    tx_id=bytes.fromhex(body["tx_id"]),
                    endorser=f.sender,
                    verdict=body["verdict"],
                    signature=bytes.fromhex(body["sig"]),
                )
            except (ValueError, KeyError):
                return []
            self.ingest_endorsement(e, now)
        return []

    def handle_timer(self, tag, now: TimeFlag) -> list:
        return []


@dataclass
class RunHandles:
    """Everything a caller might want to poke at after a run."""

    cfg: ScenarioConfig
    chain: ledger.Chain
    host: LedgerHost
    vehicles: dict[str, Vehicle]
    net: netsim.Network
    aliases: dict[IvTpId, str]
    report: dict


def _build_world(cfg: ScenarioConfig):
    dealer = identity.DealerAuthority.from_name("dealer")
    chain = ledger.Chain.create(
        dealer, endowment=cfg.ledger.endowment_millitrust, genesis_tf=0
    )
    aliases: dict[IvTpId, str] = {dealer.dealer_id: "dealer", HOST_ID: "host"}

    vcfg = VehicleConfig(
        beacon_period_ms=cfg.consensus.beacon_period_ms,
        beacon_window_ms=cfg.consensus.beacon_window_ms,
        agree_timeout_ms=cfg.consensus.agree_timeout_ms,
        reward_direction=cfg.reward_direction,
    )

    vehicles: dict[str, Vehicle] = {}
    register_txs = []
    for entry in cfg.vehicles:
        kp = identity.keygen(seed_bytes(entry.seed))
        issuance = dealer.issue(kp.public_key)
        register_txs.append(ledger.register_tx_from_issuance(issuance, dealer, tf=0))
        veh = Vehicle(issuance.ivtp_id, kp, chain, config=vcfg, alias=entry.alias)
        vehicles[entry.alias] = veh
        aliases[issuance.ivtp_id] = entry.alias

    host = LedgerHost(
        chain,
        beacon_window_ms=cfg.consensus.beacon_window_ms,
        pending_ttl_ms=cfg.consensus.pending_ttl_ms,
    )
    net = netsim.Network(
        link=netsim.LinkModel(
            base_latency_ms=cfg.network.latency_ms,
            jitter_ms=cfg.network.jitter_ms,
            drop_probability=cfg.network.drop_probability,
        ),
        seed=cfg.network.seed,
        alias_of=lambda veh: aliases.get(veh, short_id(veh)),
    )
    host.net = net
    net.join(host)
    for veh in vehicles.values():
        veh.net = net
        net.join(veh)

    # Bootstrap: registrations reach the chain before any frame flows.
    # With nobody active yet the quorum threshold is zero, so the batch
    # commits as one block at t=0.
    for tx in register_txs:
        host.ingest_tx(tx, now=0, sweep=False)
    host.sweep(0)

    return dealer, chain, host, net, vehicles, aliases


def _schedule(cfg: ScenarioConfig, net: netsim.Network, vehicles: dict[str, Vehicle]):
    for veh in vehicles.values():
        net.set_timer(veh.ivtp_id, 0, ("beacon",))
    for entry in cfg.intersections:
        participants = frozenset(vehicles[a].ivtp_id for a in entry.participants)
        delays = {
            vehicles[a].ivtp_id: entry.compute_delay_ms[a] for a in entry.participants
        }
        deadline = max(entry.arrival_ms.values()) + entry.collection_window_ms
        for a in entry.participants:
            veh = vehicles[a]
            veh.open_session(entry.id, participants, delays, deadline)
            net.set_timer(veh.ivtp_id, entry.arrival_ms[a], ("arrive", entry.id))
    for comm in cfg.comms:
        veh = vehicles[comm.sender]
        net.set_timer(
            veh.ivtp_id, comm.at_ms, ("comm", comm.payload.encode().hex())
        )


def run(cfg: ScenarioConfig, out_dir=None) -> RunHandles:
    """Execute one scenario; optionally persist chain, trace and report."""
    _dealer, chain, host, net, vehicles, aliases = _build_world(cfg)
    _schedule(cfg, net, vehicles)
    net.run_until(cfg.run.t_end_ms)

    trace_bytes = encode_trace(net.trace)
    report = build_report(cfg, chain, net.trace, aliases, sha256(trace_bytes))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ledger.save_chain(chain, out / "chain.bin")
        (out / "trace.jsonl").write_bytes(trace_bytes)
        (out / "report.json").write_bytes(encode_report(report))

    return RunHandles(
        cfg=cfg,
        chain=chain,
        host=host,
        vehicles=vehicles,
        net=net,
        aliases=aliases,
        report=report,
    )


def encode_trace(trace: list[dict]) -> bytes:
    lines = [json.dumps(row, sort_keys=True, separators=(",", ":")) for row in trace]
    return ("\n".join(lines) + "\n").encode() if lines else b""


def encode_report(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


def build_report(
    cfg: ScenarioConfig,
    chain: ledger.Chain,
    trace: list[dict],
    aliases: dict[IvTpId, str],
    trace_digest: bytes,
) -> dict:
    """Deterministic run summary; rebuilding from the persisted chain
    and trace yields identical bytes."""

    def name(veh: IvTpId) -> str:
        return aliases.get(veh, short_id(veh))

    blocks = [
        {
            "height": b.height,
            "hash": b.block_hash.hex(),
            "timestamp": b.timestamp,
            "txs": len(b.txs),
        }
        for b in chain.blocks
    ]
    balances = {
        name(veh): bal for veh, bal in sorted(chain.state.balances.items())
    }
    comm_table = {
        name(veh): [name(p) for p in peers]
        for veh, peers in sorted(ledger.comm_table(chain).items())
    }

    rewards_by_reason: dict[str, dict] = {}
    reward_list = []
    for block in chain.blocks:
        for tx in block.txs:
            if isinstance(tx, RewardTx):
                entry = {
                    "from": name(tx.from_id),
                    "to": name(tx.to_id),
                    "amount": tx.amount,
                    "reason": tx.reason,
                }
                reward_list.append(entry)
                rewards_by_reason[tx.reason] = entry

    sessions: dict[str, dict] = {}
    for block in chain.blocks:
        for tx in block.txs:
            if isinstance(tx, ArbitrationTx):
                sessions[tx.intersection_id] = {
                    "outcome": "committed",
                    "ordering": [name(v) for v in tx.ordering],
                    "proposer": name(tx.proposer),
                    "rounds": 1,
                    "reward": rewards_by_reason.get(tx.intersection_id),
                }
    for row in trace:
        if row["dir"] != "note":
            continue
        if row["kind"] == "session_committed":
            iid = row["detail"]["intersection"]
            if iid in sessions:
                sessions[iid]["rounds"] = row["detail"]["round"] + 1
        elif row["kind"] == "session_aborted":
            iid = row["detail"]["intersection"]
            sessions.setdefault(
                iid,
                {
                    "outcome": "aborted",
                    "ordering": None,
                    "fallback": row["detail"]["fallback"],
                    "proposer": None,
                    "rounds": 2,
                    "reward": None,
                },
            )

    frames_sent = sum(1 for row in trace if row["dir"] == "send")
    frames_dropped = sum(1 for row in trace if row["dir"] == "drop")

    return {
        "scenario": cfg.name,
        "seed": cfg.network.seed,
        "t_end_ms": cfg.run.t_end_ms,
        "chain": {
            "height": chain.height,
            "blocks": blocks,
            "total_supply": ledger.total_supply(chain),
        },
        "balances": balances,
        "comm_table": comm_table,
        "rewards": reward_list,
        "sessions": {k: sessions[k] for k in sorted(sessions)},
        "counts": {"frames_sent": frames_sent, "frames_dropped": frames_dropped},
        "trace_digest": trace_digest.hex(),
    }
