"""Scenario files: the JSON schema that fully determines a run.

Everything a simulation does — identities, timings, link behavior,
session parameters — comes from one of these files plus its seed, so
two loads of the same file always produce the same run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .identity import sha256


class ParseError(ValueError):
    """File is not valid JSON."""

    def __init__(self, line: int, cause: str):
        super().__init__(f"line {line}: {cause}")
        self.line = line
        self.cause = cause


class ValidationError(ValueError):
    """JSON parsed but violates the scenario schema."""

    def __init__(self, fieldname: str, cause: str):
        super().__init__(f"{fieldname}: {cause}")
        self.field = fieldname
        self.cause = cause


def seed_bytes(seed: str) -> bytes:
    """Vehicle key seed: 64 hex chars are taken verbatim, anything else
    is hashed, so human-readable names work as seeds."""
    if len(seed) == 64:
        try:
            return bytes.fromhex(seed)
        except ValueError:
            pass
    return sha256(seed.encode())


@dataclass(frozen=True)
class NetworkConfig:
    latency_ms: int = 0
    jitter_ms: int = 0
    drop_probability: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ConsensusConfig:
    beacon_period_ms: int = 100
    beacon_window_ms: int = 500
    pending_ttl_ms: int = 2000
    agree_timeout_ms: int = 150


@dataclass(frozen=True)
class LedgerConfig:
    endowment_millitrust: int = 100_000


@dataclass(frozen=True)
class VehicleSpec:
    alias: str
    seed: str  # defaults to the alias itself


@dataclass(frozen=True)
class IntersectionSpec:
    id: str
    participants: tuple[str, ...]
    arrival_ms: dict[str, int]
    compute_delay_ms: dict[str, int]
    collection_window_ms: int = 300


@dataclass(frozen=True)
class CommSpec:
    """A scripted broadcast: sender says payload at at_ms."""

    sender: str
    at_ms: int
    payload: str


@dataclass(frozen=True)
class RunConfig:
    t_end_ms: int = 2000


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    network: NetworkConfig
    consensus: ConsensusConfig
    ledger: LedgerConfig
    vehicles: tuple[VehicleSpec, ...]
    intersections: tuple[IntersectionSpec, ...]
    comms: tuple[CommSpec, ...]
    run: RunConfig
    reward_direction: str = "first_to_proposer"


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ValidationError(key, "must be an object")
    return value


def _nonneg(section: str, key: str, value) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ValidationError(f"{section}.{key}", "must be a non-negative integer")
    return value


def scenario_from_dict(raw: dict, name: str = "scenario") -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ValidationError("$", "scenario must be a JSON object")

    net_raw = _section(raw, "network")
    network = NetworkConfig(
        latency_ms=_nonneg("network", "latency_ms", net_raw.get("latency_ms", 0)),
        jitter_ms=_nonneg("network", "jitter_ms", net_raw.get("jitter_ms", 0)),
        drop_probability=float(net_raw.get("drop_probability", 0.0)),
        seed=_nonneg("network", "seed", net_raw.get("seed", 0)),
    )
    if not 0.0 <= network.drop_probability <= 1.0:
        raise ValidationError("network.drop_probability", "must be within [0, 1]")

    cons_raw = _section(raw, "consensus")
    consensus = ConsensusConfig(
        beacon_period_ms=_nonneg(
            "consensus", "beacon_period_ms", cons_raw.get("beacon_period_ms", 100)
        ),
        beacon_window_ms=_nonneg(
            "consensus", "beacon_window_ms", cons_raw.get("beacon_window_ms", 500)
        ),
        pending_ttl_ms=_nonneg(
            "consensus", "pending_ttl_ms", cons_raw.get("pending_ttl_ms", 2000)
        ),
        agree_timeout_ms=_nonneg(
            "consensus", "agree_timeout_ms", cons_raw.get("agree_timeout_ms", 150)
        ),
    )
    if consensus.beacon_period_ms == 0 or consensus.beacon_window_ms == 0:
        raise ValidationError("consensus", "beacon period and window must be positive")

    led_raw = _section(raw, "ledger")
    led = LedgerConfig(
        endowment_millitrust=_nonneg(
            "ledger", "endowment_millitrust", led_raw.get("endowment_millitrust", 100_000)
        )
    )

    vehicles_raw = raw.get("vehicles", [])
    if not isinstance(vehicles_raw, list) or not vehicles_raw:
        raise ValidationError("vehicles", "must be a non-empty list")
    vehicles = []
    seen_aliases: set[str] = set()
    for i, entry in enumerate(vehicles_raw):
        if not isinstance(entry, dict) or "alias" not in entry:
            raise ValidationError(f"vehicles[{i}]", "must be an object with an alias")
        alias = entry["alias"]
        if not isinstance(alias, str) or not alias:
            raise ValidationError(f"vehicles[{i}].alias", "must be a non-empty string")
        if alias in seen_aliases:
            raise ValidationError(f"vehicles[{i}].alias", f"duplicate alias {alias!r}")
        seen_aliases.add(alias)
        vehicles.append(VehicleSpec(alias=alias, seed=str(entry.get("seed", alias))))

    intersections = []
    for i, entry in enumerate(raw.get("intersections", [])):
        where = f"intersections[{i}]"
        if not isinstance(entry, dict) or "id" not in entry:
            raise ValidationError(where, "must be an object with an id")
        participants = entry.get("participants", [])
        if not isinstance(participants, list) or len(participants) < 1:
            raise ValidationError(f"{where}.participants", "must be a non-empty list")
        for alias in participants:
            if alias not in seen_aliases:
                raise ValidationError(
                    f"{where}.participants", f"unknown vehicle alias {alias!r}"
                )
        if len(set(participants)) != len(participants):
            raise ValidationError(f"{where}.participants", "aliases must be unique")
        arrivals = entry.get("arrival_ms", {})
        delays = entry.get("compute_delay_ms", {})
        for table, key in ((arrivals, "arrival_ms"), (delays, "compute_delay_ms")):
            if not isinstance(table, dict) or set(table) != set(participants):
                raise ValidationError(
                    f"{where}.{key}", "must map every participant exactly once"
                )
            for alias, v in table.items():
                _nonneg(f"{where}.{key}", alias, v)
        for alias, v in delays.items():
            if v == 0:
                raise ValidationError(
                    f"{where}.compute_delay_ms.{alias}", "must be positive"
                )
        intersections.append(
            IntersectionSpec(
                id=str(entry["id"]),
                participants=tuple(participants),
                arrival_ms={a: int(v) for a, v in arrivals.items()},
                compute_delay_ms={a: int(v) for a, v in delays.items()},
                collection_window_ms=_nonneg(
                    where, "collection_window_ms", entry.get("collection_window_ms", 300)
                ),
            )
        )
    ids = [x.id for x in intersections]
    if len(set(ids)) != len(ids):
        raise ValidationError("intersections", "intersection ids must be unique")

    comms = []
    for i, entry in enumerate(raw.get("comms", [])):
        where = f"comms[{i}]"
        if not isinstance(entry, dict):
            raise ValidationError(where, "must be an object")
        sender = entry.get("sender")
        if sender not in seen_aliases:
            raise ValidationError(f"{where}.sender", f"unknown vehicle alias {sender!r}")
        comms.append(
            CommSpec(
                sender=sender,
                at_ms=_nonneg(where, "at_ms", entry.get("at_ms", 0)),
                payload=str(entry.get("payload", "")),
            )
        )

    run_raw = _section(raw, "run")
    run = RunConfig(t_end_ms=_nonneg("run", "t_end_ms", run_raw.get("t_end_ms", 2000)))

    direction = raw.get("reward_direction", "first_to_proposer")
    if direction not in ("first_to_proposer", "proposer_to_first"):
        raise ValidationError("reward_direction", f"unknown value {direction!r}")

    return ScenarioConfig(
        name=str(raw.get("name", name)),
        network=network,
        consensus=consensus,
        ledger=led,
        vehicles=tuple(vehicles),
        intersections=tuple(intersections),
        comms=tuple(comms),
        run=run,
        reward_direction=direction,
    )


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from exc
    return scenario_from_dict(raw, name=os.path.splitext(os.path.basename(path))[0])
