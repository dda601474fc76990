"""The trust-point blockchain: transactions, Merkle roots, SHA-256
chained blocks, replayable ledger state, and the communication index.

Transactions are canonically encoded to bytes (injective, self
delimiting), identified by the SHA-256 of that encoding, and grouped
into blocks whose Merkle root commits to the transaction list. The
full ledger state (balances, registrations, who-talked-to-whom) is a
pure function of the chain and is rebuilt by replay during validation,
so any single-byte tamper anywhere is detected.

Units: trust points are integers in milli-trust (1 IV-TP = 1000).
Registration grants each vehicle a configurable endowment; rewards are
transfers, so total supply only changes at registration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import identity
from .identity import IvTpId, sha256

TimeFlag = int  # simulation milliseconds

HASH_LEN = 32
GENESIS_PREV_HASH = b"\x00" * 32
CHAIN_MAGIC = b"IVTP"
CHAIN_VERSION = 0x01

DEFAULT_ENDOWMENT = 100_000  # milli-trust granted at registration

# Transaction variant tags (canonical encoding byte 0).
TAG_REGISTER = 1
TAG_BEACON = 2
TAG_COMM = 3
TAG_REWARD = 4
TAG_ARBITRATION = 5

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


class FieldOverflowError(ValueError):
    """A length or integer does not fit its fixed-width encoding."""


class EmptyLeafListError(ValueError):
    """Merkle root of zero leaves is undefined."""


class InvalidTxError(ValueError):
    def __init__(self, tx_id: bytes, cause: str):
        super().__init__(f"invalid tx {tx_id.hex()[:12]}: {cause}")
        self.tx_id = tx_id
        self.cause = cause


class NonMonotonicTimestampError(ValueError):
    """Block timestamp went backwards."""


class InsufficientBalanceError(ValueError):
    """Reward sender does not hold the transferred amount."""


class UnknownVehicleError(KeyError):
    """Queried identity is not registered on this chain."""


class CorruptChainFileError(ValueError):
    """Chain file does not parse as a valid encoding."""


# ---------------------------------------------------------------------------
# Transactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    """Common envelope: author identity, time flag, author signature.

    The signature covers the canonical encoding minus the trailing
    signature bytes. For registrations the signer is the dealer, for
    everything else the author itself.
    """

    author: IvTpId
    tf: TimeFlag
    signature: bytes

    TAG = 0  # overridden per variant

    @property
    def tx_id(self) -> bytes:
        return sha256(canonical_encode(self))


@dataclass(frozen=True)
class RegisterTx(Transaction):
    """Binds a trust-point ID to a vehicle public key, signed by the
    issuing dealer. Carries dealer_id and counter so the ID derivation
    can be re-checked during replay."""

    ivtp_id: IvTpId = b""
    vehicle_pk: bytes = b""
    dealer_id: bytes = b""
    counter: int = 0
    dealer_sig: bytes = b""  # over ivtp_id || vehicle_pk

    TAG = TAG_REGISTER


@dataclass(frozen=True)
class BeaconTx(Transaction):
    """Periodic liveness evidence: the author was on this network at tf."""

    network_id: str = ""
    position_zone: str = ""

    TAG = TAG_BEACON


@dataclass(frozen=True)
class CommTx(Transaction):
    """A broadcast message record: sender, intended receivers, and the
    hash of the payload (content stays off-chain)."""

    sender: IvTpId = b""
    receivers: tuple[IvTpId, ...] = ()
    message_hash: bytes = b""
    tf_sent: TimeFlag = 0

    TAG = TAG_COMM


@dataclass(frozen=True)
class RewardTx(Transaction):
    """Transfer of trust points. Author must equal the paying side."""

    from_id: IvTpId = b""
    to_id: IvTpId = b""
    amount: int = 0  # milli-trust, > 0
    reason: str = ""

    TAG = TAG_REWARD


@dataclass(frozen=True)
class ArbitrationTx(Transaction):
    """A committed intersection crossing order plus every participant's
    signed agreement (proposer excluded, it authored the tx)."""

    intersection_id: str = ""
    ordering: tuple[IvTpId, ...] = ()
    proposer: IvTpId = b""
    agreements: tuple[tuple[IvTpId, bytes], ...] = ()

    TAG = TAG_ARBITRATION


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------

def _u32(n: int) -> bytes:
    if not 0 <= n <= _U32_MAX:
        raise FieldOverflowError(f"u32 out of range: {n}")
    return struct.pack(">I", n)


def _u64(n: int) -> bytes:
    if not 0 <= n <= _U64_MAX:
        raise FieldOverflowError(f"u64 out of range: {n}")
    return struct.pack(">Q", n)


def _blob(b: bytes) -> bytes:
    if len(b) > _U32_MAX:
        raise FieldOverflowError("byte field exceeds u32 length prefix")
    return _u32(len(b)) + b


def _fixed(b: bytes, n: int, name: str) -> bytes:
    if len(b) != n:
        raise FieldOverflowError(f"{name} must be {n} bytes, got {len(b)}")
    return b


def _id_list(ids) -> bytes:
    out = [_u32(len(ids))]
    for i in ids:
        out.append(_fixed(i, HASH_LEN, "ivtp id"))
    return b"".join(out)


def tx_signing_bytes(tx: Transaction) -> bytes:
    """Canonical encoding minus the trailing signature field."""
    parts = [bytes([tx.TAG]), _fixed(tx.author, HASH_LEN, "author"), _u64(tx.tf)]
    if isinstance(tx, RegisterTx):
        parts += [
            _fixed(tx.ivtp_id, HASH_LEN, "ivtp_id"),
            _fixed(tx.vehicle_pk, identity.PUBLIC_KEY_LEN, "vehicle_pk"),
            _fixed(tx.dealer_id, HASH_LEN, "dealer_id"),
            _u64(tx.counter),
            _fixed(tx.dealer_sig, identity.SIGNATURE_LEN, "dealer_sig"),
        ]
    elif isinstance(tx, BeaconTx):
        parts += [_blob(tx.network_id.encode()), _blob(tx.position_zone.encode())]
    elif isinstance(tx, CommTx):
        parts += [
            _fixed(tx.sender, HASH_LEN, "sender"),
            _id_list(tx.receivers),
            _fixed(tx.message_hash, HASH_LEN, "message_hash"),
            _u64(tx.tf_sent),
        ]
    elif isinstance(tx, RewardTx):
        parts += [
            _fixed(tx.from_id, HASH_LEN, "from_id"),
            _fixed(tx.to_id, HASH_LEN, "to_id"),
            _u64(tx.amount),
            _blob(tx.reason.encode()),
        ]
    elif isinstance(tx, ArbitrationTx):
        parts.append(_blob(tx.intersection_id.encode()))
        parts.append(_id_list(tx.ordering))
        parts.append(_fixed(tx.proposer, HASH_LEN, "proposer"))
        parts.append(_u32(len(tx.agreements)))
        for voter, sig in tx.agreements:
            parts.append(_fixed(voter, HASH_LEN, "agreement voter"))
            parts.append(_fixed(sig, identity.SIGNATURE_LEN, "agreement sig"))
    else:
        raise TypeError(f"unknown transaction type {type(tx).__name__}")
    return b"".join(parts)


def canonical_encode(tx: Transaction) -> bytes:
    """Full injective encoding, signature included. tx_id hashes this."""
    return tx_signing_bytes(tx) + _fixed(tx.signature, identity.SIGNATURE_LEN, "signature")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptChainFileError("truncated encoding")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.data)


def canonical_decode(data: bytes) -> Transaction:
    """Inverse of canonical_encode. Rejects trailing garbage."""
    r = _Reader(data)
    tx = _decode_tx(r)
    if not r.done():
        raise CorruptChainFileError("trailing bytes after transaction")
    return tx


def _decode_tx(r: _Reader) -> Transaction:
    tag = r.take(1)[0]
    author = r.take(HASH_LEN)
    tf = r.u64()
    if tag == TAG_REGISTER:
        ivtp_id = r.take(HASH_LEN)
        vehicle_pk = r.take(identity.PUBLIC_KEY_LEN)
        dealer_id = r.take(HASH_LEN)
        counter = r.u64()
        dealer_sig = r.take(identity.SIGNATURE_LEN)
        sig = r.take(identity.SIGNATURE_LEN)
        return RegisterTx(author, tf, sig, ivtp_id, vehicle_pk, dealer_id, counter, dealer_sig)
    if tag == TAG_BEACON:
        network_id = r.blob().decode()
        zone = r.blob().decode()
        sig = r.take(identity.SIGNATURE_LEN)
        return BeaconTx(author, tf, sig, network_id, zone)
    if tag == TAG_COMM:
        sender = r.take(HASH_LEN)
        receivers = tuple(r.take(HASH_LEN) for _ in range(r.u32()))
        message_hash = r.take(HASH_LEN)
        tf_sent = r.u64()
        sig = r.take(identity.SIGNATURE_LEN)
        return CommTx(author, tf, sig, sender, receivers, message_hash, tf_sent)
    if tag == TAG_REWARD:
        from_id = r.take(HASH_LEN)
        to_id = r.take(HASH_LEN)
        amount = r.u64()
        reason = r.blob().decode()
        sig = r.take(identity.SIGNATURE_LEN)
        return RewardTx(author, tf, sig, from_id, to_id, amount, reason)
    if tag == TAG_ARBITRATION:
        intersection_id = r.blob().decode()
        ordering = tuple(r.take(HASH_LEN) for _ in range(r.u32()))
        proposer = r.take(HASH_LEN)
        agreements = tuple(
            (r.take(HASH_LEN), r.take(identity.SIGNATURE_LEN)) for _ in range(r.u32())
        )
        sig = r.take(identity.SIGNATURE_LEN)
        return ArbitrationTx(author, tf, sig, intersection_id, ordering, proposer, agreements)
    raise CorruptChainFileError(f"unknown transaction tag {tag}")


def agree_message(intersection_id: str, ordering) -> bytes:
    """Preimage each participant signs to endorse a crossing order."""
    return b"ivtp/agree" + _blob(intersection_id.encode()) + _id_list(ordering)


def register_tx_from_issuance(
    issuance: identity.Issuance, dealer: identity.DealerAuthority, tf: TimeFlag
) -> RegisterTx:
    """Build the dealer-signed registration for a fresh issuance."""
    unsigned = RegisterTx(
        author=issuance.ivtp_id,
        tf=tf,
        signature=b"\x00" * identity.SIGNATURE_LEN,
        ivtp_id=issuance.ivtp_id,
        vehicle_pk=issuance.vehicle_pk,
        dealer_id=issuance.dealer_id,
        counter=issuance.counter,
        dealer_sig=issuance.binding_sig,
    )
    sig = identity.sign(dealer.keypair, tx_signing_bytes(unsigned))
    return RegisterTx(
        author=unsigned.author,
        tf=tf,
        signature=sig,
        ivtp_id=unsigned.ivtp_id,
        vehicle_pk=unsigned.vehicle_pk,
        dealer_id=unsigned.dealer_id,
        counter=unsigned.counter,
        dealer_sig=unsigned.dealer_sig,
    )


# ---------------------------------------------------------------------------
# Merkle root
# ---------------------------------------------------------------------------

def merkle_root(tx_ids: list[bytes]) -> bytes:
    """Binary Merkle tree over 32-byte leaves; an odd node at any level
    is paired with itself. A single leaf therefore hashes with itself."""
    if not tx_ids:
        raise EmptyLeafListError("merkle root needs at least one leaf")
    level = list(tx_ids)
    while True:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]


# ---------------------------------------------------------------------------
# Blocks and chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: TimeFlag
    txs: tuple[Transaction, ...]

    def header_bytes(self) -> bytes:
        return (
            _u64(self.height)
            + _fixed(self.prev_hash, HASH_LEN, "prev_hash")
            + _fixed(self.merkle_root, HASH_LEN, "merkle_root")
            + _u64(self.timestamp)
        )

    @property
    def block_hash(self) -> bytes:
        return sha256(self.header_bytes())


def encode_block(block: Block) -> bytes:
    parts = [block.header_bytes(), _u32(len(block.txs))]
    for tx in block.txs:
        parts.append(_blob(canonical_encode(tx)))
    return b"".join(parts)


def decode_block(r: _Reader) -> Block:
    height = r.u64()
    prev_hash = r.take(HASH_LEN)
    root = r.take(HASH_LEN)
    timestamp = r.u64()
    txs = tuple(canonical_decode(r.blob()) for _ in range(r.u32()))
    return Block(height, prev_hash, root, timestamp, txs)


@dataclass
class ValidationReport:
    ok: bool
    height: int | None = None
    tx_id: bytes | None = None
    cause: str | None = None

    def describe(self) -> str:
        if self.ok:
            return "chain valid"
        where = f"block {self.height}"
        if self.tx_id is not None:
            where += f", tx {self.tx_id.hex()[:12]}"
        return f"chain INVALID at {where}: {self.cause}"


@dataclass
class LedgerState:
    """Replayed view of the chain. balances and comm_index preserve
    insertion order, which is first-contact / registration order."""

    endowment: int
    balances: dict[IvTpId, int] = field(default_factory=dict)
    registrations: dict[IvTpId, bytes] = field(default_factory=dict)
    registered_pks: set[bytes] = field(default_factory=set)
    comm_index: dict[IvTpId, dict[IvTpId, None]] = field(default_factory=dict)
    history: dict[IvTpId, list[bytes]] = field(default_factory=dict)
    last_beacon: dict[IvTpId, TimeFlag] = field(default_factory=dict)
    dealer_id: IvTpId | None = None
    dealer_pk: bytes | None = None

    def _touch_history(self, ids, tx_id: bytes) -> None:
        seen = set()
        for i in ids:
            if i in seen or i not in self.registrations:
                continue
            seen.add(i)
            self.history.setdefault(i, []).append(tx_id)

    def _link(self, a: IvTpId, b: IvTpId) -> None:
        self.comm_index.setdefault(a, {})[b] = None

    def check_tx(self, tx: Transaction, height: int) -> str | None:
        """Return a failure cause, or None if tx can apply to this state.
        Signature checks live here too so replay is self-contained."""
        if isinstance(tx, RegisterTx):
            if height > 0:
                if self.dealer_id is None:
                    return "no dealer registered"
                if tx.dealer_id != self.dealer_id:
                    return "unknown dealer"
                if tx.ivtp_id != identity.ivtp_id_from(tx.dealer_id, tx.vehicle_pk, tx.counter):
                    return "ivtp id does not match derivation"
                signer_pk = self.dealer_pk
            else:
                # Genesis self-registration is the trust root.
                signer_pk = tx.vehicle_pk
            if tx.author != tx.ivtp_id:
                return "register author must be the registered id"
            if tx.ivtp_id in self.registrations:
                return "duplicate ivtp id"
            if tx.vehicle_pk in self.registered_pks:
                return "duplicate public key"
            if not identity.verify(
                signer_pk, identity.binding_message(tx.ivtp_id, tx.vehicle_pk), tx.dealer_sig
            ):
                return "bad dealer binding signature"
            if not identity.verify(signer_pk, tx_signing_bytes(tx), tx.signature):
                return "bad envelope signature"
            return None

        pk = self.registrations.get(tx.author)
        if pk is None:
            return "author not registered"
        if not identity.verify(pk, tx_signing_bytes(tx), tx.signature):
            return "bad signature"

        if isinstance(tx, CommTx):
            if tx.sender != tx.author:
                return "comm sender must be the author"
            for rcv in tx.receivers:
                if rcv not in self.registrations:
                    return "receiver not registered"
        elif isinstance(tx, RewardTx):
            if tx.author != tx.from_id:
                return "reward author must be the payer"
            if tx.amount <= 0:
                return "reward amount must be positive"
            if tx.to_id not in self.registrations:
                return "reward recipient not registered"
            if self.balances.get(tx.from_id, 0) < tx.amount:
                return "insufficient balance"
        elif isinstance(tx, ArbitrationTx):
            if len(set(tx.ordering)) != len(tx.ordering):
                return "duplicate ids in ordering"
            if tx.author != tx.proposer:
                return "arbitration author must be the proposer"
            if tx.proposer not in tx.ordering:
                return "proposer not part of the ordering"
            for member in tx.ordering:
                if member not in self.registrations:
                    return "ordering member not registered"
            voters = [v for v, _ in tx.agreements]
            if set(voters) != set(tx.ordering) - {tx.proposer} or len(voters) != len(
                set(voters)
            ):
                return "agreements must cover every participant except the proposer"
            statement = agree_message(tx.intersection_id, tx.ordering)
            for voter, sig in tx.agreements:
                if not identity.verify(self.registrations[voter], statement, sig):
                    return "bad agreement signature"
        return None

    def apply_tx(self, tx: Transaction, height: int) -> None:
        tx_id = tx.tx_id
        if isinstance(tx, RegisterTx):
            self.registrations[tx.ivtp_id] = tx.vehicle_pk
            self.registered_pks.add(tx.vehicle_pk)
            if height == 0:
                self.dealer_id = tx.ivtp_id
                self.dealer_pk = tx.vehicle_pk
                self.balances[tx.ivtp_id] = 0  # authority holds no endowment
            else:
                self.balances[tx.ivtp_id] = self.endowment
            self.history.setdefault(tx.ivtp_id, []).append(tx_id)
            return
        if isinstance(tx, BeaconTx):
            prev = self.last_beacon.get(tx.author)
            if prev is None or tx.tf > prev:
                self.last_beacon[tx.author] = tx.tf
            self._touch_history([tx.author], tx_id)
            return
        if isinstance(tx, CommTx):
            for rcv in tx.receivers:
                self._link(tx.sender, rcv)
                self._link(rcv, tx.sender)
            self._touch_history([tx.author, tx.sender, *tx.receivers], tx_id)
            return
        if isinstance(tx, RewardTx):
            self.balances[tx.from_id] -= tx.amount
            self.balances[tx.to_id] = self.balances.get(tx.to_id, 0) + tx.amount
            self._touch_history([tx.author, tx.from_id, tx.to_id], tx_id)
            return
        if isinstance(tx, ArbitrationTx):
            voters = [v for v, _ in tx.agreements]
            self._touch_history([tx.author, tx.proposer, *tx.ordering, *voters], tx_id)
            return
        raise TypeError(f"unknown transaction type {type(tx).__name__}")


class Chain:
    """Append-only block list plus its replayed state. Single owner;
    readers take snapshots via validate/replay, never mutate."""

    def __init__(self, genesis: Block, endowment: int = DEFAULT_ENDOWMENT):
        self.blocks: list[Block] = []
        self.state = LedgerState(endowment=endowment)
        self.tx_by_id: dict[bytes, Transaction] = {}
        self._apply_block(genesis)

    @classmethod
    def create(
        cls,
        dealer: identity.DealerAuthority,
        endowment: int = DEFAULT_ENDOWMENT,
        genesis_tf: TimeFlag = 0,
    ) -> "Chain":
        """New chain whose genesis block self-registers the dealer."""
        binding = identity.sign(
            dealer.keypair,
            identity.binding_message(dealer.dealer_id, dealer.keypair.public_key),
        )
        unsigned = RegisterTx(
            author=dealer.dealer_id,
            tf=genesis_tf,
            signature=b"\x00" * identity.SIGNATURE_LEN,
            ivtp_id=dealer.dealer_id,
            vehicle_pk=dealer.keypair.public_key,
            dealer_id=dealer.dealer_id,
            counter=0,
            dealer_sig=binding,
        )
        sig = identity.sign(dealer.keypair, tx_signing_bytes(unsigned))
        tx = RegisterTx(
            author=unsigned.author,
            tf=genesis_tf,
            signature=sig,
            ivtp_id=unsigned.ivtp_id,
            vehicle_pk=unsigned.vehicle_pk,
            dealer_id=unsigned.dealer_id,
            counter=unsigned.counter,
            dealer_sig=unsigned.dealer_sig,
        )
        genesis = Block(
            height=0,
            prev_hash=GENESIS_PREV_HASH,
            merkle_root=merkle_root([tx.tx_id]),
            timestamp=genesis_tf,
            txs=(tx,),
        )
        return cls(genesis, endowment=endowment)

    @classmethod
    def from_blocks(cls, blocks: list[Block], endowment: int) -> "Chain":
        chain = cls(blocks[0], endowment=endowment)
        for block in blocks[1:]:
            chain._apply_block(block)
        return chain

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def _apply_block(self, block: Block) -> None:
        for tx in block.txs:
            cause = self.state.check_tx(tx, block.height)
            if cause is not None:
                raise InvalidTxError(tx.tx_id, cause)
            self.state.apply_tx(tx, block.height)
            self.tx_by_id[tx.tx_id] = tx
        self.blocks.append(block)

    def append_block(self, txs: list[Transaction], timestamp: TimeFlag) -> Block:
        """Validate txs against current state and append one new block."""
        if not txs:
            raise ValueError("a block needs at least one transaction")
        if timestamp < self.tip.timestamp:
            raise NonMonotonicTimestampError(
                f"timestamp {timestamp} precedes tip {self.tip.timestamp}"
            )
        # Pre-check Reward guard explicitly so callers get the named error.
        for tx in txs:
            if isinstance(tx, RewardTx) and self.state.balances.get(tx.from_id, 0) < tx.amount:
                raise InsufficientBalanceError(
                    f"{tx.from_id.hex()[:12]} holds less than {tx.amount}"
                )
        block = Block(
            height=self.height + 1,
            prev_hash=self.tip.block_hash,
            merkle_root=merkle_root([tx.tx_id for tx in txs]),
            timestamp=timestamp,
            txs=tuple(txs),
        )
        self._apply_block(block)
        return block

    def is_registered(self, ivtp_id: IvTpId) -> bool:
        return ivtp_id in self.state.registrations

    def public_key_of(self, ivtp_id: IvTpId) -> bytes | None:
        return self.state.registrations.get(ivtp_id)


def validate_chain(chain: Chain) -> ValidationReport:
    """Recompute every hash, Merkle root, link and signature, replaying
    all transactions from genesis. Reports the first failure."""
    return validate_blocks(chain.blocks, chain.state.endowment)


def validate_blocks(blocks: list[Block], endowment: int) -> ValidationReport:
    if not blocks:
        return ValidationReport(ok=False, height=None, cause="empty chain")
    state = LedgerState(endowment=endowment)
    prev: Block | None = None
    for block in blocks:
        h = block.height
        if prev is None:
            if h != 0 or block.prev_hash != GENESIS_PREV_HASH:
                return ValidationReport(False, h, None, "bad genesis header")
        else:
            if h != prev.height + 1:
                return ValidationReport(False, h, None, "non-contiguous height")
            if block.prev_hash != prev.block_hash:
                return ValidationReport(False, h, None, "prev_hash mismatch")
            if block.timestamp < prev.timestamp:
                return ValidationReport(False, h, None, "timestamp not monotone")
        if not block.txs:
            return ValidationReport(False, h, None, "empty block")
        if block.merkle_root != merkle_root([tx.tx_id for tx in block.txs]):
            return ValidationReport(False, h, None, "merkle root mismatch")
        for tx in block.txs:
            cause = state.check_tx(tx, h)
            if cause is not None:
                return ValidationReport(False, h, tx.tx_id, cause)
            state.apply_tx(tx, h)
            if any(v < 0 for v in state.balances.values()):
                return ValidationReport(False, h, tx.tx_id, "negative balance")
        prev = block
    return ValidationReport(ok=True)


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def comm_table(chain: Chain) -> dict[IvTpId, list[IvTpId]]:
    """Who communicated with whom, peers ordered by first contact."""
    return {veh: list(peers) for veh, peers in chain.state.comm_index.items()}


def balance(chain: Chain, ivtp_id: IvTpId) -> int:
    if ivtp_id not in chain.state.registrations:
        raise UnknownVehicleError(ivtp_id.hex())
    return chain.state.balances.get(ivtp_id, 0)


def history(chain: Chain, ivtp_id: IvTpId) -> list[Transaction]:
    """Every committed tx the identity took part in, in commit order."""
    if ivtp_id not in chain.state.registrations:
        raise UnknownVehicleError(ivtp_id.hex())
    return [chain.tx_by_id[txid] for txid in chain.state.history.get(ivtp_id, [])]


def total_supply(chain: Chain) -> int:
    return sum(chain.state.balances.values())


# ---------------------------------------------------------------------------
# Chain file
# ---------------------------------------------------------------------------

def chain_to_bytes(chain: Chain) -> bytes:
    parts = [CHAIN_MAGIC, bytes([CHAIN_VERSION]), _u64(chain.state.endowment)]
    for block in chain.blocks:
        parts.append(_blob(encode_block(block)))
    body = b"".join(parts)
    # Trailing whole-file digest: catches flips in the header fields
    # (magic aside, those are not covered by any block hash).
    return body + sha256(body)


def chain_from_bytes(data: bytes) -> Chain:
    blocks, endowment, checksum_ok = parse_chain_bytes(data)
    if not checksum_ok:
        raise CorruptChainFileError("checksum mismatch")
    if not blocks:
        raise CorruptChainFileError("no blocks")
    report = validate_blocks(blocks, endowment)
    if not report.ok:
        raise CorruptChainFileError(report.describe())
    return Chain.from_blocks(blocks, endowment)


def parse_chain_bytes(data: bytes) -> tuple[list[Block], int, bool]:
    """Structural parse only: blocks, endowment, and whether the trailing
    digest matches. Replay validation is validate_blocks' job."""
    if len(data) < HASH_LEN + 13:
        raise CorruptChainFileError("truncated file")
    body, digest = data[:-HASH_LEN], data[-HASH_LEN:]
    checksum_ok = sha256(body) == digest
    r = _Reader(body)
    if r.take(4) != CHAIN_MAGIC:
        raise CorruptChainFileError("bad magic")
    if r.take(1)[0] != CHAIN_VERSION:
        raise CorruptChainFileError("unsupported version")
    endowment = r.u64()
    blocks = []
    while not r.done():
        blocks.append(decode_block(_Reader(r.blob())))
    return blocks, endowment, checksum_ok


def save_chain(chain: Chain, path) -> None:
    with open(path, "wb") as f:
        f.write(chain_to_bytes(chain))


def load_chain(path) -> Chain:
    with open(path, "rb") as f:
        return chain_from_bytes(f.read())


def load_blocks(path) -> tuple[list[Block], int, bool]:
    """Parse a chain file without validating; for the inspector, which
    must report tampering rather than refuse to read."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_chain_bytes(data)
