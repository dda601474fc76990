"""Vehicle identities: keypairs, dealer-issued trust-point IDs, signing.

Every vehicle owns a deterministic keypair derived from a 32-byte seed.
A dealer authority binds each public key to a unique 32-byte trust-point
ID (the IV-TP ID) and signs that binding. All signing in the system goes
through a pluggable scheme; the default is Ed25519, which is fully
deterministic, so a simulation run never depends on ambient randomness.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

# 32-byte identifiers and keys, 64-byte signatures throughout.
IvTpId = bytes

SEED_LEN = 32
PUBLIC_KEY_LEN = 32
SIGNATURE_LEN = 64


class SeedLengthError(ValueError):
    """Keypair seed is not exactly 32 bytes."""


class DuplicateKeyError(ValueError):
    """Public key was already issued an identity by this dealer."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    secret_key: bytes  # the 32-byte seed; public key is derivable from it
    public_key: bytes


class Ed25519Scheme:
    """Default signature scheme: deterministic, 32-byte keys, 64-byte sigs."""

    name = "ed25519"

    def keypair_from_seed(self, seed: bytes) -> KeyPair:
        if len(seed) != SEED_LEN:
            raise SeedLengthError(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
        sk = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(secret_key=seed, public_key=pk)

    def sign(self, secret_key: bytes, message: bytes) -> bytes:
        sk = ed25519.Ed25519PrivateKey.from_private_bytes(secret_key)
        return sk.sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        # Malformed inputs are a verification failure, never an exception.
        if len(public_key) != PUBLIC_KEY_LEN or len(signature) != SIGNATURE_LEN:
            return False
        try:
            pk = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
            pk.verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False


DEFAULT_SCHEME = Ed25519Scheme()


def keygen(seed: bytes, scheme: Ed25519Scheme = DEFAULT_SCHEME) -> KeyPair:
    """Derive a keypair from a 32-byte seed. Same seed, same keypair."""
    return scheme.keypair_from_seed(seed)


def sign(kp: KeyPair, message: bytes, scheme: Ed25519Scheme = DEFAULT_SCHEME) -> bytes:
    """Sign message bytes; deterministic, no per-call randomness."""
    return scheme.sign(kp.secret_key, message)


def verify(
    public_key: bytes,
    message: bytes,
    signature: bytes,
    scheme: Ed25519Scheme = DEFAULT_SCHEME,
) -> bool:
    """True iff signature was produced over exactly these bytes by the
    secret key matching public_key. Never raises on malformed input."""
    return scheme.verify(public_key, message, signature)


def ivtp_id_from(dealer_id: bytes, vehicle_pk: bytes, counter: int) -> IvTpId:
    """Trust-point ID: SHA-256(dealer_id || vehicle_pk || counter_be64)."""
    return sha256(dealer_id + vehicle_pk + counter.to_bytes(8, "big"))


@dataclass(frozen=True)
class Issuance:
    """A dealer's signed binding of a trust-point ID to a public key."""

    ivtp_id: IvTpId
    vehicle_pk: bytes
    dealer_id: bytes
    counter: int
    binding_sig: bytes  # dealer signature over ivtp_id || vehicle_pk


def binding_message(ivtp_id: bytes, vehicle_pk: bytes) -> bytes:
    return ivtp_id + vehicle_pk


@dataclass
class DealerAuthority:
    """Issues trust-point identities. The counter strictly increases, so
    two issuances can never collide even for identical public keys from
    different requests (duplicates are rejected anyway)."""

    dealer_id: bytes
    keypair: KeyPair
    issuance_counter: int = 0
    issued_keys: set[bytes] = field(default_factory=set)

    @classmethod
    def from_name(cls, name: str) -> "DealerAuthority":
        """Deterministic dealer: id = SHA-256(name), key seeded from it."""
        dealer_id = sha256(name.encode())
        kp = keygen(sha256(dealer_id + b"/key"))
        return cls(dealer_id=dealer_id, keypair=kp)

    def issue(self, vehicle_pk: bytes) -> Issuance:
        if len(vehicle_pk) != PUBLIC_KEY_LEN:
            raise ValueError(f"public key must be {PUBLIC_KEY_LEN} bytes")
        if vehicle_pk in self.issued_keys:
            raise DuplicateKeyError(
                f"public key {vehicle_pk.hex()[:16]} already has an identity"
            )
        ivtp_id = ivtp_id_from(self.dealer_id, vehicle_pk, self.issuance_counter)
        sig = sign(self.keypair, binding_message(ivtp_id, vehicle_pk))
        issuance = Issuance(
            ivtp_id=ivtp_id,
            vehicle_pk=vehicle_pk,
            dealer_id=self.dealer_id,
            counter=self.issuance_counter,
            binding_sig=sig,
        )
        self.issued_keys.add(vehicle_pk)
        self.issuance_counter += 1
        return issuance


def issue_ivtp(dealer: DealerAuthority, vehicle_pk: bytes, tf: int = 0):
    """Issue an identity and build its dealer-signed registration
    transaction. Returns (IvTpId, RegisterTx)."""
    from .ledger import register_tx_from_issuance

    issuance = dealer.issue(vehicle_pk)
    tx = register_tx_from_issuance(issuance, dealer, tf)
    return issuance.ivtp_id, tx


def short_id(ivtp_id: bytes) -> str:
    """Abbreviated hex form for logs and traces."""
    return ivtp_id.hex()[:12]
