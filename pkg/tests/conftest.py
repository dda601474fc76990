"""Shared fixtures and the acceptance-criteria result banner."""

import pytest

from ivtp import consensus, identity, ledger

# Criterion number -> (label, passed). Filled by tests/test_acceptance.py,
# printed as a summary section so every run shows one line per criterion.
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


@pytest.fixture
def acceptance():
    def record(num: int, label: str, ok: bool) -> bool:
        ACCEPTANCE_RESULTS[num] = (label, bool(ok))
        print(f"criterion {num} ({label}): {'PASS' if ok else 'FAIL'}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        label, ok = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(
            f"criterion {num} ({label}): {'PASS' if ok else 'FAIL'}"
        )


def make_fleet(n: int, endowment: int = 100_000):
    """A chain with n vehicles registered at t=0 plus their keys.

    Registrations go through the normal quorum sweep (threshold is zero
    while nobody beacons), exactly like the simulator bootstrap.
    """
    dealer = identity.DealerAuthority.from_name("dealer")
    chain = ledger.Chain.create(dealer, endowment=endowment, genesis_tf=0)
    ids: list[bytes] = []
    keys: dict[bytes, identity.KeyPair] = {}
    pending = []
    for i in range(1, n + 1):
        kp = identity.keygen(identity.sha256(f"IV-{i}".encode()))
        issuance = dealer.issue(kp.public_key)
        tx = ledger.register_tx_from_issuance(issuance, dealer, tf=0)
        pending.append(consensus.PendingTx(tx=tx))
        ids.append(issuance.ivtp_id)
        keys[issuance.ivtp_id] = kp
    if pending:
        ctx = consensus.PodContext(active_set=set(), beacon_window_ms=500)
        result = consensus.try_commit(pending, ctx, chain, now=0)
        assert result.block is not None and not result.still_pending
    return dealer, chain, ids, keys


@pytest.fixture
def fleet4():
    return make_fleet(4)
