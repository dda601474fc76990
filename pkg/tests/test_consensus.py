"""Beacon freshness, endorsements, quorum math, block commits."""

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivtp import consensus, identity, ledger
from conftest import make_fleet


def _signed(tx, kp):
    return dataclasses.replace(
        tx, signature=identity.sign(kp, ledger.tx_signing_bytes(tx))
    )


def _beacon(chain, ids, keys, who, tf):
    tx = _signed(
        ledger.BeaconTx(author=who, tf=tf, signature=b""), keys[who]
    )
    chain.append_block([tx], timestamp=tf)


class TestActiveVehicles:
    def test_no_beacons_means_nobody_active(self):
        _, chain, _, _ = make_fleet(3)
        assert consensus.active_vehicles(chain, now=1000, window_ms=500) == set()

    def test_window_boundaries_are_closed(self):
        """A beacon exactly window_ms old still counts; one ms older does not."""
        _, chain, ids, keys = make_fleet(2)
        _beacon(chain, ids, keys, ids[0], tf=500)
        assert consensus.active_vehicles(chain, now=1000, window_ms=500) == {ids[0]}
        assert consensus.active_vehicles(chain, now=1001, window_ms=500) == set()

    def test_future_beacon_not_active_yet(self):
        _, chain, ids, keys = make_fleet(2)
        _beacon(chain, ids, keys, ids[0], tf=900)
        assert consensus.active_vehicles(chain, now=800, window_ms=500) == set()

    def test_pending_beacons_count(self):
        _, chain, ids, _ = make_fleet(2)
        active = consensus.active_vehicles(
            chain, now=1000, window_ms=500, pending_beacons={ids[1]: 700}
        )
        assert active == {ids[1]}

    def test_freshest_beacon_wins(self):
        """A stale committed beacon is rescued by a fresher pending one."""
        _, chain, ids, keys = make_fleet(2)
        _beacon(chain, ids, keys, ids[0], tf=100)
        assert consensus.active_vehicles(chain, now=1000, window_ms=500) == set()
        active = consensus.active_vehicles(
            chain, now=1000, window_ms=500, pending_beacons={ids[0]: 900}
        )
        assert active == {ids[0]}

    def test_unregistered_never_active(self):
        _, chain, _, _ = make_fleet(1)
        ghost = identity.sha256(b"ghost")
        active = consensus.active_vehicles(
            chain, now=1000, window_ms=500, pending_beacons={ghost: 1000}
        )
        assert active == set()

    def test_nonpositive_window_rejected(self):
        _, chain, _, _ = make_fleet(1)
        with pytest.raises(ValueError):
            consensus.active_vehicles(chain, now=0, window_ms=0)


class TestQuorum:
    def test_zero_active_means_zero_threshold(self):
        assert consensus.quorum_threshold(0) == 0

    def test_strict_majority_values(self):
        # n // 2 + 1: the least count strictly above half.
        assert consensus.quorum_threshold(1) == 1
        assert consensus.quorum_threshold(2) == 2
        assert consensus.quorum_threshold(3) == 2
        assert consensus.quorum_threshold(4) == 3
        assert consensus.quorum_threshold(5) == 3

    @given(st.integers(min_value=1, max_value=10_000))
    @settings(max_examples=200, deadline=None)
    def test_threshold_is_least_strict_majority(self, n):
        t = consensus.quorum_threshold(n)
        assert t * 2 > n
        assert (t - 1) * 2 <= n

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            consensus.quorum_threshold(-1)


class TestEndorsements:
    def test_roundtrip_verifies(self):
        kp = identity.keygen(identity.sha256(b"e"))
        e = consensus.make_endorsement(
            identity.sha256(b"tx"), b"\x01" * 32, consensus.VERDICT_VALID, kp
        )
        assert consensus.check_endorsement(e, kp.public_key)

    def test_verdict_is_signed(self):
        """Flipping the verdict must break the signature."""
        kp = identity.keygen(identity.sha256(b"e"))
        e = consensus.make_endorsement(
            identity.sha256(b"tx"), b"\x01" * 32, consensus.VERDICT_VALID, kp
        )
        flipped = dataclasses.replace(e, verdict=consensus.VERDICT_INVALID)
        assert not consensus.check_endorsement(flipped, kp.public_key)

    def test_author_cannot_self_endorse(self):
        author = b"\x07" * 32
        kp = identity.keygen(identity.sha256(b"a"))
        tx = ledger.BeaconTx(author=author, tf=1, signature=b"\x00" * 64)
        item = consensus.PendingTx(tx=tx)
        e = consensus.make_endorsement(tx.tx_id, author, consensus.VERDICT_VALID, kp)
        assert not item.add(e)
        assert item.count(consensus.VERDICT_VALID) == 0

    def test_first_verdict_per_endorser_wins(self):
        kp = identity.keygen(identity.sha256(b"a"))
        tx = ledger.BeaconTx(author=b"\x07" * 32, tf=1, signature=b"\x00" * 64)
        item = consensus.PendingTx(tx=tx)
        other = b"\x08" * 32
        assert item.add(
            consensus.make_endorsement(tx.tx_id, other, consensus.VERDICT_VALID, kp)
        )
        assert not item.add(
            consensus.make_endorsement(tx.tx_id, other, consensus.VERDICT_INVALID, kp)
        )
        assert item.count(consensus.VERDICT_VALID) == 1
        assert item.count(consensus.VERDICT_INVALID) == 0


class TestPodCheck:
    def _ctx(self, active):
        return consensus.PodContext(active_set=set(active), beacon_window_ms=500)

    def test_valid_comm(self):
        _, chain, ids, keys = make_fleet(3)
        tx = _signed(
            ledger.CommTx(
                author=ids[0],
                tf=1,
                signature=b"",
                sender=ids[0],
                receivers=(ids[1],),
                message_hash=identity.sha256(b"m"),
                tf_sent=1,
            ),
            keys[ids[0]],
        )
        assert consensus.pod_check(self._ctx(ids), tx, chain).valid

    def test_stale_beacon_means_not_driving(self):
        _, chain, ids, keys = make_fleet(3)
        tx = _signed(ledger.BeaconTx(author=ids[0], tf=1, signature=b""), keys[ids[0]])
        verdict = consensus.pod_check(self._ctx(ids[1:]), tx, chain)
        assert not verdict.valid
        assert verdict.cause == "not_driving"

    def test_unregistered_author(self):
        _, chain, ids, keys = make_fleet(1)
        ghost = identity.sha256(b"ghost")
        tx = _signed(
            ledger.BeaconTx(author=ghost, tf=1, signature=b""), keys[ids[0]]
        )
        verdict = consensus.pod_check(self._ctx([ghost]), tx, chain)
        assert verdict.cause == "not_registered"

    def test_forged_signature(self):
        _, chain, ids, keys = make_fleet(2)
        tx = ledger.BeaconTx(author=ids[0], tf=1, signature=b"\x00" * 64)
        verdict = consensus.pod_check(self._ctx(ids), tx, chain)
        assert verdict.cause == "bad_signature"

    def test_comm_sender_must_be_author(self):
        _, chain, ids, keys = make_fleet(3)
        tx = _signed(
            ledger.CommTx(
                author=ids[0],
                tf=1,
                signature=b"",
                sender=ids[1],
                receivers=(ids[2],),
                message_hash=identity.sha256(b"m"),
                tf_sent=1,
            ),
            keys[ids[0]],
        )
        verdict = consensus.pod_check(self._ctx(ids), tx, chain)
        assert verdict.cause == "sender_mismatch"

    def test_reward_needs_funded_payer(self):
        _, chain, ids, keys = make_fleet(2, endowment=100)
        tx = _signed(
            ledger.RewardTx(
                author=ids[0],
                tf=1,
                signature=b"",
                from_id=ids[0],
                to_id=ids[1],
                amount=101,
                reason="r",
            ),
            keys[ids[0]],
        )
        verdict = consensus.pod_check(self._ctx(ids), tx, chain)
        assert verdict.cause == "insufficient_balance"

    def test_arbitration_members_must_be_active(self):
        _, chain, ids, keys = make_fleet(3)
        ordering = (ids[0], ids[1], ids[2])
        msg = ledger.agree_message("x-1", ordering)
        agreements = tuple(
            (veh, identity.sign(keys[veh], msg)) for veh in ordering[1:]
        )
        tx = _signed(
            ledger.ArbitrationTx(
                author=ids[0],
                tf=1,
                signature=b"",
                intersection_id="x-1",
                ordering=ordering,
                proposer=ids[0],
                agreements=agreements,
            ),
            keys[ids[0]],
        )
        assert consensus.pod_check(self._ctx(ids), tx, chain).valid
        verdict = consensus.pod_check(self._ctx(ids[:2]), tx, chain)
        assert verdict.cause == "member_not_active"


class TestTryCommit:
    def _pending(self, chain, ids, keys, author, endorsers, verdict=None):
        tx = _signed(
            ledger.BeaconTx(author=author, tf=10, signature=b""), keys[author]
        )
        item = consensus.PendingTx(tx=tx)
        for veh in endorsers:
            item.add(
                consensus.make_endorsement(
                    tx.tx_id,
                    veh,
                    verdict or consensus.VERDICT_VALID,
                    keys[veh],
                )
            )
        return item

    def test_commits_at_threshold(self):
        _, chain, ids, keys = make_fleet(4)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        # 3 others active, threshold 2.
        item = self._pending(chain, ids, keys, ids[0], ids[1:3])
        result = consensus.try_commit([item], ctx, chain, now=20)
        assert result.block is not None
        assert [t.author for t in result.block.txs] == [ids[0]]
        assert not result.still_pending and not result.rejected

    def test_below_threshold_stays_pending(self):
        _, chain, ids, keys = make_fleet(4)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        item = self._pending(chain, ids, keys, ids[0], ids[1:2])
        result = consensus.try_commit([item], ctx, chain, now=20)
        assert result.block is None
        assert result.still_pending == [item]

    def test_invalid_quorum_rejects(self):
        _, chain, ids, keys = make_fleet(4)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        item = self._pending(
            chain, ids, keys, ids[0], ids[1:3], verdict=consensus.VERDICT_INVALID
        )
        result = consensus.try_commit([item], ctx, chain, now=20)
        assert result.block is None
        assert [cause for _, cause in result.rejected] == ["quorum_invalid"]

    def test_block_orders_by_tf_then_id(self):
        _, chain, ids, keys = make_fleet(4)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        items = []
        for author, tf in [(ids[0], 30), (ids[1], 10), (ids[2], 10)]:
            tx = _signed(
                ledger.BeaconTx(author=author, tf=tf, signature=b""), keys[author]
            )
            item = consensus.PendingTx(tx=tx)
            for veh in ids:
                if veh != author:
                    item.add(
                        consensus.make_endorsement(
                            tx.tx_id, veh, consensus.VERDICT_VALID, keys[veh]
                        )
                    )
            items.append(item)
        result = consensus.try_commit(items, ctx, chain, now=40)
        txs = result.block.txs
        assert [t.tf for t in txs] == [10, 10, 30]
        assert txs[0].tx_id < txs[1].tx_id

    def test_stale_balance_rejected_not_committed(self):
        """Two rewards each quorum-endorsed, but the payer can only fund
        one: the second is rejected at commit time, not force-applied."""
        _, chain, ids, keys = make_fleet(4, endowment=600)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        items = []
        for tf in (10, 11):
            tx = _signed(
                ledger.RewardTx(
                    author=ids[0],
                    tf=tf,
                    signature=b"",
                    from_id=ids[0],
                    to_id=ids[1],
                    amount=500,
                    reason=f"r{tf}",
                ),
                keys[ids[0]],
            )
            item = consensus.PendingTx(tx=tx)
            for veh in ids[1:]:
                item.add(
                    consensus.make_endorsement(
                        tx.tx_id, veh, consensus.VERDICT_VALID, keys[veh]
                    )
                )
            items.append(item)
        result = consensus.try_commit(items, ctx, chain, now=20)
        assert result.block is not None
        assert len(result.block.txs) == 1
        assert result.block.txs[0].tf == 10
        assert [cause for _, cause in result.rejected] == ["insufficient balance"]
        assert ledger.balance(chain, ids[0]) == 100
        assert ledger.total_supply(chain) == 4 * 600

    def test_lone_vehicle_commits_without_endorsements(self):
        """With nobody else active the threshold is zero."""
        _, chain, ids, keys = make_fleet(1)
        ctx = consensus.PodContext(active_set={ids[0]}, beacon_window_ms=500)
        tx = _signed(
            ledger.BeaconTx(author=ids[0], tf=10, signature=b""), keys[ids[0]]
        )
        result = consensus.try_commit(
            [consensus.PendingTx(tx=tx)], ctx, chain, now=20
        )
        assert result.block is not None

    def test_no_committable_returns_no_block(self):
        _, chain, ids, _ = make_fleet(2)
        ctx = consensus.PodContext(active_set=set(ids), beacon_window_ms=500)
        before = chain.height
        result = consensus.try_commit([], ctx, chain, now=20)
        assert result.block is None
        assert chain.height == before
