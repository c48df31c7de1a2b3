import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jtransnet.auction import AuctionConfig, BidProfile, bundle_bids, enumerate_bundles
from jtransnet.baselines import (
    VcgMechanism, exhaustive_assignment, slots_to_matrix, solver_assignment, sorted_assignment, vcg,
    vcg_allocate, vcg_payments,
)
from jtransnet.trainer import best_misreports, default_grid


def _welfare(slots, e, alpha):
    return sum(alpha[k] * e[c] for k, c in enumerate(slots) if c >= 0)


class TestAllocation:
    def test_single_slot_argmax(self):
        assert exhaustive_assignment(np.array([0.8, 0.5]), np.array([0.6])) == (0,)

    def test_rearrangement(self):
        e = np.array([0.1, 0.9, 0.4, 0.7])
        assert exhaustive_assignment(e, np.array([0.6, 0.2])) == (1, 3)

    def test_ties_prefer_lower_index(self):
        e = np.array([0.5, 0.5, 0.5])
        for route in (exhaustive_assignment, solver_assignment, sorted_assignment):
            assert route(e, np.array([0.6, 0.2])) == (0, 1)

    def test_empty_slots_when_too_few_bundles(self):
        avail = np.array([False, True, False])
        assert solver_assignment(np.array([0.3, 0.2, 0.9]), np.array([0.6, 0.2]), avail) == (1, -1)
        assert exhaustive_assignment(np.array([0.3, 0.2, 0.9]), np.array([0.6, 0.2]), avail) == (1, -1)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda C: st.tuples(
        st.just(C), st.integers(1, min(3, C - 1)),
        st.lists(st.floats(0, 2, allow_nan=False), min_size=C, max_size=C))))
    def test_routes_agree_with_enumeration(self, case):
        C, K, e = case
        e = np.array(e)
        alpha = np.sort(np.random.default_rng(C * 7 + K).uniform(0.05, 0.9, K))[::-1]
        best = max(_welfare(p, e, alpha) for p in itertools.permutations(range(C), K))
        ex = exhaustive_assignment(e, alpha)
        assert _welfare(ex, e, alpha) == pytest.approx(best, abs=1e-12)
        assert solver_assignment(e, alpha) == ex
        assert sorted_assignment(e, alpha) == ex

    def test_matrix_form(self):
        np.testing.assert_array_equal(slots_to_matrix((2, 0), 3), [[0, 1], [0, 0], [1, 0]])


class TestPayments:
    def test_worked_example(self):
        config = AuctionConfig(2, 2, (0.6,), np.array([[1, 0], [0, 1]]))
        bids = BidProfile(np.array([0.3, 0.2]), np.array([0.5, 0.3]))
        pb, ps = vcg_payments(config, bids)
        np.testing.assert_allclose(pb, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(ps, [0.12, 0.0], atol=1e-12)

    def test_no_competition_no_externality(self):
        """A brand whose removal leaves the other bidders just as well off pays 0."""
        config = AuctionConfig(2, 1, (0.6,), np.array([[1], [1]]))
        out = vcg(config, BidProfile(np.array([0.4, 0.0]), np.array([0.0])))
        np.testing.assert_allclose(out.pay_brand, 0.0, atol=1e-15)

    def test_pivot_can_subsidize_when_removal_strands_partners(self):
        """Removing the only store also removes every brand's bundle; the
        pivot then pays the store the welfare its partners lose."""
        config = AuctionConfig(2, 1, (0.6,), np.array([[1], [1]]))
        out = vcg(config, BidProfile(np.array([0.4, 0.0]), np.array([0.0])))
        assert out.pay_store[0] == pytest.approx(-0.24)
        assert 0.0 * 0.6 - out.pay_store[0] >= 0  # still individually rational

    def test_full_relation_payments_nonnegative(self):
        for m, n, ctrs in [(4, 2, [0.6]), (3, 3, [0.6, 0.2]), (4, 4, [0.6, 0.2, 0.06])]:
            config = AuctionConfig.full(m, n, ctrs)
            rng = np.random.default_rng(m * n)
            out = VcgMechanism(config).run(rng.uniform(size=(1000, m)), rng.uniform(size=(1000, n)))
            assert out.pay_brand.min() >= -1e-12 and out.pay_store.min() >= -1e-12

    def test_batched_matches_reference(self):
        config = AuctionConfig(3, 3, (0.6, 0.2), np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]]))
        rng = np.random.default_rng(0)
        b, s = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 3))
        out = VcgMechanism(config).run(b, s)
        for y in range(200):
            ref = vcg(config, BidProfile(b[y], s[y]), method="exhaustive")
            np.testing.assert_array_equal(out.alloc[y], ref.alloc)
            np.testing.assert_allclose(out.pay_brand[y], ref.pay_brand, atol=1e-12)
            np.testing.assert_allclose(out.pay_store[y], ref.pay_store, atol=1e-12)

    def test_individually_rational_and_nonnegative(self):
        config = AuctionConfig.full(4, 4, [0.6, 0.2, 0.06])
        rng = np.random.default_rng(1)
        b, s = rng.uniform(size=(2000, 4)), rng.uniform(size=(2000, 4))
        out = VcgMechanism(config).run(b, s)
        assert out.pay_brand.min() >= -1e-12 and out.pay_store.min() >= -1e-12
        assert (b * out.ctr_brand - out.pay_brand).min() >= -1e-12
        assert (s * out.ctr_store - out.pay_store).min() >= -1e-12

    def test_allocation_is_welfare_optimal(self):
        config = AuctionConfig.full(3, 2, [0.6, 0.2])
        idx = enumerate_bundles(config)
        rng = np.random.default_rng(2)
        for _ in range(100):
            bids = BidProfile(rng.uniform(size=3), rng.uniform(size=2))
            e = bundle_bids(bids.brand, bids.store, idx)
            got = vcg_allocate(config, bids)
            value = float((got * e[:, None] * config.alpha).sum())
            best = max(_welfare(p, e, config.alpha) for p in itertools.permutations(range(6), 2))
            assert value == pytest.approx(best, abs=1e-12)

    def test_losing_bid_changes_do_not_move_other_payments(self):
        config = AuctionConfig.full(3, 1, [0.6])
        mech = VcgMechanism(config)
        b, s = np.array([[0.9, 0.5, 0.1]]), np.array([[0.2]])
        base = mech.run(b, s)
        moved = mech.run(np.array([[0.9, 0.5, 0.05]]), s)
        np.testing.assert_allclose(base.pay_brand[0, :2], moved.pay_brand[0, :2])
        np.testing.assert_allclose(base.pay_store, moved.pay_store)

    def test_no_profitable_misreport(self):
        config = AuctionConfig(4, 4, (0.6, 0.2), np.eye(4, dtype=int) + np.eye(4, k=1, dtype=int))
        rng = np.random.default_rng(3)
        b, s = rng.uniform(size=(500, 4)), rng.uniform(size=(500, 4))
        rb, rs = best_misreports(VcgMechanism(config), b, s, default_grid()).regrets()
        assert max(rb.max(), rs.max()) <= 1e-9

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            vcg_allocate(AuctionConfig.full(2, 1, [0.6]), BidProfile(np.ones(2), np.ones(1)), method="greedy")
