import numpy as np
import pytest

from jtransnet import autodiff as ad
from jtransnet.auction import AuctionConfig, BidProfile, is_hard_allocation
from jtransnet.model import (
    Architecture, JTransNetMechanism, ModelParams, embed, encode, forward, forward_batch, hard_sort_matrix,
    instance_for, payment_fractions, payments, score, soft_sort_matrix, sort_logits, truncate_to_slots,
)

from _cases import SMALL_ARCH

Q_EXAMPLE = [9.0, 2.0, 10.0]


@pytest.fixture
def params():
    return ModelParams.init(Architecture(**SMALL_ARCH), seed=5)


def _rand_profile(config, rng, batch=None):
    shape = () if batch is None else (batch,)
    return rng.uniform(size=shape + (config.num_brands,)), rng.uniform(size=shape + (config.num_stores,))


class TestSortRelaxation:
    def test_row_score_table(self):
        np.testing.assert_array_equal(
            sort_logits(np.array(Q_EXAMPLE)).data,
            [[10, -11, 11], [-8, -15, -9], [-26, -19, -29]],
        )

    def test_hard_ranks(self):
        s = hard_sort_matrix(Q_EXAMPLE)
        assert [int(np.argmax(r)) + 1 for r in s] == [3, 1, 2]

    def test_logit_argmax_agrees_with_comparison_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = rng.standard_normal(6)
            np.testing.assert_array_equal(np.argmax(sort_logits(q).data, axis=-1), np.argsort(-q))

    def test_singleton(self):
        np.testing.assert_array_equal(hard_sort_matrix([5.0]), [[1.0]])

    def test_low_temperature_matches_hard(self):
        soft = soft_sort_matrix(np.array(Q_EXAMPLE), 1e-3).data
        assert np.abs(soft - hard_sort_matrix(Q_EXAMPLE)).max() < 1e-6

    def test_equal_scores_give_uniform_rows(self):
        np.testing.assert_allclose(soft_sort_matrix(np.full(4, 0.3), 0.7).data, 0.25)

    @pytest.mark.parametrize("tau", [1e-3, 0.1, 1.0, 50.0])
    def test_rows_normalized(self, tau):
        q = np.random.default_rng(1).standard_normal(7)
        np.testing.assert_allclose(soft_sort_matrix(q, tau).data.sum(axis=-1), 1.0, atol=1e-12)

    def test_truncation_example(self):
        s = truncate_to_slots(hard_sort_matrix(Q_EXAMPLE), 2)
        np.testing.assert_array_equal(s, [[0, 1], [0, 0], [1, 0]])

    def test_truncation_full_is_permutation(self):
        s = truncate_to_slots(hard_sort_matrix([0.1, 0.7, 0.4, 0.2]), 4)
        np.testing.assert_array_equal(s.sum(axis=0), 1)
        np.testing.assert_array_equal(s.sum(axis=1), 1)

    def test_truncation_rejects_too_many_slots(self):
        with pytest.raises(ValueError):
            truncate_to_slots(np.eye(3), 4)

    def test_ties_broken_by_bundle_bid_then_index(self):
        order = np.argmax(hard_sort_matrix([1.0, 1.0, 1.0], e=[0.2, 0.5, 0.2]), axis=-1)
        np.testing.assert_array_equal(order, [1, 0, 2])


class TestStages:
    def test_token_shape_setting_a(self, params):
        config = AuctionConfig.full(4, 2, [0.6])
        b, s = _rand_profile(config, np.random.default_rng(0))
        assert embed(params, instance_for(config), b, s).shape == (8, SMALL_ARCH["width"])

    def test_zero_bids_equal_tokens(self, params):
        config = AuctionConfig.full(3, 3, [0.6, 0.2])
        tok = embed(params, instance_for(config), np.zeros(3), np.zeros(3)).data
        np.testing.assert_allclose(tok, np.broadcast_to(tok[0], tok.shape))

    def test_encoder_is_permutation_equivariant(self, params):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, SMALL_ARCH["width"]))
        perm = rng.permutation(6)
        a = encode(params, ad.constant(x)).data
        b = encode(params, ad.constant(x[perm])).data
        assert np.abs(a[perm] - b).max() < 1e-6
        qa = score(params, ad.constant(a)).data
        qb = score(params, ad.constant(b)).data
        assert np.abs(qa[perm] - qb).max() < 1e-6

    def test_single_token(self, params):
        out = encode(params, ad.constant(np.ones((1, SMALL_ARCH["width"])))).data
        assert out.shape == (1, SMALL_ARCH["width"]) and np.all(np.isfinite(out))

    def test_zero_payment_head_gives_half(self, params):
        config = AuctionConfig.full(3, 2, [0.6])
        for side in ("brand", "store"):
            for suffix in ("w1", "b1", "w2", "b2"):
                params.weights[f"pay_{side}.{suffix}"].data[...] = 0.0
        b, s = np.array([0.3, 0.5, 0.9]), np.array([0.2, 0.4])
        f = forward_batch(params, config, b, s, "soft", 1.0)
        fb, fs = payment_fractions(params, f.inst, encode(params, embed(params, f.inst, b, s)),
                                   f.ctr_brand, f.ctr_store, b, s)
        np.testing.assert_allclose(fb.data, 0.5)
        np.testing.assert_allclose(fs.data, 0.5)
        np.testing.assert_allclose(f.pay_brand.data, 0.5 * b * f.ctr_brand.data)

    def test_payment_formula(self):
        p = payments(ad.constant([0.5]), ad.constant([0.6]), np.array([0.8]))
        assert p.data[0] == pytest.approx(0.24)

    def test_payment_zero_when_unallocated(self):
        assert payments(ad.constant([0.7]), ad.constant([0.0]), np.array([0.8])).data[0] == 0.0


class TestForward:
    @pytest.mark.parametrize("setting", [(4, 2, [0.6]), (3, 3, [0.6, 0.2]), (4, 4, [0.6, 0.2, 0.06])])
    def test_hard_allocation_is_deterministic(self, params, setting):
        config = AuctionConfig.full(*setting)
        b, s = _rand_profile(config, np.random.default_rng(3), batch=64)
        out = JTransNetMechanism(params, config).run(b, s)
        assert all(is_hard_allocation(x) for x in out.alloc)
        np.testing.assert_array_equal(out.alloc.sum(axis=(1, 2)), config.num_slots)

    def test_individually_rational(self, params):
        config = AuctionConfig.full(3, 3, [0.6, 0.2])
        b, s = _rand_profile(config, np.random.default_rng(4), batch=200)
        for mode in ("hard", "soft"):
            out = forward_batch(params, config, b, s, mode).outcome()
            assert (b * out.ctr_brand - out.pay_brand).min() >= -1e-12
            assert (s * out.ctr_store - out.pay_store).min() >= -1e-12

    def test_zero_bids_zero_payments(self, params):
        config = AuctionConfig.full(3, 2, [0.6])
        out = forward(params, config, BidProfile(np.zeros(3), np.zeros(2)))
        assert not out.pay_brand.any() and not out.pay_store.any()

    def test_soft_approaches_hard(self, params):
        config = AuctionConfig.full(3, 2, [0.6])
        b, s = np.array([0.1, 0.5, 0.9]), np.array([0.3, 0.8])
        hard = forward(params, config, BidProfile(b, s), "hard")
        q = forward_batch(params, config, b, s, "hard").scores.data
        gap = np.diff(np.sort(q)).min()
        soft = forward(params, config, BidProfile(b, s), "soft", tau=gap * 1e-3)
        assert np.abs(soft.pay_brand - hard.pay_brand).max() < 1e-3
        assert np.abs(soft.pay_store - hard.pay_store).max() < 1e-3

    def test_soft_columns_sum_to_one(self, params):
        config = AuctionConfig.full(3, 3, [0.6, 0.2])
        b, s = _rand_profile(config, np.random.default_rng(6), batch=10)
        out = forward_batch(params, config, b, s, "soft", 0.5).outcome()
        np.testing.assert_allclose(out.alloc.sum(axis=1), 1.0, atol=1e-12)

    def test_batched_matches_single(self, params):
        config = AuctionConfig.full(3, 3, [0.6, 0.2])
        b, s = _rand_profile(config, np.random.default_rng(7), batch=5)
        batch = JTransNetMechanism(params, config).run(b, s)
        for i in range(5):
            one = forward(params, config, BidProfile(b[i], s[i]))
            np.testing.assert_allclose(one.pay_brand, batch.pay_brand[i], atol=1e-12)
            np.testing.assert_array_equal(one.alloc, batch.alloc[i])

    def test_same_seed_same_weights(self):
        a = ModelParams.init(Architecture(**SMALL_ARCH), seed=9).arrays()
        b = ModelParams.init(Architecture(**SMALL_ARCH), seed=9).arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_bad_mode(self, params):
        with pytest.raises(ValueError):
            forward_batch(params, AuctionConfig.full(3, 2, [0.6]), np.zeros(3), np.zeros(2), "fuzzy")

    def test_bad_architecture(self):
        with pytest.raises(ValueError):
            Architecture(width=10, heads=4)
