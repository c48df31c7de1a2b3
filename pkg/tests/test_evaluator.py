import math

import numpy as np
import pytest
from scipy import stats

from jtransnet.auction import AuctionConfig, Outcome, enumerate_bundles
from jtransnet.baselines import VcgMechanism
from jtransnet.evaluator import (
    betainc_regularized, check_anonymity, check_deterministic, check_ir, evaluate, paired_t_test, t_two_sided_p,
)
from jtransnet.model import Architecture, JTransNetMechanism, ModelParams

from _cases import SMALL_ARCH

CONFIG = AuctionConfig.full(3, 2, [0.6, 0.2])


def _data(n, seed=0, config=CONFIG):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, config.num_brands)), rng.uniform(size=(n, config.num_stores))


class _Wrapped:
    """VCG with an optional distortion, for planting violations."""

    def __init__(self, config, payment_scale=1.0, favor_first=False, free=False):
        self.config = config
        self.inner = VcgMechanism(config)
        self.payment_scale = payment_scale
        self.favor_first = favor_first
        self.free = free

    def with_config(self, config):
        return _Wrapped(config, self.payment_scale, self.favor_first, self.free)

    def run(self, b, s):
        b = np.array(b, dtype=float)
        if self.favor_first:
            b[:, 0] += 10.0  # brand index 0 always wins, whoever that is
        out = self.inner.run(b, s)
        scale = 0.0 if self.free else self.payment_scale
        return Outcome(out.alloc, out.alloc_brand, out.alloc_store, out.pay_brand * scale, out.pay_store * scale,
                       out.ctr_brand, out.ctr_store)


class TestEvaluate:
    def test_vcg_report(self):
        b, s = _data(400)
        rep = evaluate(VcgMechanism(CONFIG), b, s)
        assert rep.regret <= 1e-9
        assert rep.ir_violations == 0
        assert rep.determinism_pass
        assert rep.revenue <= rep.welfare
        assert rep.revenue_se > 0 and rep.num_samples == 400

    def test_free_mechanism_has_zero_revenue(self):
        b, s = _data(50)
        assert evaluate(_Wrapped(CONFIG, free=True), b, s).revenue == 0.0

    def test_doubling_payments_doubles_revenue(self):
        b, s = _data(100)
        one = evaluate(_Wrapped(CONFIG), b, s, grid=[1.0]).revenue
        two = evaluate(_Wrapped(CONFIG, payment_scale=2.0), b, s, grid=[1.0]).revenue
        assert two == 2 * one

    def test_regret_is_mean_over_bidders(self):
        b, s = _data(60, seed=3)
        mech = JTransNetMechanism(ModelParams.init(Architecture(**SMALL_ARCH), seed=1), CONFIG)
        rep = evaluate(mech, b, s)
        assert rep.regret == pytest.approx(np.concatenate([rep.regret_brand, rep.regret_store]).mean())
        assert rep.regret >= 0

    def test_empty_test_set(self):
        with pytest.raises(ValueError):
            evaluate(VcgMechanism(CONFIG), np.zeros((0, 3)), np.zeros((0, 2)))

    def test_report_row_keys(self):
        b, s = _data(20)
        row = evaluate(VcgMechanism(CONFIG), b, s, anonymity_permutations=2).row()
        assert {"rev", "sw", "rgt", "ir_violations", "deterministic", "anonymity_max_dev"} <= set(row)


class TestAnonymity:
    def test_identity_permutation(self):
        b, s = _data(20)
        mech = JTransNetMechanism(ModelParams.init(Architecture(**SMALL_ARCH), seed=2), CONFIG)
        assert check_anonymity(mech, b, s, 3, identity=True) == 0.0

    def test_learned_mechanism_equivariant(self):
        b, s = _data(50, seed=1)
        mech = JTransNetMechanism(ModelParams.init(Architecture(**SMALL_ARCH), seed=2), CONFIG)
        assert check_anonymity(mech, b, s, 20, seed=4) < 1e-6

    def test_planted_favoritism_detected(self):
        b, s = _data(50, seed=2)
        assert check_anonymity(_Wrapped(CONFIG, favor_first=True), b, s, 20, seed=5) > 0.1

    def test_needs_a_permutation(self):
        with pytest.raises(ValueError):
            check_anonymity(VcgMechanism(CONFIG), *_data(2), 0)


class TestDeterminism:
    def test_valid(self):
        assert check_deterministic(np.array([[0, 1], [1, 0], [0, 0.0]])).passed

    def test_fractional_entry_located(self):
        res = check_deterministic(np.array([[0.5, 1], [0.5, 0], [0, 0.0]]))
        assert not res.passed
        assert any("bundle 0, slot 0" in p for p in res.problems)

    def test_two_winners_in_a_column(self):
        assert not check_deterministic(np.array([[1, 0], [1, 0], [0, 1.0]])).passed

    def test_one_bundle_in_two_slots(self):
        assert not check_deterministic(np.array([[1, 1], [0, 0], [0, 0.0]])).passed


class TestIR:
    def _outcome(self, pay):
        idx = enumerate_bundles(CONFIG)
        alloc = np.zeros((1, 6, 2))
        alloc[0, 0, 0] = alloc[0, 3, 1] = 1.0
        return Outcome.from_allocation(alloc, np.array([pay]), np.zeros((1, 2)), idx, CONFIG.alpha)

    def test_planted_overcharge_counted(self):
        b, s = np.array([[0.5, 0.5, 0.5]]), np.array([[0.5, 0.5]])
        assert check_ir(self._outcome([0.31, 0.0, 0.0]), b, s) == 1

    def test_fair_charge(self):
        b, s = np.array([[0.5, 0.5, 0.5]]), np.array([[0.5, 0.5]])
        assert check_ir(self._outcome([0.3, 0.1, 0.0]), b, s) == 0

    def test_unallocated(self):
        idx = enumerate_bundles(CONFIG)
        out = Outcome.from_allocation(np.zeros((4, 6, 2)), np.zeros((4, 3)), np.zeros((4, 2)), idx, CONFIG.alpha)
        assert check_ir(out, *_data(4)) == 0


class TestPairedT:
    def test_identical_vectors_are_degenerate(self):
        r = paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
        assert r.t == 0.0 and r.p_value == 1.0 and r.degenerate

    def test_constant_shift_is_degenerate_and_significant(self):
        r = paired_t_test(np.full(10, 0.55), np.full(10, 0.5))
        assert r.degenerate and r.p_value == 0.0 and math.isinf(r.t)

    def test_shift_with_noise(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=1000)
        r = paired_t_test(a + 0.05 + 1e-4 * rng.standard_normal(1000), a)
        assert r.p_value < 1e-10 and r.t > 0

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        r = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert r.t == pytest.approx(ref.statistic, rel=1e-12)
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)

    @pytest.mark.parametrize("t,df", [(0.0, 3), (0.5, 1), (1.96, 10), (-3.3, 50), (8.0, 7), (2.5, 998)])
    def test_t_tail(self, t, df):
        assert t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-9, abs=1e-300)

    @pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (10.0, 0.5, 0.99), (0.5, 20.0, 0.01)])
    def test_incomplete_beta(self, a, b, x):
        assert betainc_regularized(a, b, x) == pytest.approx(stats.beta.cdf(x, a, b), rel=1e-10)

    def test_symmetric_differences(self):
        d = np.array([-0.3, 0.3, -0.1, 0.1, -0.2, 0.2])
        assert paired_t_test(d, np.zeros(6)).p_value == pytest.approx(1.0)

    @pytest.mark.parametrize("a,b", [([1.0], [2.0]), ([1.0, 2.0], [1.0])])
    def test_input_validation(self, a, b):
        with pytest.raises(ValueError):
            paired_t_test(a, b)
