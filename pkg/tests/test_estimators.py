import itertools

import numpy as np
import pytest

from mval import (
    Environment,
    LoggedDataset,
    MixProfile,
    Policy,
    balanced_estimate,
    balanced_variance_closed_form,
    balanced_variance_stratified,
    empirical_variance,
    exact_estimator_moments,
    ips_estimate,
    ips_variance_closed_form,
    mval_policy,
    sample_logged_data,
    second_moment,
    single_term_variance,
    true_utility,
    uniform_policy,
    uniform_second_moment,
)
from mval.checks import random_small_instance
from mval.core import AUG, LOG
from mval.estimators import VarianceReport, _report
from mval.exceptions import (
    CountMismatch,
    InfiniteVariance,
    NegativeVariance,
    TooFewValues,
    TooLarge,
    ZeroBalancedPropensity,
    ZeroPropensity,
)

from conftest import random_policy


def brute_force_moments(env, p_target, p_old, p_aug, mix, estimator, design="stratified"):
    """Enumerate every joint record outcome and run the real estimators on it."""
    K, D = env.shape
    cells = [(x, a, r) for x in range(K) for a in range(D) for r in (0.0, 1.0)]

    def cell_prob(policy, x, a, r):
        mu = env.mean_reward[x, a]
        return env.context_probs[x] * policy.table[x, a] * (mu if r else 1 - mu)

    if design == "stratified":
        layouts = [(LOG,) * mix.n_log + (AUG,) * mix.n_aug]
        layout_prob = [1.0]
    else:
        a = mix.alpha_float
        layouts = list(itertools.product((LOG, AUG), repeat=mix.total))
        layout_prob = [np.prod([a if s == AUG else 1 - a for s in lay]) for lay in layouts]
    values, probs = [], []
    for lay, lp in zip(layouts, layout_prob):
        if lp == 0:
            continue
        for combo in itertools.product(cells, repeat=mix.total):
            pr = lp
            for (x, a, r), s in zip(combo, lay):
                pr *= cell_prob(p_old if s == LOG else p_aug, x, a, r)
            if pr == 0:
                continue
            xs, acts, rs = zip(*combo)
            data = LoggedDataset(xs, acts, rs, lay, p_old, p_aug)
            if estimator == "ips":
                v = ips_estimate(data, p_target).point_estimate
            else:
                # the estimator divides by the nominal mixture, whatever the realised split
                bal = (mix.n_log * p_old.table + mix.n_aug * p_aug.table) / mix.total
                v = float(np.mean(p_target.table[xs, acts] / bal[xs, acts] * np.array(rs)))
            values.append(v)
            probs.append(pr)
    v, p = np.array(values), np.array(probs)
    mean = p @ v
    return mean, p @ (v - mean) ** 2


class TestPointEstimates:
    def test_target_equals_balanced_gives_sample_mean(self):
        p = Policy([[0.3, 0.7]])
        d = LoggedDataset([0, 0, 0], [0, 1, 1], [1.0, 0.0, 1.0], [LOG, LOG, AUG], p, p)
        rep = balanced_estimate(d, p, p, p, MixProfile(2, 1))
        assert rep.point_estimate == pytest.approx(2 / 3, abs=1e-15)

    def test_balanced_hand_example(self):
        target, old, aug = Policy([[1.0, 0.0]]), Policy([[0.2, 0.8]]), Policy([[0.8, 0.2]])
        d = LoggedDataset([0, 0], [0, 0], [1.0, 1.0], [LOG, AUG], old, aug)
        rep = balanced_estimate(d, target, old, aug, MixProfile(1, 1))
        assert rep.point_estimate == pytest.approx(2.0, abs=1e-15)
        assert rep.n_used == 2
        assert sum(rep.per_source_contributions) == pytest.approx(rep.point_estimate, abs=1e-12)

    def test_zero_target_mass_contributes_nothing(self):
        target, old = Policy([[1.0, 0.0]]), Policy([[0.5, 0.5]])
        d = LoggedDataset([0], [1], [1.0], [LOG], old)
        assert balanced_estimate(d, target, old, old, MixProfile(1, 0)).point_estimate == 0.0
        assert ips_estimate(d, target).point_estimate == 0.0

    def test_ips_uses_each_source(self):
        target, old, aug = Policy([[1.0, 0.0]]), Policy([[0.2, 0.8]]), Policy([[0.8, 0.2]])
        d = LoggedDataset([0, 0], [0, 0], [1.0, 1.0], [LOG, AUG], old, aug)
        assert ips_estimate(d, target).point_estimate == pytest.approx((5 + 1.25) / 2, abs=1e-14)

    def test_ips_equals_balanced_with_single_source(self, rng):
        env = Environment.bernoulli(np.full(3, 1 / 3), rng.random((3, 4)))
        p, target = random_policy(rng, 3, 4), random_policy(rng, 3, 4)
        d = LoggedDataset.combine(sample_logged_data(env, p, 40, 1), sample_logged_data(env, p, 10, 2, "aug"))
        a = ips_estimate(d, target).point_estimate
        b = balanced_estimate(d, target, p, p, MixProfile(40, 10)).point_estimate
        assert a == pytest.approx(b, abs=1e-12)

    def test_point_estimate_is_weighted_sum_over_n(self, rng):
        env = Environment.bernoulli([0.5, 0.5], rng.random((2, 3)))
        old, aug, target = (random_policy(rng, 2, 3) for _ in range(3))
        d = LoggedDataset.combine(sample_logged_data(env, old, 30, 1), sample_logged_data(env, aug, 7, 2, "aug"))
        bal = (30 * old.table + 7 * aug.table) / 37
        expect = np.sum(target.table[d.contexts, d.actions] / bal[d.contexts, d.actions] * d.rewards) / 37
        assert balanced_estimate(d, target, old, aug, MixProfile(30, 7)).point_estimate == pytest.approx(expect, abs=1e-12)

    def test_zero_propensity(self):
        old = Policy([[1.0, 0.0]])
        d = LoggedDataset([0], [1], [1.0], [LOG], old)
        with pytest.raises(ZeroPropensity):
            ips_estimate(d, Policy([[0.5, 0.5]]))
        with pytest.raises(ZeroBalancedPropensity):
            balanced_estimate(d, Policy([[0.5, 0.5]]), old, old, MixProfile(1, 0))

    def test_count_mismatch(self):
        p = uniform_policy(1, 2)
        d = LoggedDataset([0], [1], [1.0], [LOG], p)
        with pytest.raises(CountMismatch):
            balanced_estimate(d, p, p, p, MixProfile(0, 1))


class TestClosedForms:
    def test_ips_hand_example(self):
        env = Environment([1.0], [[1.0, 0.0]], "gaussian", [[0.0, 0.0]])
        target, old = Policy([[1.0, 0.0]]), Policy([[0.5, 0.5]])
        rep = ips_variance_closed_form(target, old, old, MixProfile(1, 0), second_moment(env), env)
        assert rep.value == pytest.approx(1.0, abs=1e-15)
        ex = exact_estimator_moments(env, target, old, old, MixProfile(1, 0), "ips")
        assert (ex.mean, ex.variance) == pytest.approx((1.0, 1.0), abs=1e-15)
        for n in (2, 5):
            rep = ips_variance_closed_form(target, old, old, MixProfile(n, 0), second_moment(env), env)
            assert rep.value == pytest.approx(1 / n, abs=1e-15)

    def test_ips_infinite(self):
        env = Environment.bernoulli([1.0], [[0.5, 0.5]])
        with pytest.raises(InfiniteVariance):
            ips_variance_closed_form(
                Policy([[0.5, 0.5]]), Policy([[1.0, 0.0]]), Policy([[0.5, 0.5]]), MixProfile(1, 1), second_moment(env), env
            )

    def test_ips_uniform_formula(self, rng):
        K, D, N, c = 3, 4, 7, 0.3
        env = Environment.bernoulli(rng.dirichlet(np.ones(K)), rng.random((K, D)))
        u = uniform_policy(K, D)
        R = true_utility(u, env)
        rep = ips_variance_closed_form(u, u, u, MixProfile(4, 3), uniform_second_moment((K, D), c), env)
        # pi_t^2 / pi = 1/D per cell, summed over D actions -> c per context
        assert rep.value == pytest.approx((c * D * (1 / D) - R**2) / N, abs=1e-14)

    def test_balanced_alpha_one_is_single_policy_ips(self, rng):
        env = Environment.bernoulli([0.3, 0.7], rng.random((2, 3)))
        old, aug, target = (random_policy(rng, 2, 3) for _ in range(3))
        m = second_moment(env)
        mix = MixProfile(0, 5)
        a = balanced_variance_closed_form(target, old, aug, mix, m, env).value
        b = single_term_variance(aug, target, m, env) / 5
        assert a == pytest.approx(b, abs=1e-14)

    def test_report_components(self, two_by_three):
        env, old, target, mix = two_by_three
        rep = balanced_variance_closed_form(target, old, old, mix, second_moment(env), env)
        assert rep.value == rep.expectation_term - rep.r_squared_term
        assert rep.r_squared_term == pytest.approx(true_utility(target, env) ** 2 / mix.total, abs=1e-15)
        assert set(rep.to_dict()) == {"value", "expectation_term", "r_squared_term", "formula"}

    def test_minvar_mixture_beats_random_augmentations(self, rng, two_by_three):
        env, old, target, mix = two_by_three
        m = second_moment(env)
        pa, _ = mval_policy(target, old, mix, m)
        best = balanced_variance_closed_form(target, old, pa, mix, m, env).value
        for _ in range(1000):
            other = random_policy(rng, 2, 3)
            assert best <= balanced_variance_closed_form(target, old, other, mix, m, env).value + 1e-12

    def test_balanced_never_worse_than_ips(self, rng):
        for _ in range(200):
            inst = random_small_instance(rng, 3, 3, 6)
            m = second_moment(inst.env)
            b = balanced_variance_closed_form(inst.p_target, inst.p_old, inst.p_aug, inst.mix, m, inst.env).value
            i = ips_variance_closed_form(inst.p_target, inst.p_old, inst.p_aug, inst.mix, m, inst.env).value
            assert b <= i + 1e-10

    def test_negative_total_raises_instead_of_clamping(self):
        with pytest.raises(NegativeVariance):
            _report(1.0, 1.5, "balanced")
        assert isinstance(_report(1.0, 1.0 + 1e-14, "balanced"), VarianceReport)


class TestSingleTermVariance:
    def test_constant_estimator(self):
        env = Environment([1.0], [[1.0, 0.3]], "gaussian", [[0.0, 0.0]])
        p = Policy([[1.0, 0.0]])
        assert single_term_variance(p, p, second_moment(env), env) == pytest.approx(0.0, abs=1e-15)

    def test_hand_instance(self):
        env = Environment([1.0], [[1.0, 0.0]], "gaussian", [[0.0, 0.0]])
        v = single_term_variance(Policy([[0.5, 0.5]]), Policy([[1.0, 0.0]]), second_moment(env), env)
        assert v == pytest.approx(1.0, abs=1e-15)

    def test_linear_in_m(self, rng):
        env = Environment.bernoulli([1.0], rng.random((1, 3)))
        p, t = random_policy(rng, 1, 3), random_policy(rng, 1, 3)
        m = second_moment(env)
        R2 = true_utility(t, env) ** 2
        base = single_term_variance(p, t, m, env) + R2
        scaled = single_term_variance(p, t, type(m)(3.0 * m.table), env) + R2
        assert scaled == pytest.approx(3.0 * base, abs=1e-14)


class TestEmpiricalVariance:
    @pytest.mark.parametrize("values,expected", [([1, 2, 3], 1.0), ([4, 4, 4, 4], 0.0), ([0, 2], 2.0)])
    def test_textbook(self, values, expected):
        assert empirical_variance(values) == expected

    def test_too_few(self):
        with pytest.raises(TooFewValues):
            empirical_variance([1.0])


class TestExactMoments:
    def test_mean_is_true_utility_when_covered(self, rng):
        for _ in range(50):
            inst = random_small_instance(rng)
            for est in ("balanced", "ips"):
                ex = exact_estimator_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, est)
                assert abs(ex.mean - ex.true_value) <= 1e-12
                assert not ex.biased

    def test_support_deficient_mixture_is_flagged_biased(self):
        env = Environment.bernoulli([1.0], [[0.5, 0.9]])
        old = aug = Policy([[1.0, 0.0]])
        ex = exact_estimator_moments(env, Policy([[0.5, 0.5]]), old, aug, MixProfile(1, 1))
        assert ex.biased
        assert ex.mean == pytest.approx(0.25, abs=1e-15)

    def test_joint_matches_factorized(self, rng):
        for _ in range(50):
            inst = random_small_instance(rng)
            for design in ("stratified", "mixture"):
                args = (inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, "balanced")
                j = exact_estimator_moments(*args, method="joint", design=design)
                f = exact_estimator_moments(*args, method="factorized", design=design)
                assert j.variance == pytest.approx(f.variance, abs=1e-12)

    @pytest.mark.parametrize("design", ["stratified", "mixture"])
    def test_matches_brute_force_through_real_estimators(self, rng, design):
        for _ in range(15):
            inst = random_small_instance(rng, 2, 2, 3)
            for est in ("balanced", "ips"):
                ex = exact_estimator_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, est, design=design)
                mean, var = brute_force_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, est, design)
                assert ex.mean == pytest.approx(mean, abs=1e-12)
                assert ex.variance == pytest.approx(var, abs=1e-12)

    def test_budget(self, two_by_three):
        env, old, target, _ = two_by_three
        with pytest.raises(TooLarge):
            exact_estimator_moments(env, target, old, old, MixProfile(20, 20), budget=10**6)

    def test_gaussian_rejected(self):
        env = Environment.gaussian([1.0], [[0.5]], [[1.0]])
        p = Policy([[1.0]])
        with pytest.raises(Exception) as info:
            exact_estimator_moments(env, p, p, p, MixProfile(1, 0))
        assert info.value.code == "InvalidEnvironment"


class TestDesignDependence:
    """The mixture-weighted closed form is exact when each record's source is
    drawn at random; with fixed per-source counts the exact variance is the
    stratified form, which is never larger."""

    def test_counterexample_by_hand(self):
        env = Environment.bernoulli([1.0], [[1.0, 0.0]])
        target, old, aug = Policy([[0.5, 0.5]]), Policy([[1.0, 0.0]]), Policy([[0.0, 1.0]])
        mix, m = MixProfile(1, 1), second_moment(env)
        # every fixed-count draw has one record on each action: the estimate is always 0.5
        ex = exact_estimator_moments(env, target, old, aug, mix)
        assert (ex.mean, ex.variance) == pytest.approx((0.5, 0.0), abs=1e-15)
        assert balanced_variance_stratified(target, old, aug, mix, m, env).value == pytest.approx(0.0, abs=1e-15)
        assert balanced_variance_closed_form(target, old, aug, mix, m, env).value == pytest.approx(0.125, abs=1e-15)
        mixed = exact_estimator_moments(env, target, old, aug, mix, design="mixture")
        assert mixed.variance == pytest.approx(0.125, abs=1e-15)

    def test_mixture_closed_form_exact_under_random_sources(self, rng):
        for _ in range(200):
            inst = random_small_instance(rng)
            m = second_moment(inst.env)
            cf = balanced_variance_closed_form(inst.p_target, inst.p_old, inst.p_aug, inst.mix, m, inst.env)
            ex = exact_estimator_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, design="mixture")
            assert abs(cf.value - ex.variance) <= 1e-10

    def test_stratified_closed_form_exact_with_fixed_counts(self, rng):
        for _ in range(200):
            inst = random_small_instance(rng)
            m = second_moment(inst.env)
            cf = balanced_variance_stratified(inst.p_target, inst.p_old, inst.p_aug, inst.mix, m, inst.env)
            ex = exact_estimator_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix)
            assert abs(cf.value - ex.variance) <= 1e-10

    def test_gap_formula(self, rng):
        for _ in range(200):
            inst = random_small_instance(rng, 3, 3, 8)
            env, t, o, a, mix = inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix
            m = second_moment(env)
            full = balanced_variance_closed_form(t, o, a, mix, m, env).value
            strat = balanced_variance_stratified(t, o, a, mix, m, env).value
            bal = (mix.n_log * o.table + mix.n_aug * a.table) / mix.total
            R = true_utility(t, env)
            gap = 0.0
            for n, src in ((mix.n_log, o), (mix.n_aug, a)):
                mu = np.sum(env.context_probs[:, None] * src.table * t.table * env.mean_reward / bal)
                gap += n * (mu - R) ** 2
            assert full - strat == pytest.approx(gap / mix.total**2, abs=1e-12)
            assert strat <= full + 1e-12

    def test_single_source_forms_agree(self, rng):
        for _ in range(100):
            inst = random_small_instance(rng)
            mix = MixProfile(inst.mix.total, 0)
            m = second_moment(inst.env)
            args = (inst.p_target, inst.p_old, inst.p_aug, mix, m, inst.env)
            assert balanced_variance_closed_form(*args).value == pytest.approx(
                balanced_variance_stratified(*args).value, abs=1e-12
            )
