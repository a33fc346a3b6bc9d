"""IPS and balanced point estimators, their closed-form variances, and an
exact enumeration oracle for estimator moments."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AUG,
    LOG,
    Environment,
    LoggedDataset,
    MixProfile,
    Policy,
    SecondMomentModel,
    mix_policies,
    true_utility,
)
from .exceptions import (
    CountMismatch,
    InfiniteVariance,
    InvalidEnvironment,
    NegativeVariance,
    ShapeMismatch,
    TooFewValues,
    TooLarge,
    ZeroBalancedPropensity,
    ZeroPropensity,
)

# relative slack before a negative variance total is treated as a formula bug
NEGATIVE_TOL = 1e-10


@dataclass(frozen=True)
class EstimateReport:
    point_estimate: float
    n_used: int
    per_source_contributions: tuple  # (log, aug), each already divided by N


@dataclass(frozen=True)
class VarianceReport:
    """Variance of an estimator, kept as ``expectation_term - r_squared_term``."""

    value: float
    expectation_term: float
    r_squared_term: float
    formula: str

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "expectation_term": self.expectation_term,
            "r_squared_term": self.r_squared_term,
            "formula": self.formula,
        }


def _report(expectation: float, r_sq: float, formula: str) -> VarianceReport:
    value = expectation - r_sq
    if value < -NEGATIVE_TOL * max(1.0, abs(expectation)):
        raise NegativeVariance(
            f"{formula} variance came out negative ({expectation!r} - {r_sq!r})"
        )
    return VarianceReport(value, expectation, r_sq, formula)


def _estimate(data: LoggedDataset, weights: np.ndarray) -> EstimateReport:
    n = len(data)
    if n == 0:
        return EstimateReport(0.0, 0, (0.0, 0.0))
    terms = weights * data.rewards
    log_part = float(terms[data.sources == LOG].sum()) / n
    aug_part = float(terms[data.sources == AUG].sum()) / n
    return EstimateReport(float(terms.sum()) / n, n, (log_part, aug_part))


def ips_estimate(data: LoggedDataset, p_target: Policy) -> EstimateReport:
    """IPS estimate where each record is weighted by its own source policy.

    Parameters
    ----------
    data: LoggedDataset
        Records from the log and (optionally) the augmentation source.
    p_target: Policy
        Policy whose value is estimated.

    Returns
    -------
    EstimateReport
        ``(1/N) * sum_i pi_t(a_i|x_i) / pi_src(a_i|x_i) * r_i``.
    """
    if p_target.shape != data.log_policy.shape:
        raise ShapeMismatch(f"target {p_target.shape} vs data {data.log_policy.shape}")
    prop = data.source_policy_probs()
    if np.any(prop <= 0):
        i = int(np.flatnonzero(prop <= 0)[0])
        raise ZeroPropensity(f"record {i} has zero propensity under its source policy")
    w = p_target.table[data.contexts, data.actions] / prop
    return _estimate(data, w)


def balanced_estimate(
    data: LoggedDataset,
    p_target: Policy,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
) -> EstimateReport:
    """Balanced (multiple importance sampling) estimate.

    Every record, whatever its source, is weighted by the mixture
    ``(1 - alpha) * p_old + alpha * p_aug``.
    """
    if data.counts() != (mix.n_log, mix.n_aug):
        raise CountMismatch(f"dataset counts {data.counts()} do not match {mix}")
    if p_target.shape != p_old.shape:
        raise ShapeMismatch(f"target {p_target.shape} vs logging {p_old.shape}")
    bal = mix_policies(p_old, p_aug, mix).table[data.contexts, data.actions]
    if np.any(bal <= 0):
        i = int(np.flatnonzero(bal <= 0)[0])
        raise ZeroBalancedPropensity(f"record {i} has zero balanced propensity")
    w = p_target.table[data.contexts, data.actions] / bal
    return _estimate(data, w)


def _expected_ratio(p_target: Policy, divisor: np.ndarray, m: SecondMomentModel, env: Environment) -> float:
    """``E_x[sum_a pi_t^2 m / divisor]`` with cells of zero numerator dropped."""
    if not (p_target.shape == divisor.shape == m.shape == env.shape):
        raise ShapeMismatch("target, divisor, second moments and environment disagree in shape")
    num = env.context_probs[:, None] * p_target.table**2 * m.table
    live = num > 0
    if np.any(live & (divisor <= 0)):
        x, a = np.argwhere(live & (divisor <= 0))[0]
        raise InfiniteVariance(f"cell ({x}, {a}) has target mass but zero propensity")
    return float(np.sum(num[live] / divisor[live]))


def ips_variance_closed_form(
    p_target: Policy,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    m: SecondMomentModel,
    env: Environment,
) -> VarianceReport:
    """Variance of the per-source IPS estimator on ``n_log + n_aug`` samples.

    The ``R^2`` term carries ``1/N`` (the per-source ``R^2`` terms add up to
    ``(n_log + n_aug) / N^2``).
    """
    N = mix.total
    expectation = 0.0
    if mix.n_log:
        expectation += mix.n_log / N**2 * _expected_ratio(p_target, p_old.table, m, env)
    if mix.n_aug:
        expectation += mix.n_aug / N**2 * _expected_ratio(p_target, p_aug.table, m, env)
    R = true_utility(p_target, env)
    return _report(expectation, R**2 / N, "ips")


def balanced_variance_closed_form(
    p_target: Policy,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    m: SecondMomentModel,
    env: Environment,
) -> VarianceReport:
    """``(1/N) * (E_x[sum_a pi_t^2 m / pi_balanced] - R^2)``."""
    N = mix.total
    bal = mix_policies(p_old, p_aug, mix)
    expectation = _expected_ratio(p_target, bal.table, m, env) / N
    R = true_utility(p_target, env)
    return _report(expectation, R**2 / N, "balanced")


def single_term_variance(p: Policy, p_target: Policy, m: SecondMomentModel, env: Environment) -> float:
    """Variance of one IPS term ``pi_t(a|x) / pi(a|x) * r`` with ``a ~ pi``."""
    R = true_utility(p_target, env)
    return _expected_ratio(p_target, p.table, m, env) - R**2


def empirical_variance(values: Sequence[float]) -> float:
    """Unbiased sample variance (divisor ``n - 1``)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise TooFewValues(f"need at least 2 values, got {v.size}")
    return float(np.var(v, ddof=1))


@dataclass(frozen=True)
class ExactMoments:
    mean: float
    variance: float
    true_value: float

    @property
    def bias(self) -> float:
        return self.mean - self.true_value

    @property
    def biased(self) -> bool:
        return abs(self.bias) > 1e-10


def _single_sample_outcomes(env: Environment, src: Policy, p_target: Policy, divisor: np.ndarray):
    """Distribution of one weighted reward drawn under ``src``: (values, probs)."""
    if env.reward_kind != "bernoulli" and np.any(env.reward_variance > 0):
        raise InvalidEnvironment("exact enumeration needs Bernoulli or deterministic rewards")
    values, probs = [], []
    for x in range(env.n_contexts):
        px = env.context_probs[x]
        for a in range(env.n_actions):
            pa = px * src.table[x, a]
            if pa <= 0:
                continue
            w = p_target.table[x, a] / divisor[x, a]
            mean = env.mean_reward[x, a]
            if env.reward_kind == "bernoulli":
                for r, pr in ((1.0, mean), (0.0, 1.0 - mean)):
                    if pr > 0:
                        values.append(w * r)
                        probs.append(pa * pr)
            else:
                values.append(w * mean)
                probs.append(pa)
    return np.array(values), np.array(probs)


def balanced_variance_stratified(
    p_target: Policy,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    m: SecondMomentModel,
    env: Environment,
) -> VarianceReport:
    """Exact variance of the balanced estimator when exactly ``n_log`` records
    come from ``p_old`` and ``n_aug`` from ``p_aug``.

    Each source's weighted reward has its own mean ``mu_s`` (only the mixture
    is unbiased), so the variance is
    ``sum_s n_s (E_s[w^2 r^2] - mu_s^2) / N^2``.  It never exceeds
    :func:`balanced_variance_closed_form`, which is exact when every record's
    source is itself drawn at random with ``P(aug) = alpha``; the gap is
    ``sum_s n_s (mu_s - R)^2 / N^2``.
    """
    if not (p_target.shape == p_old.shape == p_aug.shape == m.shape == env.shape):
        raise ShapeMismatch("target, policies, second moments and environment disagree in shape")
    N = mix.total
    bal = mix_policies(p_old, p_aug, mix).table
    live = env.context_probs[:, None] * p_target.table**2 * m.table > 0
    if np.any(live & (bal <= 0)):
        x, a = np.argwhere(live & (bal <= 0))[0]
        raise InfiniteVariance(f"cell ({x}, {a}) has target mass but zero balanced propensity")
    safe = np.where(bal > 0, bal, 1.0)
    px = env.context_probs[:, None]
    second = first = 0.0
    for n, src in ((mix.n_log, p_old), (mix.n_aug, p_aug)):
        if not n:
            continue
        second += n * float(np.sum(px * src.table * p_target.table**2 * m.table / safe**2))
        mu = float(np.sum(px * src.table * p_target.table * env.mean_reward / safe))
        first += n * mu**2
    return _report(second / N**2, first / N**2, "balanced_stratified")


def exact_estimator_moments(
    env: Environment,
    p_target: Policy,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    estimator: str = "balanced",
    method: str = "joint",
    budget: int = 2_000_000,
    design: str = "stratified",
) -> ExactMoments:
    """Exact mean and variance of the IPS or balanced estimator by enumeration.

    ``method="joint"`` enumerates every joint outcome of all ``N`` samples and
    evaluates the estimator on each, without using independence.
    ``method="factorized"`` enumerates one sample per source and combines
    them as ``Var = (n_log Var_log + n_aug Var_aug) / N^2``.

    ``design="stratified"`` fixes the per-source counts at ``mix``.
    ``design="mixture"`` draws each record's source independently with
    ``P(aug) = alpha``, so all ``N`` records share one outcome distribution.
    """
    if estimator == "balanced":
        bal = mix_policies(p_old, p_aug, mix).table
        div_log = div_aug = bal
    elif estimator == "ips":
        div_log, div_aug = p_old.table, p_aug.table
    else:
        raise ValueError(f"unknown estimator {estimator!r}")

    parts = []
    if design == "mixture":
        v_l, p_l = _single_sample_outcomes(env, p_old, p_target, div_log)
        v_a, p_a = _single_sample_outcomes(env, p_aug, p_target, div_aug)
        a = mix.alpha_float
        parts.append((mix.total, (np.concatenate([v_l, v_a]), np.concatenate([(1 - a) * p_l, a * p_a]))))
    elif design != "stratified":
        raise ValueError(f"unknown design {design!r}")
    elif mix.n_log:
        parts.append((mix.n_log, _single_sample_outcomes(env, p_old, p_target, div_log)))
    if design == "stratified" and mix.n_aug:
        parts.append((mix.n_aug, _single_sample_outcomes(env, p_aug, p_target, div_aug)))
    N = mix.total
    R = true_utility(p_target, env)

    if method == "factorized":
        if sum(v.size for _, (v, _) in parts) > budget:
            raise TooLarge("single-sample outcome space exceeds the budget")
        mean = var = 0.0
        for n, (v, p) in parts:
            mu = float(p @ v)
            mean += n * mu / N
            var += n * float(p @ (v - mu) ** 2) / N**2
        return ExactMoments(mean, var, R)

    if method != "joint":
        raise ValueError(f"unknown method {method!r}")
    size = 1
    for n, (v, _) in parts:
        size *= v.size**n
    if size > budget:
        raise TooLarge(f"{size} joint outcomes exceed the budget of {budget}")
    sums = np.zeros(1)
    probs = np.ones(1)
    for n, (v, p) in parts:
        for _ in range(n):
            sums = (sums[:, None] + v[None, :]).ravel()
            probs = (probs[:, None] * p[None, :]).ravel()
    est = sums / N
    mean = float(probs @ est)
    var = float(probs @ (est - mean) ** 2)
    return ExactMoments(mean, var, R)
