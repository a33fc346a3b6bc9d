"""Random small instances and the oracle-equality checks run by ``oracle-check``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Environment, MixProfile, Policy, second_moment
from .estimators import (
    balanced_variance_closed_form,
    balanced_variance_stratified,
    exact_estimator_moments,
    ips_variance_closed_form,
)
from .solver import mval_grid_oracle, mval_objective, mval_solve_context


@dataclass(frozen=True)
class SmallInstance:
    env: Environment
    p_target: Policy
    p_old: Policy
    p_aug: Policy
    mix: MixProfile


def _sparse_dirichlet(rng: np.random.Generator, n: int, p_zero: float = 0.0) -> np.ndarray:
    v = rng.dirichlet(np.ones(n))
    if n > 1 and rng.random() < p_zero:
        v[rng.integers(n)] = 0.0
        v /= v.sum()
    return v


def random_small_instance(rng: np.random.Generator, max_contexts: int = 3, max_actions: int = 3, max_samples: int = 3) -> SmallInstance:
    """Bernoulli environment with full-support logging and augmentation policies."""
    K = int(rng.integers(1, max_contexts + 1))
    D = int(rng.integers(2, max_actions + 1)) if max_actions >= 2 else 1
    env = Environment.bernoulli(rng.dirichlet(np.ones(K)), rng.random((K, D)))
    target = Policy(np.array([_sparse_dirichlet(rng, D, 0.3) for _ in range(K)]))
    old = Policy(rng.dirichlet(np.ones(D), size=K))
    aug = Policy(rng.dirichlet(np.ones(D), size=K))
    n = int(rng.integers(1, max_samples + 1))
    n_aug = int(rng.integers(0, n + 1))
    return SmallInstance(env, target, old, aug, MixProfile(n - n_aug, n_aug))


def random_solver_instance(rng: np.random.Generator, max_actions: int = 4):
    """(c, q, alpha) with occasional zero target mass and zero logging mass."""
    A = int(rng.integers(2, max_actions + 1))
    target = _sparse_dirichlet(rng, A, 0.3)
    m = rng.uniform(0.05, 1.0, size=A)
    q = _sparse_dirichlet(rng, A, 0.3)
    alpha = float(rng.uniform(0.05, 1.0))
    return target**2 * m, q, alpha


def check_variance_oracle(rng, n_instances: int = 200, max_contexts: int = 3, max_actions: int = 3, tol: float = 1e-10) -> list:
    """Closed-form variances vs exact joint enumeration; returns violations.

    Each closed form is compared with the sampling design it is exact for:
    the mixture-weighted form with random per-record sources, the stratified
    balanced form and the IPS form with fixed per-source counts.
    """
    cases = (
        ("balanced", "mixture", balanced_variance_closed_form),
        ("balanced", "stratified", balanced_variance_stratified),
        ("ips", "stratified", ips_variance_closed_form),
    )
    bad = []
    for i in range(n_instances):
        inst = random_small_instance(rng, max_contexts, max_actions)
        m = second_moment(inst.env)
        for est, design, closed in cases:
            exact = exact_estimator_moments(inst.env, inst.p_target, inst.p_old, inst.p_aug, inst.mix, est, design=design)
            cf = closed(inst.p_target, inst.p_old, inst.p_aug, inst.mix, m, inst.env)
            if abs(cf.value - exact.variance) > tol:
                bad.append(f"variance[{est}/{design}] instance {i}: closed {cf.value!r} vs exact {exact.variance!r}")
            if abs(exact.mean - exact.true_value) > 1e-12:
                bad.append(f"mean[{est}/{design}] instance {i}: {exact.mean!r} vs {exact.true_value!r}")
    return bad


def check_solver_oracle(rng, n_instances: int = 1000, max_actions: int = 4, resolution: int = 1000) -> list:
    """Water-filling solver vs exhaustive grid; returns violations."""
    bad = []
    for i in range(n_instances):
        c, q, alpha = random_solver_instance(rng, max_actions)
        pi, _ = mval_solve_context(c, q, alpha)
        grid = mval_grid_oracle(c, q, alpha, resolution)
        f_s = mval_objective(pi, c, q, alpha)
        f_g = mval_objective(grid, c, q, alpha)
        if f_s > f_g + 1e-9:
            bad.append(f"objective instance {i}: solver {f_s!r} > grid {f_g!r}")
        dist = float(np.max(np.abs(pi - grid)))
        if dist > 2.0 / resolution:
            bad.append(f"distance instance {i}: {dist!r} > {2.0 / resolution!r}")
    return bad
