"""Per-context minimum-variance augmentation solver.

For one context the problem is

    minimize    sum_a c_a / ((1 - alpha) q_a + alpha pi_a)
    subject to  pi on the probability simplex

with ``c_a = pi_target(a)^2 m(a)`` (or the envelope version for policy
classes) and ``q`` the logging row.  It is separable and convex; the KKT
conditions give a water-filling solution parameterized by the multiplier
``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import MixProfile, Policy, SecondMomentModel, uniform_second_moment
from .exceptions import DegenerateWeights, ShapeMismatch, TooManyActions, ZeroAlpha

MASS_TOL = 1e-12
MAX_BISECTION_ITERS = 200


@dataclass(frozen=True)
class ContextWeights:
    """Objective numerators ``c_a`` for one context."""

    c: np.ndarray
    context_id: int = 0

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.ndim != 1 or np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("context weights must be a finite non-negative vector")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_target(cls, target_row, m_row, context_id: int = 0) -> "ContextWeights":
        return cls(np.asarray(target_row, float) ** 2 * np.asarray(m_row, float), context_id)


@dataclass(frozen=True)
class SolverDiagnostics:
    lam: float
    active_set: tuple
    bisection_iters: int
    simplex_residual: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "active_set": list(self.active_set),
            "bisection_iters": self.bisection_iters,
            "simplex_residual": self.simplex_residual,
            "degenerate": self.degenerate,
        }


def _as_weights(weights) -> np.ndarray:
    if isinstance(weights, ContextWeights):
        return weights.c
    return ContextWeights(weights).c


def mval_objective(pi, c, old_row, alpha: float) -> float:
    """``sum_a c_a / ((1 - alpha) q_a + alpha pi_a)``; zero-weight cells drop out."""
    c = np.asarray(c, float)
    d = (1.0 - alpha) * np.asarray(old_row, float) + alpha * np.asarray(pi, float)
    live = c > 0
    if np.any(d[live] <= 0):
        return float("inf")
    return float(np.sum(c[live] / d[live]))


def minvar_ips_policy(target_row, m_row) -> np.ndarray:
    """Variance-optimal IPS logging row, proportional to ``pi_t * sqrt(m)``."""
    s = np.asarray(target_row, float) * np.sqrt(np.asarray(m_row, float))
    total = s.sum()
    if not total > 0:
        raise DegenerateWeights("pi_target * sqrt(m) is zero for every action")
    return s / total


def _mass(lam: float, sc: np.ndarray, bq: np.ndarray, alpha: float) -> float:
    return float(np.maximum(0.0, (sc / np.sqrt(lam) - bq) / alpha).sum())


def mval_solve_context(weights, old_row, alpha: float):
    """Solve the single-context problem by water-filling.

    Parameters
    ----------
    weights: ContextWeights or array-like
        Non-negative numerators ``c_a``.
    old_row: array-like
        Logging distribution ``q`` for this context.
    alpha: float
        Augmentation share ``n_aug / N`` in ``(0, 1]``.

    Returns
    -------
    pi: ndarray
        The augmentation distribution.
    diagnostics: SolverDiagnostics

    Notes
    -----
    ``pi_a(lam) = max(0, (sqrt(alpha c_a / lam) - (1 - alpha) q_a) / alpha)``.
    ``lam`` is bracketed and bisected (geometrically) until the total mass
    is within ``1e-12`` of one; the active set found this way is then used
    to compute ``lam`` in closed form, which removes the bisection error.
    """
    c = _as_weights(weights)
    q = np.asarray(old_row, dtype=float)
    if q.shape != c.shape:
        raise ShapeMismatch(f"weights {c.shape} vs logging row {q.shape}")
    if not alpha > 0:
        raise ZeroAlpha("alpha must be positive; there is no augmentation budget")
    if alpha > 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")
    n = c.size
    if not np.any(c > 0):
        pi = np.full(n, 1.0 / n)
        return pi, SolverDiagnostics(0.0, tuple(range(n)), 0, abs(pi.sum() - 1.0), True)

    beta = 1.0 - alpha
    sc = np.sqrt(alpha * c)
    bq = beta * q

    # bracket: mass(lo) >= 1 >= mass(hi)
    lo = hi = alpha * float(c.max())
    while _mass(hi, sc, bq, alpha) > 1.0:
        hi *= 2.0
    while _mass(lo, sc, bq, alpha) < 1.0:
        lo /= 2.0
    lam = np.sqrt(lo * hi)
    iters = 0
    while iters < MAX_BISECTION_ITERS:
        iters += 1
        lam = np.sqrt(lo * hi)
        m = _mass(lam, sc, bq, alpha)
        if abs(m - 1.0) <= MASS_TOL:
            break
        if m > 1.0:
            lo = lam
        else:
            hi = lam

    # closed-form multiplier on the detected active set, iterated to a fixed point
    active = sc / np.sqrt(lam) > bq
    for _ in range(n + 1):
        root = sc[active].sum() / (alpha + bq[active].sum())
        new_active = sc > root * bq
        if np.array_equal(new_active, active):
            break
        active = new_active
    pi = np.zeros(n)
    pi[active] = np.maximum(0.0, (sc[active] / root - bq[active]) / alpha)
    pi /= pi.sum()
    diag = SolverDiagnostics(
        lam=float(root**2),
        active_set=tuple(int(a) for a in np.flatnonzero(pi > 0)),
        bisection_iters=iters,
        simplex_residual=float(abs(pi.sum() - 1.0)),
    )
    return pi, diag


def kkt_violation(pi, c, old_row, alpha: float) -> float:
    """Largest relative KKT violation of a candidate solution.

    Active actions must share ``alpha c_a / d_a^2``; inactive ones must not
    exceed it.  Returns 0 for an exact optimum.
    """
    pi = np.asarray(pi, float)
    c = np.asarray(c, float)
    d = (1.0 - alpha) * np.asarray(old_row, float) + alpha * pi
    act = pi > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(c > 0, alpha * c / d**2, 0.0)
    if not np.any(c > 0):
        return 0.0
    g_act = g[act & (c > 0)]
    lam = float(np.max(g_act))
    worst = float((lam - np.min(g_act)) / lam)
    inactive = ~act
    if np.any(inactive):
        worst = max(worst, float(np.max(g[inactive]) - lam) / lam)
    return max(worst, 0.0)


def mval_grid_oracle(weights, old_row, alpha: float, resolution: int = 1000) -> np.ndarray:
    """Exact minimizer of the objective over the simplex grid ``k / resolution``.

    Exhaustive over the grid via a min-plus dynamic program across actions
    (every composition of ``resolution`` is covered); intended for tests.
    """
    c = _as_weights(weights)
    q = np.asarray(old_row, dtype=float)
    n = c.size
    if n > 4:
        raise TooManyActions(f"grid oracle supports at most 4 actions, got {n}")
    if not 1 <= resolution <= 2000:
        raise ValueError("resolution must lie in [1, 2000]")
    R = int(resolution)
    k = np.arange(R + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (1.0 - alpha) * q[:, None] + alpha * k[None, :] / R
        f = np.where(c[:, None] > 0, c[:, None] / d, 0.0)
    f[(c[:, None] > 0) & (d <= 0)] = np.inf

    idx = k[:, None] - k[None, :]  # [total, own] -> remaining
    valid = idx >= 0
    idx = np.where(valid, idx, 0)
    best = f[0].copy()
    choices = []
    for a in range(1, n):
        if a == n - 1:
            cand = best[R - k] + f[a]
            j = int(np.argmin(cand))
            choices.append(np.full(R + 1, j))
            break
        table = np.where(valid, best[idx] + f[a][None, :], np.inf)
        arg = np.argmin(table, axis=1)
        best = table[k, arg]
        choices.append(arg)
    counts = np.zeros(n, dtype=int)
    s = R
    for a in range(n - 1, 0, -1):
        counts[a] = choices[a - 1][s]
        s -= counts[a]
    counts[0] = s
    return counts / R


def large_alpha_closed_form(target_row, m_row, old_row, alpha: float) -> Optional[np.ndarray]:
    """Augmentation row making the mixture equal the IPS minimum-variance row.

    Returns ``None`` when that row would need negative mass, i.e. when there
    is not enough augmentation budget for the closed form to apply.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")
    target = minvar_ips_policy(target_row, m_row)
    pi = (target - (1.0 - alpha) * np.asarray(old_row, float)) / alpha
    if np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > 1e-9:
        return None
    return np.maximum(pi, 0.0)


def variance_decrease_single_sample(epsilon: float, n_before: int, y: float) -> float:
    """Lower bound ``y / (eps (N eps + 1))`` on the variance drop from moving one
    sample's propensity from ``eps`` to ``(N eps + 1) / N``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return y / (epsilon * (n_before * epsilon + 1.0))


def solve_table(weights_table, p_old: Policy, alpha: float):
    """Run the per-context solver over every row; returns (Policy, diagnostics)."""
    c = np.asarray(weights_table, float)
    if c.shape != p_old.shape:
        raise ShapeMismatch(f"weights {c.shape} vs logging policy {p_old.shape}")
    rows, diags = [], []
    for x in range(c.shape[0]):
        pi, diag = mval_solve_context(ContextWeights(c[x], x), p_old.table[x], alpha)
        rows.append(pi)
        diags.append(diag)
    return Policy(np.vstack(rows), p_old.context_ids, p_old.action_ids), diags


def mval_policy(p_target: Policy, p_old: Policy, mix: MixProfile, m: Optional[SecondMomentModel] = None):
    """Minimum-variance augmentation policy for one target; returns (Policy, diagnostics)."""
    if mix.n_aug == 0:
        raise ZeroAlpha("mix has no augmentation samples")
    if m is None:
        m = uniform_second_moment(p_target.shape)
    return solve_table(p_target.table**2 * m.table, p_old, mix.alpha_float)


class MVALAugmenter(BaseEstimator):
    """Estimator-style wrapper around the per-context solver.

    Parameters
    ----------
    n_log, n_aug: int
        Sizes of the existing log and of the augmentation budget.

    Attributes
    ----------
    policy_: Policy
        Fitted augmentation policy.
    diagnostics_: list of SolverDiagnostics
    """

    def __init__(self, n_log: int = 900, n_aug: int = 100):
        self.n_log = n_log
        self.n_aug = n_aug

    def fit(self, target, logging_policy: Policy, second_moment: Optional[SecondMomentModel] = None):
        """``target`` is a Policy, an envelope, or any table of per-cell target masses."""
        table = np.asarray(getattr(target, "table", target), dtype=float)
        mix = MixProfile(self.n_log, self.n_aug)
        if mix.n_aug == 0:
            raise ZeroAlpha("n_aug must be positive")
        m = second_moment if second_moment is not None else uniform_second_moment(table.shape)
        self.policy_, self.diagnostics_ = solve_table(table**2 * m.table, logging_policy, mix.alpha_float)
        return self

    def predict_proba(self, contexts=None) -> np.ndarray:
        check_is_fitted(self, "policy_")
        if contexts is None:
            return np.array(self.policy_.table)
        return np.array(self.policy_.table[np.asarray(contexts, dtype=int)])
