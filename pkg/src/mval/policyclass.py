"""Policy-class envelopes and the multi-policy variance bound."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import Environment, MixProfile, Policy, SecondMomentModel, mix_policies
from .exceptions import EmptyClass, InfeasibleClass, InfiniteBound, ShapeMismatch, ZeroAlpha
from .solver import solve_table


@dataclass(frozen=True)
class FiniteClass:
    policies: tuple

    def __post_init__(self):
        pols = tuple(self.policies)
        if not pols:
            raise EmptyClass("a finite policy class needs at least one member")
        if any(p.shape != pols[0].shape for p in pols):
            raise ShapeMismatch("class members differ in shape")
        object.__setattr__(self, "policies", pols)


@dataclass(frozen=True)
class TrustRegion:
    """``{pi : pi_c / tau <= pi <= tau pi_c}``; ``two_sided=False`` drops the lower bound."""

    center: Policy
    tau: float
    two_sided: bool = True

    def __post_init__(self):
        if not self.tau >= 1:
            raise InfeasibleClass(f"tau must be at least 1, got {self.tau!r}")


PolicyClass = Union[FiniteClass, TrustRegion]


@dataclass(frozen=True)
class PiMaxEnvelope:
    """Per-cell maximum of ``pi(a|x)`` over a class. Rows need not sum to one."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or np.any(t < 0) or np.any(t > 1 + 1e-12):
            raise ShapeMismatch("envelope must be a 2-d table with entries in [0, 1]")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def shape(self) -> tuple:
        return self.table.shape


def pi_max_finite(policies: Sequence[Policy]) -> PiMaxEnvelope:
    cls = FiniteClass(tuple(policies))
    return PiMaxEnvelope(np.max(np.stack([p.table for p in cls.policies]), axis=0))


def pi_max_trust_region(center: Policy, tau: float, two_sided: bool = True, approximate: bool = False) -> PiMaxEnvelope:
    """Exact envelope of a multiplicative trust region around ``center``.

    A cell can rise to ``tau * pi_c`` unless the other actions' lower bounds
    ``pi_c / tau`` leave less room than that.  ``approximate=True`` returns the
    center itself, which gives the same solver output as long as no cell of
    ``tau * pi_c`` exceeds one.
    """
    region = TrustRegion(center, float(tau), two_sided)
    pc = center.table
    if approximate or region.tau == 1:
        return PiMaxEnvelope(pc)
    upper = region.tau * pc
    if region.two_sided:
        others = (pc.sum(axis=1, keepdims=True) - pc) / region.tau
        return PiMaxEnvelope(np.minimum(upper, 1.0 - others))
    return PiMaxEnvelope(np.minimum(upper, 1.0))


def pi_max(policy_class: PolicyClass) -> PiMaxEnvelope:
    if isinstance(policy_class, FiniteClass):
        return pi_max_finite(policy_class.policies)
    return pi_max_trust_region(policy_class.center, policy_class.tau, policy_class.two_sided)


def variance_bound(
    envelope: PiMaxEnvelope,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    m: SecondMomentModel,
    env: Environment,
) -> float:
    """Upper bound ``(1/N) E_x[sum_a pi_max^2 m / pi_balanced]`` on the balanced
    estimator's variance for every member of the class."""
    if not (envelope.shape == p_old.shape == m.shape == env.shape):
        raise ShapeMismatch("envelope, policies, second moments and environment disagree in shape")
    bal = mix_policies(p_old, p_aug, mix).table
    num = env.context_probs[:, None] * envelope.table**2 * m.table
    live = num > 0
    if np.any(live & (bal <= 0)):
        raise InfiniteBound("balanced policy misses a cell the envelope covers")
    return float(np.sum(num[live] / bal[live])) / mix.total


def mval_solve_multi(envelope: PiMaxEnvelope, p_old: Policy, alpha: float, m: SecondMomentModel) -> Policy:
    """Augmentation policy minimizing the class variance bound, one context at a time."""
    if not alpha > 0:
        raise ZeroAlpha("alpha must be positive")
    if envelope.shape != m.shape:
        raise ShapeMismatch(f"envelope {envelope.shape} vs second moments {m.shape}")
    policy, _ = solve_table(envelope.table**2 * m.table, p_old, alpha)
    return policy
