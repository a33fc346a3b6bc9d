"""Domain types: policies, environments, mixture profiles and logged data."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    CountMismatch,
    InvalidEnvironment,
    InvalidMixProfile,
    NegativeEntry,
    RowSumOutOfTolerance,
    ShapeMismatch,
)

INGEST_ROW_TOL = 1e-9
ROW_TOL = 1e-12

LOG = 0
AUG = 1
SOURCE_NAMES = ("log", "aug")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_rows(table: np.ndarray, tol: float) -> None:
    if table.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d table, got shape {table.shape}")
    if not np.all(np.isfinite(table)):
        raise NegativeEntry("table contains non-finite entries")
    neg = np.argwhere(table < 0)
    if neg.size:
        r, c = neg[0]
        raise NegativeEntry(f"entry ({r}, {c}) is {table[r, c]!r}")
    dev = table.sum(axis=1) - 1.0
    bad = np.flatnonzero(np.abs(dev) > tol)
    if bad.size:
        raise RowSumOutOfTolerance(int(bad[0]), float(dev[bad[0]]))


@dataclass(frozen=True)
class Policy:
    """Row-stochastic table ``pi(a|x)`` over dense context and action ids."""

    table: np.ndarray
    context_ids: tuple = ()
    action_ids: tuple = ()

    def __post_init__(self):
        table = _frozen(self.table)
        _check_rows(table, ROW_TOL)
        if np.any(table > 1.0):
            raise NegativeEntry("entries must lie in [0, 1]")
        object.__setattr__(self, "table", table)
        if not self.context_ids:
            object.__setattr__(self, "context_ids", tuple(range(table.shape[0])))
        if not self.action_ids:
            object.__setattr__(self, "action_ids", tuple(range(table.shape[1])))
        if len(self.context_ids) != table.shape[0] or len(self.action_ids) != table.shape[1]:
            raise ShapeMismatch("label lengths do not match the table")

    @property
    def shape(self) -> tuple:
        return self.table.shape

    @property
    def n_contexts(self) -> int:
        return self.table.shape[0]

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]

    def __getitem__(self, idx):
        return self.table[idx]

    def to_list(self) -> list:
        return self.table.tolist()

    def is_uniform(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.table - 1.0 / self.n_actions) <= tol))

    def same_labels(self, other: "Policy") -> bool:
        return (
            self.shape == other.shape
            and self.context_ids == other.context_ids
            and self.action_ids == other.action_ids
        )


def validate_policy(raw_table) -> Policy:
    """Build a :class:`Policy` from a raw matrix, tolerating small rounding.

    Rows within ``1e-9`` of the simplex are clamped to ``[0, 1]`` and
    renormalized; anything further off raises.
    """
    table = np.array(raw_table, dtype=float)
    if table.ndim != 2:
        raise ShapeMismatch(f"expected a rectangular matrix, got shape {table.shape}")
    _check_rows(table, INGEST_ROW_TOL)
    table = np.clip(table, 0.0, 1.0)
    table = table / table.sum(axis=1, keepdims=True)
    return Policy(table)


def uniform_policy(n_contexts: int, n_actions: int) -> Policy:
    return Policy(np.full((n_contexts, n_actions), 1.0 / n_actions))


@dataclass(frozen=True)
class MixProfile:
    """Sample counts of the logged and augmentation sources.

    ``alpha`` is kept as the exact rational ``n_aug / N``.
    """

    n_log: int
    n_aug: int

    def __post_init__(self):
        for name in ("n_log", "n_aug"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise InvalidMixProfile(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.n_log + self.n_aug < 1:
            raise InvalidMixProfile("need at least one sample in total")

    @property
    def total(self) -> int:
        return self.n_log + self.n_aug

    @property
    def alpha(self) -> Fraction:
        return Fraction(self.n_aug, self.total)

    @property
    def alpha_float(self) -> float:
        return self.n_aug / self.total


def mix_policies(p_old: Policy, p_aug: Policy, mix: MixProfile) -> Policy:
    """Balanced mixture ``(1 - alpha) * p_old + alpha * p_aug``."""
    if not p_old.same_labels(p_aug):
        raise ShapeMismatch(f"policy shapes differ: {p_old.shape} vs {p_aug.shape}")
    if mix.n_aug == 0:
        return p_old
    if mix.n_log == 0:
        return p_aug
    table = (mix.n_log * p_old.table + mix.n_aug * p_aug.table) / mix.total
    return Policy(table, p_old.context_ids, p_old.action_ids)


@dataclass(frozen=True)
class Environment:
    """Simulation ground truth: context distribution and per-cell reward law.

    ``reward_kind`` is ``"bernoulli"`` (variance implied by the mean) or
    ``"gaussian"`` (fixed variance per cell, given by ``reward_variance``).
    """

    context_probs: np.ndarray
    mean_reward: np.ndarray
    reward_kind: str = "bernoulli"
    reward_variance: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = _frozen(self.context_probs)
        mean = _frozen(self.mean_reward)
        if probs.ndim != 1 or mean.ndim != 2 or mean.shape[0] != probs.shape[0]:
            raise InvalidEnvironment(
                f"context_probs {probs.shape} and mean_reward {mean.shape} are inconsistent"
            )
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > ROW_TOL:
            raise InvalidEnvironment("context_probs must be non-negative and sum to 1")
        if not np.all(np.isfinite(mean)):
            raise InvalidEnvironment("mean_reward must be finite")
        if self.reward_kind == "bernoulli":
            if np.any(mean < 0) or np.any(mean > 1):
                raise InvalidEnvironment("bernoulli means must lie in [0, 1]")
            implied = mean * (1.0 - mean)
            if self.reward_variance is not None:
                given = np.broadcast_to(np.asarray(self.reward_variance, dtype=float), mean.shape)
                if np.max(np.abs(given - implied), initial=0.0) > ROW_TOL:
                    raise InvalidEnvironment("bernoulli reward_variance must equal mean * (1 - mean)")
            var = implied
        elif self.reward_kind == "gaussian":
            if self.reward_variance is None:
                raise InvalidEnvironment("gaussian rewards need reward_variance")
            var = np.broadcast_to(np.asarray(self.reward_variance, dtype=float), mean.shape)
        else:
            raise InvalidEnvironment(f"unknown reward_kind {self.reward_kind!r}")
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise InvalidEnvironment("reward variances must be finite and non-negative")
        object.__setattr__(self, "context_probs", probs)
        object.__setattr__(self, "mean_reward", mean)
        object.__setattr__(self, "reward_variance", _frozen(var))

    @classmethod
    def bernoulli(cls, context_probs, mean_reward) -> "Environment":
        return cls(context_probs, mean_reward, "bernoulli")

    @classmethod
    def gaussian(cls, context_probs, mean_reward, sigma) -> "Environment":
        return cls(context_probs, mean_reward, "gaussian", np.square(sigma))

    @property
    def shape(self) -> tuple:
        return self.mean_reward.shape

    @property
    def n_contexts(self) -> int:
        return self.mean_reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.mean_reward.shape[1]

    def sample_rewards(self, rng: np.random.Generator, contexts, actions) -> np.ndarray:
        mean = self.mean_reward[contexts, actions]
        if self.reward_kind == "bernoulli":
            return (rng.random(mean.shape) < mean).astype(float)
        sd = np.sqrt(self.reward_variance[contexts, actions])
        return mean + sd * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class SecondMomentModel:
    """Working estimate ``m(x, a)`` of ``E[r^2 | x, a]``."""

    table: np.ndarray
    provenance: str = "fitted"

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 2 or np.any(table < 0) or not np.all(np.isfinite(table)):
            raise ShapeMismatch("second moments must be a finite non-negative 2-d table")
        object.__setattr__(self, "table", table)

    @property
    def shape(self) -> tuple:
        return self.table.shape


def second_moment(env: Environment) -> SecondMomentModel:
    """Exact ``E[r^2] = mean^2 + variance`` for every cell."""
    return SecondMomentModel(env.mean_reward**2 + env.reward_variance, "exact_from_env")


def uniform_second_moment(shape: Sequence[int], c: float = 1.0) -> SecondMomentModel:
    return SecondMomentModel(np.full(tuple(shape), float(c)), f"uniform_constant({c!r})")


def fit_second_moment(data: "LoggedDataset", prior_strength: float = 1.0) -> SecondMomentModel:
    """Per-cell mean of observed ``r^2`` shrunk toward the global mean.

    Cells never observed fall back to the global mean, so every entry stays
    positive whenever any reward is non-zero.
    """
    shape = data.log_policy.shape
    r2 = data.rewards**2
    glob = float(r2.mean()) if r2.size else 1.0
    sums = np.zeros(shape)
    counts = np.zeros(shape)
    np.add.at(sums, (data.contexts, data.actions), r2)
    np.add.at(counts, (data.contexts, data.actions), 1.0)
    table = (sums + prior_strength * glob) / (counts + prior_strength)
    return SecondMomentModel(table, "fitted")


def true_utility(p: Policy, env: Environment) -> float:
    """Expected reward ``sum_x Pr(x) sum_a r(x, a) pi(a|x)`` of a policy."""
    if p.shape != env.shape:
        raise ShapeMismatch(f"policy {p.shape} vs environment {env.shape}")
    return float(env.context_probs @ np.sum(p.table * env.mean_reward, axis=1))


@dataclass(frozen=True)
class LoggedDataset:
    """Logged ``(context, action, reward, source)`` records.

    Propensities are never stored; they are recomputed from ``log_policy``
    and ``aug_policy`` on demand.
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    sources: np.ndarray
    log_policy: Policy
    aug_policy: Optional[Policy] = None
    mix: Optional[MixProfile] = field(default=None)

    def __post_init__(self):
        ctx = np.asarray(self.contexts, dtype=np.int64)
        act = np.asarray(self.actions, dtype=np.int64)
        rew = np.asarray(self.rewards, dtype=float)
        src = np.asarray(self.sources, dtype=np.int8)
        if not (ctx.shape == act.shape == rew.shape == src.shape) or ctx.ndim != 1:
            raise ShapeMismatch("record columns must be 1-d and of equal length")
        K, D = self.log_policy.shape
        if ctx.size and (ctx.min() < 0 or ctx.max() >= K or act.min() < 0 or act.max() >= D):
            raise ShapeMismatch("record references an unknown context or action id")
        if np.any((src != LOG) & (src != AUG)):
            raise ShapeMismatch("sources must be 'log' or 'aug'")
        if self.aug_policy is not None and not self.log_policy.same_labels(self.aug_policy):
            raise ShapeMismatch("log and aug policies have different labels")
        if np.any(src == AUG) and self.aug_policy is None:
            raise ShapeMismatch("aug records present but no augmentation policy attached")
        for name, arr in (("contexts", ctx), ("actions", act), ("rewards", rew), ("sources", src)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.mix is not None:
            n_log, n_aug = self.counts()
            if (n_log, n_aug) != (self.mix.n_log, self.mix.n_aug):
                raise CountMismatch(
                    f"dataset holds {n_log} log / {n_aug} aug records, mix says "
                    f"{self.mix.n_log} / {self.mix.n_aug}"
                )

    def __len__(self) -> int:
        return int(self.contexts.size)

    def counts(self) -> tuple:
        n_aug = int(np.count_nonzero(self.sources == AUG))
        return len(self) - n_aug, n_aug

    def source_policy_probs(self) -> np.ndarray:
        """Propensity of each record under the policy that generated it."""
        p = self.log_policy.table[self.contexts, self.actions]
        if self.aug_policy is not None:
            aug = self.sources == AUG
            p = np.where(aug, self.aug_policy.table[self.contexts, self.actions], p)
        return p

    @classmethod
    def combine(cls, log_part: "LoggedDataset", aug_part: "LoggedDataset") -> "LoggedDataset":
        """Join a log-only dataset with an augmentation dataset.

        Every record of ``aug_part`` is re-tagged as an augmentation record
        generated by its attached policy.
        """
        mix = MixProfile(len(log_part), len(aug_part))
        aug_policy = aug_part.aug_policy if aug_part.aug_policy is not None else aug_part.log_policy
        return cls(
            np.concatenate([log_part.contexts, aug_part.contexts]),
            np.concatenate([log_part.actions, aug_part.actions]),
            np.concatenate([log_part.rewards, aug_part.rewards]),
            np.concatenate(
                [np.full(len(log_part), LOG, np.int8), np.full(len(aug_part), AUG, np.int8)]
            ),
            log_part.log_policy,
            aug_policy,
            mix,
        )
