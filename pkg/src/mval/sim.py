"""Synthetic experiment engine: policy generation, logged-data sampling,
rejection sampling and Monte-Carlo variance trials."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

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
    uniform_policy,
    uniform_second_moment,
)
from .estimators import empirical_variance
from .exceptions import NotUniformSource, RankOutOfRange
from .learner import cross_features, policy_from_params, precomputed_mval_fit
from .policyclass import mval_solve_multi, pi_max_finite
from .solver import mval_policy

STRATEGIES = ("mval", "precomputed", "target", "uniform")
MULTI_STRATEGIES = ("mval", "round_robin", "uniform")
N_BOOTSTRAP = 200


def n_threads() -> int:
    """Worker count from ``MVAL_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("MVAL_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def _map(fn, items: list) -> list:
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _key(seed) -> list:
    return [int(s) for s in np.atleast_1d(seed)]


@dataclass(frozen=True)
class PolicyGenConfig:
    """Rank-based policy generation.

    ``eta`` controls determinism (0 gives the uniform policy), ``delta`` the
    fraction of the top action's mass moved to ``target_rank`` (1-based).
    """

    eta: float = 4.0
    delta: float = 0.4
    target_rank: int = 2
    seed: object = 0
    weight_loc: float = 0.0
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if self.target_rank < 2:
            raise RankOutOfRange("target_rank must be at least 2")


@dataclass(frozen=True)
class SyntheticProblem:
    """Environment plus the user and item vectors that define its features."""

    env: Environment
    users: np.ndarray
    items: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return cross_features(self.users, self.items)


def make_synthetic_problem(
    n_contexts: int = 200,
    n_actions: int = 19,
    seed=0,
    reward_range: tuple = (0.0, 0.1),
) -> SyntheticProblem:
    """Uniform contexts, Bernoulli click rewards with means in ``reward_range``.

    User and item vectors are 5-d membership vectors (Dirichlet draws).
    """
    rng = np.random.default_rng(_key(seed))
    users = rng.dirichlet(np.ones(5), size=n_contexts)
    items = rng.dirichlet(np.ones(5), size=(n_contexts, n_actions))
    mean = rng.uniform(*reward_range, size=(n_contexts, n_actions))
    env = Environment.bernoulli(np.full(n_contexts, 1.0 / n_contexts), mean)
    return SyntheticProblem(env, users, items)


def rank_probabilities(n_actions: int, eta: float) -> np.ndarray:
    """Probability by rank (0 = best), proportional to ``(1 + eta) ** -rank``."""
    p = (1.0 + eta) ** -np.arange(n_actions, dtype=float)
    return p / p.sum()


def _ranks(scores: np.ndarray) -> np.ndarray:
    """Per-row rank of each entry, descending, ties broken by action id."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(scores.shape[1])[None, :], axis=1)
    return ranks


def generate_scored_policy(features, cfg: PolicyGenConfig) -> Policy:
    """Score actions with a random linear map and assign probabilities by rank."""
    features = np.asarray(features, dtype=float)
    rng = np.random.default_rng(_key(cfg.seed))
    v = rng.normal(cfg.weight_loc, cfg.weight_scale, size=features.shape[2])
    scores = features @ v
    probs = rank_probabilities(features.shape[1], cfg.eta)
    return Policy(probs[_ranks(scores)])


def derive_target(p_log: Policy, delta: float, target_rank: int = 2) -> Policy:
    """Move ``delta`` of the top action's mass to the action at ``target_rank``.

    Ranks follow ``p_log`` in each context (1 = most likely, ties by id).
    """
    D = p_log.n_actions
    if not 2 <= target_rank <= D:
        raise RankOutOfRange(f"target_rank must lie in [2, {D}], got {target_rank}")
    table = np.array(p_log.table)
    order = np.argsort(-table, axis=1, kind="stable")
    rows = np.arange(table.shape[0])
    top, dst = order[:, 0], order[:, target_rank - 1]
    moved = delta * table[rows, top]
    table[rows, top] -= moved
    table[rows, dst] += moved
    return Policy(table, p_log.context_ids, p_log.action_ids)


def _draw_actions(rng: np.random.Generator, table: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(table[contexts], axis=1)
    u = (1.0 - rng.random(contexts.size)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), table.shape[1] - 1)


def _draw(rng: np.random.Generator, env: Environment, table: np.ndarray, n: int):
    contexts = rng.choice(env.n_contexts, size=n, p=env.context_probs)
    actions = _draw_actions(rng, table, contexts)
    return contexts, actions, env.sample_rewards(rng, contexts, actions)


def sample_logged_data(env: Environment, p: Policy, n: int, seed, source_tag: str = "log") -> LoggedDataset:
    """Draw ``n`` i.i.d. records ``x ~ Pr(x), a ~ p(.|x), r ~ reward law``.

    ``seed`` may be an int, a sequence of ints, or a ``numpy`` Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(_key(seed))
    x, a, r = _draw(rng, env, p.table, int(n))
    if source_tag == "log":
        return LoggedDataset(x, a, r, np.full(x.size, LOG), p)
    if source_tag == "aug":
        return LoggedDataset(x, a, r, np.full(x.size, AUG), p, p)
    raise ValueError(f"unknown source tag {source_tag!r}")


def rejection_sample(uniform_log: LoggedDataset, p: Policy, seed) -> LoggedDataset:
    """Replay a uniformly logged dataset as if it had been logged under ``p``.

    A record is kept iff an action drawn from ``p(.|x_i)`` equals the logged one.
    """
    if not uniform_log.log_policy.is_uniform() or np.any(uniform_log.sources == AUG):
        raise NotUniformSource("rejection sampling needs data logged under the uniform policy")
    rng = np.random.default_rng(_key(seed))
    drawn = _draw_actions(rng, p.table, uniform_log.contexts)
    keep = drawn == uniform_log.actions
    return LoggedDataset(
        uniform_log.contexts[keep],
        uniform_log.actions[keep],
        uniform_log.rewards[keep],
        np.full(int(keep.sum()), LOG),
        p,
    )


@dataclass(frozen=True)
class TrialReport:
    strategy: str
    estimates: tuple
    empirical_variance: float
    mean: float
    variance_stderr: float
    target_index: int = 0

    @property
    def mean_stderr(self) -> float:
        return float(np.sqrt(self.empirical_variance / len(self.estimates)))


def _report(strategy: str, estimates: np.ndarray, key: list, target_index: int = 0) -> TrialReport:
    est = np.asarray(estimates, dtype=float)
    rng = np.random.default_rng(key + [0xB0075])
    boot = rng.integers(0, est.size, size=(N_BOOTSTRAP, est.size))
    boot_var = np.var(est[boot], axis=1, ddof=1)
    return TrialReport(
        strategy,
        tuple(float(v) for v in est),
        empirical_variance(est),
        float(est.mean()),
        float(np.std(boot_var, ddof=1)),
        target_index,
    )


def augmentation_policy(
    strategy: str,
    p_log: Policy,
    p_target: Policy,
    mix: MixProfile,
    m: Optional[SecondMomentModel] = None,
    features=None,
    fit_steps: int = 200,
) -> Policy:
    """Augmentation policy for a named strategy.

    ``mval`` solves each context exactly; ``precomputed`` fits a softmax
    policy over ``features``; ``target``, ``uniform`` and ``log`` reuse an
    existing policy.
    """
    if strategy == "target":
        return p_target
    if strategy == "uniform":
        return uniform_policy(*p_log.shape)
    if strategy == "log":
        return p_log
    m = m if m is not None else uniform_second_moment(p_log.shape)
    if strategy == "mval":
        return mval_policy(p_target, p_log, mix, m)[0]
    if strategy == "precomputed":
        if features is None:
            raise ValueError("the precomputed strategy needs context features")
        params = precomputed_mval_fit(features, p_log, p_target, m, mix.alpha_float, steps=fit_steps)
        return policy_from_params(params, features)
    raise ValueError(f"unknown strategy {strategy!r}")


def _weight_table(p_target: Policy, bal: Policy) -> np.ndarray:
    w = np.zeros(bal.shape)
    np.divide(p_target.table, bal.table, out=w, where=bal.table > 0)
    return w


def run_variance_trials(
    env: Environment,
    p_log: Policy,
    p_target: Policy,
    aug_strategy: str,
    n_log: int,
    n_aug: int,
    trials: int,
    seed,
    m: Optional[SecondMomentModel] = None,
    features=None,
    p_aug: Optional[Policy] = None,
    design: str = "stratified",
) -> TrialReport:
    """Repeat the log-then-augment protocol and report the estimate spread.

    Trial ``t`` draws from ``default_rng(seed + [t])``: first ``n_log``
    records under ``p_log``, then ``n_aug`` under the augmentation policy,
    and records the balanced estimate on all of them.

    With ``design="mixture"`` the per-trial split is itself random: the
    number of augmentation records is drawn as ``Binomial(N, alpha)`` before
    sampling, while the estimator still divides by the nominal mixture.
    """
    if design not in ("stratified", "mixture"):
        raise ValueError(f"unknown design {design!r}")
    mix = MixProfile(n_log, n_aug)
    if p_aug is None:
        if n_aug == 0:
            p_aug = p_log
        else:
            p_aug = augmentation_policy(aug_strategy, p_log, p_target, mix, m, features)
    bal = mix_policies(p_log, p_aug, mix)
    weights = _weight_table(p_target, bal)
    key = _key(seed)
    est = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng(key + [t])
        k_aug = int(rng.binomial(mix.total, mix.alpha_float)) if design == "mixture" else n_aug
        x, a, r = _draw(rng, env, p_log.table, mix.total - k_aug)
        total = float(weights[x, a] @ r)
        if k_aug:
            x, a, r = _draw(rng, env, p_aug.table, k_aug)
            total += float(weights[x, a] @ r)
        est[t] = total / mix.total
    return _report(aug_strategy, est, key)


def run_multi_trials(
    env: Environment,
    p_log: Policy,
    targets: Sequence[Policy],
    strategy: str,
    n_log: int,
    n_aug: int,
    trials: int,
    seed,
    m: Optional[SecondMomentModel] = None,
) -> list:
    """Evaluate several targets from one shared augmented log.

    ``round_robin`` splits ``n_aug`` evenly across the targets and divides by
    the count-weighted mixture of all sources; ``mval`` samples from the
    solution for the class envelope; ``uniform`` from the uniform policy.
    Returns one :class:`TrialReport` per target.
    """
    k = len(targets)
    mix = MixProfile(n_log, n_aug)
    m = m if m is not None else uniform_second_moment(p_log.shape)
    if strategy == "round_robin":
        counts = [n_aug // k + (1 if i < n_aug % k else 0) for i in range(k)]
        sources = [(t.table, c) for t, c in zip(targets, counts) if c]
        p_aug = Policy(sum(c * t.table for t, c in zip(targets, counts)) / n_aug)
    else:
        if strategy == "mval":
            p_aug = mval_solve_multi(pi_max_finite(targets), p_log, mix.alpha_float, m)
        elif strategy == "uniform":
            p_aug = uniform_policy(*p_log.shape)
        else:
            raise ValueError(f"unknown multi-policy strategy {strategy!r}")
        sources = [(p_aug.table, n_aug)]
    bal = mix_policies(p_log, p_aug, mix)
    weights = np.stack([_weight_table(t, bal) for t in targets])
    key = _key(seed)
    est = np.empty((trials, k))
    for t in range(trials):
        rng = np.random.default_rng(key + [t])
        totals = np.zeros(k)
        for table, n in [(p_log.table, n_log)] + sources:
            x, a, r = _draw(rng, env, table, n)
            totals += weights[:, x, a] @ r
        est[t] = totals / mix.total
    return [_report(strategy, est[:, i], key + [i], i) for i in range(k)]


@dataclass(frozen=True)
class SweepConfig:
    mode: str = "eta_sweep"
    eta_grid: tuple = (0.0, 1.0, 2.0, 4.0, 8.0)
    delta_grid: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    eta: float = 4.0
    delta: float = 0.4
    n_log: int = 900
    n_aug: int = 100
    trials: int = 50
    repeats: int = 20
    seed: int = 0
    n_contexts: int = 200
    n_actions: int = 19
    strategies: tuple = field(default=None)
    target_ranks: tuple = (2, 3, 4)
    weight_loc: float = 0.0
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("eta_sweep", "delta_sweep", "multi_policy"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        for name in ("eta_grid", "delta_grid", "target_ranks"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.strategies is None:
            default = MULTI_STRATEGIES if self.mode == "multi_policy" else STRATEGIES
            object.__setattr__(self, "strategies", default)
        else:
            object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.trials < 2 or self.repeats < 1:
            raise ValueError("need trials >= 2 and repeats >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def grid(self) -> tuple:
        return self.delta_grid if self.mode == "delta_sweep" else self.eta_grid

    def point(self, value: float) -> tuple:
        """(eta, delta) at a grid value."""
        if self.mode == "delta_sweep":
            return self.eta, value
        return value, self.delta


@dataclass(frozen=True)
class SweepRow:
    grid_value: float
    strategy: str
    variance: float
    stderr: float
    per_repeat: tuple = ()

    def to_dict(self) -> dict:
        return {
            "grid_value": self.grid_value,
            "strategy": self.strategy,
            "variance": self.variance,
            "stderr": self.stderr,
            "per_repeat": list(self.per_repeat),
        }


def _sweep_cell(cfg: SweepConfig, g: int, r: int) -> dict:
    """Variance per strategy at one (grid point, repeat)."""
    eta, delta = cfg.point(cfg.grid[g])
    problem = make_synthetic_problem(cfg.n_contexts, cfg.n_actions, [cfg.seed, r, 0])
    features = problem.features
    gen = PolicyGenConfig(eta, delta, cfg.target_ranks[0], [cfg.seed, r, 1], cfg.weight_loc, cfg.weight_scale)
    p_log = generate_scored_policy(features, gen)
    trial_key = [cfg.seed, g, r]
    out = {}
    if cfg.mode == "multi_policy":
        targets = [derive_target(p_log, delta, rank) for rank in cfg.target_ranks]
        for s in cfg.strategies:
            reports = run_multi_trials(problem.env, p_log, targets, s, cfg.n_log, cfg.n_aug, cfg.trials, trial_key)
            out[s] = float(np.mean([rep.empirical_variance for rep in reports]))
        return out
    p_target = derive_target(p_log, delta, cfg.target_ranks[0])
    for s in cfg.strategies:
        rep = run_variance_trials(
            problem.env, p_log, p_target, s, cfg.n_log, cfg.n_aug, cfg.trials, trial_key, features=features
        )
        out[s] = rep.empirical_variance
    return out


def run_sweep(cfg: SweepConfig) -> list:
    """Run the trial protocol over a grid; one :class:`SweepRow` per
    (grid value, strategy) with the mean variance over repeats and its
    standard error."""
    cells = [(g, r) for g in range(len(cfg.grid)) for r in range(cfg.repeats)]
    results = dict(zip(cells, _map(lambda gr: _sweep_cell(cfg, *gr), cells)))
    rows = []
    for g, value in enumerate(cfg.grid):
        for s in cfg.strategies:
            per = np.array([results[(g, r)][s] for r in range(cfg.repeats)])
            se = float(np.std(per, ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
            rows.append(SweepRow(float(value), s, float(per.mean()), se, tuple(float(v) for v in per)))
    return rows
