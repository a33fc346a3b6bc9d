"""Pre-computed augmentation policies and balanced-estimator ERM over a
linear-softmax policy class.

A feature tensor has shape ``(n_contexts, n_actions, n_features)``; the
policy in context ``x`` is ``softmax(features[x] @ w)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_scalar
from sklearn.utils.validation import check_array, check_is_fitted

from .core import LoggedDataset, MixProfile, Policy, SecondMomentModel, mix_policies, uniform_second_moment
from .exceptions import DimMismatch, DivergedObjective, InfiniteObjective, ShapeMismatch, ZeroBalancedPropensity

USER_DIM = 5
ITEM_DIM = 5
CROSS_DIM = USER_DIM * ITEM_DIM
LOGIT_CLIP = 50.0
ARMIJO_C = 1e-4


@dataclass(frozen=True)
class LearnerParams:
    w: np.ndarray
    training_log: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"w": [float(v) for v in self.w]}


def featurize(u, item) -> np.ndarray:
    """All pairwise products ``u_i * item_j``, row-major in ``i``."""
    return np.outer(np.asarray(u, float), np.asarray(item, float)).ravel()


def cross_features(users, items) -> np.ndarray:
    """Stack ``featurize(users[x], items[x, j])`` into a ``(K, D, 25)`` tensor."""
    users = np.asarray(users, float)
    items = np.asarray(items, float)
    if users.ndim != 2 or items.ndim != 3 or items.shape[0] != users.shape[0]:
        raise DimMismatch(f"users {users.shape} and items {items.shape} are inconsistent")
    K, D, _ = items.shape
    return np.einsum("ki,kjl->kjil", users, items).reshape(K, D, -1)


def _check_features(features, w) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim != 3:
        raise DimMismatch(f"features must be (contexts, actions, dims), got {features.shape}")
    if features.shape[2] != np.size(w):
        raise DimMismatch(f"features have {features.shape[2]} dims, weights have {np.size(w)}")
    return features


def _softmax(features: np.ndarray, w: np.ndarray):
    z = features @ w
    clipped = np.abs(z) > LOGIT_CLIP
    z = np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), clipped


def policy_from_params(params, features) -> Policy:
    """Softmax policy (temperature 1) induced by weights on a feature tensor."""
    w = np.asarray(getattr(params, "w", params), dtype=float)
    features = _check_features(features, w)
    pi, _ = _softmax(features, w)
    return Policy(pi)


def _table(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "table", obj), dtype=float)


def op2_objective(params, features, p_old, target_or_envelope, m, alpha: float):
    """Summed per-context variance objective of a parameterized augmentation
    policy, with its exact gradient.

    Returns
    -------
    value: float
        ``sum_x sum_a T(a|x)^2 m(x,a) / ((1 - alpha) q(a|x) + alpha pi_w(a|x))``
        where ``T`` is the target (or envelope) table.
    gradient: ndarray
        Gradient with respect to ``w``; zero through clipped logits.
    """
    w = np.asarray(getattr(params, "w", params), dtype=float)
    features = _check_features(features, w)
    q = _table(p_old)
    c = _table(target_or_envelope) ** 2 * _table(m)
    if not (q.shape == c.shape == features.shape[:2]):
        raise ShapeMismatch("features, logging policy and target disagree in shape")
    pi, clipped = _softmax(features, w)
    d = (1.0 - alpha) * q + alpha * pi
    live = c > 0
    if np.any(live & (d <= 0)):
        raise InfiniteObjective("zero denominator under a positive weight")
    ratio = np.zeros_like(c)
    ratio[live] = c[live] / d[live]
    value = float(ratio.sum())
    g_pi = np.zeros_like(c)
    g_pi[live] = -alpha * ratio[live] / d[live]
    g_z = pi * (g_pi - np.sum(pi * g_pi, axis=1, keepdims=True))
    g_z[clipped] = 0.0
    return value, np.einsum("ka,kad->d", g_z, features)


def _descend(fun, w0: np.ndarray, steps: int, step_size: float, tol: float):
    """Gradient descent with Armijo backtracking (halving); monotone by construction."""
    w = w0.copy()
    f, g = fun(w)
    if not np.isfinite(f):
        raise DivergedObjective(f"objective is {f!r} at the starting point")
    log = [f]
    t = step_size
    for _ in range(steps):
        gg = float(g @ g)
        if gg <= tol**2:
            break
        while True:
            w_new = w - t * g
            f_new, g_new = fun(w_new)
            if np.isfinite(f_new) and f_new <= f - ARMIJO_C * t * gg:
                break
            t *= 0.5
            if t < 1e-16:
                return w, log
        if not np.all(np.isfinite(g_new)):
            raise DivergedObjective("gradient became non-finite")
        w, f, g = w_new, f_new, g_new
        log.append(f)
        t *= 2.0
    return w, log


def precomputed_mval_fit(
    features,
    p_old,
    target_or_envelope,
    m=None,
    alpha: float = 0.1,
    steps: int = 500,
    step_size: float = 1.0,
    tol: float = 1e-10,
) -> LearnerParams:
    """Fit a linear-softmax augmentation policy minimizing :func:`op2_objective`.

    Starts from ``w = 0`` (the uniform policy).
    """
    features = np.asarray(features, dtype=float)
    if m is None:
        m = uniform_second_moment(features.shape[:2])
    w0 = np.zeros(features.shape[2])
    w, log = _descend(
        lambda w: op2_objective(w, features, p_old, target_or_envelope, m, alpha),
        w0, steps, step_size, tol,
    )
    return LearnerParams(w, tuple(log))


def balanced_objective(params, data: LoggedDataset, p_old: Policy, p_aug: Policy, mix: MixProfile, features):
    """Balanced estimate of the softmax policy's value and its gradient."""
    w = np.asarray(getattr(params, "w", params), dtype=float)
    features = _check_features(features, w)
    bal = mix_policies(p_old, p_aug, mix).table[data.contexts, data.actions]
    if np.any(bal <= 0):
        raise ZeroBalancedPropensity("a record has zero balanced propensity")
    coef = data.rewards / (len(data) * bal)
    pi, clipped = _softmax(features, w)
    p_i = pi[data.contexts, data.actions]
    value = float(coef @ p_i)
    acc = np.zeros_like(pi)
    np.add.at(acc, (data.contexts, data.actions), coef * p_i)
    g_z = acc - pi * acc.sum(axis=1, keepdims=True)
    g_z[clipped] = 0.0
    return value, np.einsum("ka,kad->d", g_z, features)


def erm_balanced_fit(
    data: LoggedDataset,
    p_old: Policy,
    p_aug: Policy,
    mix: MixProfile,
    features,
    steps: int = 500,
    step_size: float = 1.0,
    tol: float = 1e-10,
) -> LearnerParams:
    """Maximize the balanced estimate over the linear-softmax class.

    The training log records the (non-decreasing) objective per accepted step.
    """
    if len(data) == 0:
        raise ValueError("cannot learn from an empty dataset")
    features = np.asarray(features, dtype=float)

    def neg(w):
        v, g = balanced_objective(w, data, p_old, p_aug, mix, features)
        return -v, -g

    w, log = _descend(neg, np.zeros(features.shape[2]), steps, step_size, tol)
    return LearnerParams(w, tuple(-v for v in log))


class PrecomputedMVAL(BaseEstimator):
    """Learn a context-generalizing augmentation policy ahead of time.

    Parameters
    ----------
    alpha: float
        Augmentation share ``n_aug / N``.
    max_iter: int
        Gradient steps.
    step_size: float
        Initial step for the backtracking line search.
    """

    def __init__(self, alpha: float = 0.1, max_iter: int = 500, step_size: float = 1.0, tol: float = 1e-10):
        self.alpha = alpha
        self.max_iter = max_iter
        self.step_size = step_size
        self.tol = tol

    def fit(self, X, logging_policy, target, second_moment: Optional[SecondMomentModel] = None):
        X = check_array(X, allow_nd=True)
        check_scalar(self.alpha, "alpha", (int, float), min_val=0, max_val=1, include_boundaries="right")
        check_scalar(self.max_iter, "max_iter", int, min_val=0)
        params = precomputed_mval_fit(
            X, logging_policy, target, second_moment, self.alpha, self.max_iter, self.step_size, self.tol
        )
        self.coef_ = params.w
        self.training_log_ = list(params.training_log)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, allow_nd=True)
        return np.array(policy_from_params(self.coef_, X).table)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


class BalancedERM(BaseEstimator):
    """Policy learner maximizing the balanced estimate on logged data."""

    def __init__(self, max_iter: int = 500, step_size: float = 1.0, tol: float = 1e-10):
        self.max_iter = max_iter
        self.step_size = step_size
        self.tol = tol

    def fit(self, X, data: LoggedDataset, logging_policy: Policy, aug_policy: Policy, mix: MixProfile):
        X = check_array(X, allow_nd=True)
        params = erm_balanced_fit(data, logging_policy, aug_policy, mix, X, self.max_iter, self.step_size, self.tol)
        self.coef_ = params.w
        self.training_log_ = list(params.training_log)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, allow_nd=True)
        return np.array(policy_from_params(self.coef_, X).table)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)
