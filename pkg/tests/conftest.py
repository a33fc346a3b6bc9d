import numpy as np
import pytest

from mval import Environment, MixProfile, Policy


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_by_three():
    """Small fixed instance reused across modules (2 contexts, 3 actions)."""
    env = Environment.bernoulli([0.5, 0.5], [[0.8, 0.2, 0.5], [0.1, 0.6, 0.3]])
    p_old = Policy([[0.7, 0.2, 0.1], [0.2, 0.2, 0.6]])
    p_target = Policy([[0.2, 0.5, 0.3], [0.5, 0.4, 0.1]])
    return env, p_old, p_target, MixProfile(8, 2)


def random_policy(rng, K, D, p_zero=0.0):
    t = rng.dirichlet(np.ones(D), size=K)
    if p_zero:
        mask = rng.random((K, D)) < p_zero
        mask[np.arange(K), rng.integers(D, size=K)] = False
        t = np.where(mask, 0.0, t)
        t /= t.sum(axis=1, keepdims=True)
    return Policy(t)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
