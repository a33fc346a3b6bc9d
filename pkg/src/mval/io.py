"""Readers and writers for the JSON and CSV exchange formats."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .core import AUG, LOG, SOURCE_NAMES, Environment, LoggedDataset, MixProfile, Policy, validate_policy
from .exceptions import InvalidEnvironment, ShapeMismatch
from .policyclass import FiniteClass, TrustRegion

DATASET_HEADER = ("context_id", "action_id", "reward", "source")
SWEEP_HEADER = ("grid_value", "strategy", "variance", "stderr")


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def environment_from_dict(doc: dict):
    """Parse an environment document; returns ``(env, {name: Policy})``."""
    try:
        K, D = int(doc["contexts"]), int(doc["actions"])
        probs = np.asarray(doc["context_probs"], dtype=float)
        mean = np.asarray(doc["mean_reward"], dtype=float)
    except KeyError as exc:
        raise InvalidEnvironment(f"missing field {exc.args[0]!r}") from None
    if probs.shape != (K,) or mean.shape != (K, D):
        raise InvalidEnvironment(f"declared {K} x {D} but got {probs.shape} / {mean.shape}")
    env = Environment(probs, mean, doc.get("reward_kind", "bernoulli"), doc.get("reward_variance"))
    policies = {}
    for name, table in doc.get("policies", {}).items():
        p = validate_policy(table)
        if p.shape != (K, D):
            raise ShapeMismatch(f"policy {name!r} has shape {p.shape}, expected {(K, D)}")
        policies[name] = p
    return env, policies


def environment_to_dict(env: Environment, policies: dict | None = None) -> dict:
    doc = {
        "contexts": env.n_contexts,
        "actions": env.n_actions,
        "context_probs": env.context_probs.tolist(),
        "mean_reward": env.mean_reward.tolist(),
        "reward_kind": env.reward_kind,
        "policies": {k: p.to_list() for k, p in (policies or {}).items()},
    }
    if env.reward_kind != "bernoulli":
        doc["reward_variance"] = env.reward_variance.tolist()
    return doc


def load_environment(path):
    return environment_from_dict(_read_json(path))


def save_environment(path, env: Environment, policies: dict | None = None) -> None:
    Path(path).write_text(dumps(environment_to_dict(env, policies)))


def dataset_to_csv(data: LoggedDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_HEADER)
    for x, a, r, s in zip(data.contexts, data.actions, data.rewards, data.sources):
        w.writerow((int(x), int(a), repr(float(r)), SOURCE_NAMES[s]))
    return buf.getvalue()


def dataset_from_csv(text: str, log_policy: Policy, aug_policy: Policy | None = None, mix: MixProfile | None = None) -> LoggedDataset:
    """Parse dataset CSV; propensities come from the supplied policies."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(h.strip() for h in rows[0]) != DATASET_HEADER:
        raise ShapeMismatch(f"dataset header must be {','.join(DATASET_HEADER)}")
    body = [r for r in rows[1:] if r]
    codes = {"log": LOG, "aug": AUG}
    try:
        src = [codes[r[3].strip()] for r in body]
    except KeyError as exc:
        raise ShapeMismatch(f"unknown source {exc.args[0]!r}") from None
    return LoggedDataset(
        np.array([int(r[0]) for r in body], dtype=np.int64),
        np.array([int(r[1]) for r in body], dtype=np.int64),
        np.array([float(r[2]) for r in body]),
        np.array(src, dtype=np.int8),
        log_policy,
        aug_policy,
        mix,
    )


def load_dataset(path, log_policy: Policy, aug_policy: Policy | None = None, mix: MixProfile | None = None) -> LoggedDataset:
    return dataset_from_csv(Path(path).read_text(), log_policy, aug_policy, mix)


def policy_class_from_json(doc):
    """A JSON list of matrices is a finite class; ``{"center", "tau"}`` a trust region."""
    if isinstance(doc, list):
        return FiniteClass(tuple(validate_policy(t) for t in doc))
    if isinstance(doc, dict) and "center" in doc:
        return TrustRegion(validate_policy(doc["center"]), float(doc.get("tau", 1.0)), bool(doc.get("two_sided", True)))
    raise ShapeMismatch("policy class must be a list of matrices or {'center': ..., 'tau': ...}")


def features_from_json(doc: dict) -> tuple:
    """``{"contexts": [{"u": [5], "items": [[5], ...]}, ...]}`` -> (users, items)."""
    ctxs = doc["contexts"]
    users = np.array([c["u"] for c in ctxs], dtype=float)
    items = np.array([c["items"] for c in ctxs], dtype=float)
    return users, items


def features_to_json(users, items) -> dict:
    return {"contexts": [{"u": list(map(float, u)), "items": np.asarray(it).tolist()} for u, it in zip(users, items)]}


def sweep_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow((repr(r.grid_value), r.strategy, repr(r.variance), repr(r.stderr)))
    return buf.getvalue()
