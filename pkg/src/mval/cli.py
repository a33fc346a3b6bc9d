"""Command-line front end.

Every subcommand reads JSON/CSV inputs, runs one pipeline and writes a single
output (``--out`` or stdout).  Outputs are byte-stable for a fixed seed:
JSON keys are sorted, floats are written with ``repr`` and CSV rows come in a
fixed order.

Exit status is 0 on success, 1 on a domain error (the error's name is the
first token on stderr) and 2 on a usage error (``MissingRequired`` or
``UnknownFlag``).
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .checks import check_solver_oracle, check_variance_oracle
from .core import MixProfile, second_moment, true_utility, uniform_second_moment
from .estimators import (
    balanced_estimate,
    balanced_variance_closed_form,
    balanced_variance_stratified,
    ips_estimate,
    ips_variance_closed_form,
)
from .exceptions import InvalidEnvironment, MVALError, ZeroAlpha
from .learner import cross_features, erm_balanced_fit, policy_from_params, precomputed_mval_fit
from .policyclass import mval_solve_multi, pi_max, variance_bound
from .sim import STRATEGIES, SweepConfig, augmentation_policy, run_sweep, run_variance_trials
from .solver import mval_policy

COMMANDS = ("solve", "evaluate", "simulate", "sweep", "multi-eval", "learn", "oracle-check")
STOCHASTIC = ("simulate", "sweep")


class UsageError(Exception):
    """Bad command line; ``token`` is ``MissingRequired`` or ``UnknownFlag``."""

    def __init__(self, token: str, message: str):
        super().__init__(message)
        self.token = token


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        token = "MissingRequired" if "required" in message else "UnknownFlag"
        raise UsageError(token, message)


class OracleViolation(MVALError):
    """Raised by ``oracle-check``; carries the report so it is still written."""

    def __init__(self, report: str, message: str):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: Optional[int] = None
    out: Optional[str] = None
    format: str = "json"
    env: Optional[str] = None
    data: Optional[str] = None
    policy_class: Optional[str] = None
    features: Optional[str] = None
    config: Optional[str] = None
    trials: Optional[int] = None
    options: dict = field(default_factory=dict)

    @property
    def input_paths(self) -> tuple:
        return tuple(p for p in (self.env, self.data, self.policy_class, self.features, self.config) if p)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--format", choices=("csv", "json"), default="json")

    parser = _Parser(prog="mval", description="Minimum-variance augmentation logging.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    def counts(p, required=True):
        p.add_argument("--alpha-from-counts", nargs=2, type=int, metavar=("N_LOG", "N_AUG"), required=required)

    def moments(p):
        p.add_argument("--second-moment", choices=("exact", "uniform"), default="exact")

    p = add("solve", "augmentation policy for one target")
    p.add_argument("--env", required=True)
    counts(p)
    moments(p)
    p.add_argument("--target-key", default="target")
    p.add_argument("--log-key", default="log")

    p = add("evaluate", "estimate a target's value from a logged dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", choices=("balanced", "ips"), default="balanced")
    moments(p)
    p.add_argument("--target-key", default="target")
    p.add_argument("--log-key", default="log")
    p.add_argument("--aug-key", default="aug")

    p = add("simulate", "Monte-Carlo variance trials on a given environment")
    p.add_argument("--env", required=True)
    counts(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--strategy", choices=tuple(s for s in STRATEGIES if s != "precomputed"), default="mval")
    p.add_argument("--design", choices=("stratified", "mixture"), default="stratified")
    moments(p)
    p.add_argument("--target-key", default="target")
    p.add_argument("--log-key", default="log")

    p = add("sweep", "synthetic eta / delta / multi-policy sweep")
    p.add_argument("--config", required=True)

    p = add("multi-eval", "augmentation policy for a whole policy class")
    p.add_argument("--env", required=True)
    p.add_argument("--class", dest="policy_class", required=True)
    counts(p)
    moments(p)
    p.add_argument("--log-key", default="log")

    p = add("learn", "fit a linear-softmax policy")
    p.add_argument("--env", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=("precomputed", "erm"), default="precomputed")
    p.add_argument("--data")
    counts(p, required=False)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--step-size", type=float, default=1.0)
    moments(p)
    p.add_argument("--target-key", default="target")
    p.add_argument("--log-key", default="log")
    p.add_argument("--aug-key", default="aug")

    p = add("oracle-check", "closed forms and solver vs exhaustive oracles")
    p.add_argument("--max-contexts", type=int, default=3)
    p.add_argument("--max-actions", type=int, default=3)
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--solver-instances", type=int, default=1000)
    p.add_argument("--resolution", type=int, default=1000)
    return parser


_FIELDS = ("env", "data", "policy_class", "features", "config", "trials")


def parse_args(argv: Sequence[str]) -> RunConfig:
    """Parse a command line into a :class:`RunConfig`; raises :class:`UsageError`."""
    ns = vars(_build_parser().parse_args(list(argv)))
    command = ns.pop("command")
    if command in STOCHASTIC and ns.get("seed") is None:
        raise UsageError("MissingRequired", f"{command} needs --seed")
    if ns.get("seed") is not None and ns["seed"] < 0:
        raise UsageError("UnknownFlag", "--seed must be a non-negative integer")
    if command == "learn" and ns["mode"] == "erm" and not ns.get("data"):
        raise UsageError("MissingRequired", "learn --mode erm needs --data")
    base = {k: ns.pop(k, None) for k in _FIELDS}
    return RunConfig(command, ns.pop("seed"), ns.pop("out"), ns.pop("format"), options=ns, **base)


def _mix(cfg: RunConfig) -> Optional[MixProfile]:
    c = cfg.options.get("alpha_from_counts")
    return MixProfile(*c) if c else None


def _moments(cfg: RunConfig, env):
    if cfg.options.get("second_moment", "exact") == "uniform":
        return uniform_second_moment(env.shape)
    return second_moment(env)


def _policy(policies: dict, key: str):
    if key not in policies:
        raise InvalidEnvironment(f"environment has no policy named {key!r}")
    return policies[key]


def _json(obj) -> str:
    return io.dumps(obj)


def _csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _matrix_csv(table) -> str:
    return _csv(
        ("context_id", "action_id", "probability"),
        ((x, a, float(p)) for x, row in enumerate(np.asarray(table)) for a, p in enumerate(row)),
    )


def _cmd_solve(cfg: RunConfig) -> str:
    env, pols = io.load_environment(cfg.env)
    mix = _mix(cfg)
    target, log = _policy(pols, cfg.options["target_key"]), _policy(pols, cfg.options["log_key"])
    m = _moments(cfg, env)
    policy, diags = mval_policy(target, log, mix, m)
    if cfg.format == "csv":
        return _matrix_csv(policy.table)
    return _json({
        "alpha": mix.alpha_float,
        "n_log": mix.n_log,
        "n_aug": mix.n_aug,
        "policy": policy.to_list(),
        "diagnostics": [d.to_dict() for d in diags],
        "balanced_variance": balanced_variance_closed_form(target, log, policy, mix, m, env).to_dict(),
    })


def _cmd_evaluate(cfg: RunConfig) -> str:
    env, pols = io.load_environment(cfg.env)
    target, log = _policy(pols, cfg.options["target_key"]), _policy(pols, cfg.options["log_key"])
    aug = pols.get(cfg.options["aug_key"])
    data = io.load_dataset(cfg.data, log, aug)
    mix = MixProfile(*data.counts())
    aug = aug if aug is not None else log
    m = _moments(cfg, env)
    if cfg.options["estimator"] == "ips":
        est = ips_estimate(data, target)
        var = ips_variance_closed_form(target, log, aug, mix, m, env)
    else:
        est = balanced_estimate(data, target, log, aug, mix)
        var = balanced_variance_closed_form(target, log, aug, mix, m, env)
    doc = {
        "estimator": cfg.options["estimator"],
        "point_estimate": est.point_estimate,
        "n_used": est.n_used,
        "per_source_contributions": {"log": est.per_source_contributions[0], "aug": est.per_source_contributions[1]},
        "true_utility": true_utility(target, env),
        "variance": var.to_dict(),
    }
    if cfg.format == "csv":
        return _csv(("key", "value"), ((k, doc[k]) for k in ("estimator", "point_estimate", "n_used", "true_utility")))
    return _json(doc)


def _cmd_simulate(cfg: RunConfig) -> str:
    env, pols = io.load_environment(cfg.env)
    target, log = _policy(pols, cfg.options["target_key"]), _policy(pols, cfg.options["log_key"])
    mix = _mix(cfg)
    m = _moments(cfg, env)
    rep = run_variance_trials(
        env, log, target, cfg.options["strategy"], mix.n_log, mix.n_aug, cfg.trials, [cfg.seed], m=m,
        design=cfg.options["design"],
    )
    if cfg.format == "csv":
        return _csv(("trial", "estimate"), enumerate(rep.estimates))
    aug = log if mix.n_aug == 0 else augmentation_policy(cfg.options["strategy"], log, target, mix, m)
    doc = {
        "strategy": rep.strategy,
        "design": cfg.options["design"],
        "trials": len(rep.estimates),
        "mean": rep.mean,
        "empirical_variance": rep.empirical_variance,
        "variance_stderr": rep.variance_stderr,
        "true_utility": true_utility(target, env),
        "closed_form_variance": balanced_variance_closed_form(target, log, aug, mix, m, env).value,
        "stratified_variance": balanced_variance_stratified(target, log, aug, mix, m, env).value,
    }
    return _json(doc)


def _cmd_sweep(cfg: RunConfig) -> str:
    doc = json.loads(Path(cfg.config).read_text())
    doc["seed"] = cfg.seed
    try:
        sweep = SweepConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InvalidEnvironment(f"bad sweep config: {exc}") from None
    rows = run_sweep(sweep)
    if cfg.format == "csv":
        return io.sweep_rows_to_csv(rows)
    return _json({"mode": sweep.mode, "seed": sweep.seed, "rows": [r.to_dict() for r in rows]})


def _cmd_multi_eval(cfg: RunConfig) -> str:
    env, pols = io.load_environment(cfg.env)
    log = _policy(pols, cfg.options["log_key"])
    klass = io.policy_class_from_json(json.loads(Path(cfg.policy_class).read_text()))
    mix = _mix(cfg)
    if mix.n_aug == 0:
        raise ZeroAlpha("multi-eval needs a positive augmentation budget")
    m = _moments(cfg, env)
    env_ = pi_max(klass)
    aug = mval_solve_multi(env_, log, mix.alpha_float, m)
    doc = {
        "alpha": mix.alpha_float,
        "policy": aug.to_list(),
        "envelope": env_.table.tolist(),
        "variance_bound": variance_bound(env_, log, aug, mix, m, env),
    }
    members = getattr(klass, "policies", ())
    doc["member_variances"] = [balanced_variance_closed_form(p, log, aug, mix, m, env).value for p in members]
    if cfg.format == "csv":
        return _matrix_csv(aug.table)
    return _json(doc)


def _cmd_learn(cfg: RunConfig) -> str:
    env, pols = io.load_environment(cfg.env)
    log = _policy(pols, cfg.options["log_key"])
    users, items = io.features_from_json(json.loads(Path(cfg.features).read_text()))
    feats = cross_features(users, items)
    steps, step_size = cfg.options["steps"], cfg.options["step_size"]
    if cfg.options["mode"] == "erm":
        aug = pols.get(cfg.options["aug_key"])
        data = io.load_dataset(cfg.data, log, aug)
        mix = MixProfile(*data.counts())
        params = erm_balanced_fit(data, log, aug if aug is not None else log, mix, feats, steps, step_size)
    else:
        mix = _mix(cfg)
        if mix is None:
            raise UsageError("MissingRequired", "learn --mode precomputed needs --alpha-from-counts")
        target = _policy(pols, cfg.options["target_key"])
        params = precomputed_mval_fit(feats, log, target, _moments(cfg, env), mix.alpha_float, steps, step_size)
    if cfg.format == "csv":
        return _matrix_csv(policy_from_params(params, feats).table)
    return _json(params.to_dict())


def _cmd_oracle_check(cfg: RunConfig) -> str:
    o = cfg.options
    seed = cfg.seed if cfg.seed is not None else 0
    var_bad = check_variance_oracle(
        np.random.default_rng([seed, 0]), o["instances"], o["max_contexts"], o["max_actions"]
    )
    solver_bad = check_solver_oracle(
        np.random.default_rng([seed, 1]), o["solver_instances"], max(2, min(4, o["max_actions"] + 1)), o["resolution"]
    )
    doc = {
        "seed": seed,
        "variance_instances": o["instances"],
        "solver_instances": o["solver_instances"],
        "variance_violations": var_bad,
        "solver_violations": solver_bad,
        "ok": not (var_bad or solver_bad),
    }
    text = _json(doc) if cfg.format == "json" else _csv(
        ("check", "violations"), (("variance", len(var_bad)), ("solver", len(solver_bad)))
    )
    if var_bad or solver_bad:
        raise OracleViolation(text, f"{len(var_bad)} variance and {len(solver_bad)} solver violations")
    return text


_DISPATCH = {
    "solve": _cmd_solve,
    "evaluate": _cmd_evaluate,
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "multi-eval": _cmd_multi_eval,
    "learn": _cmd_learn,
    "oracle-check": _cmd_oracle_check,
}


def _emit(cfg: RunConfig, text: str) -> None:
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)


def execute(cfg: RunConfig) -> int:
    """Run a parsed command; returns the process exit status."""
    for path in cfg.input_paths:
        if not Path(path).is_file():
            print(f"FileNotFound: {path}", file=sys.stderr)
            return 1
    try:
        _emit(cfg, _DISPATCH[cfg.command](cfg))
    except UsageError as exc:
        print(f"{exc.token}: {exc}", file=sys.stderr)
        return 2
    except OracleViolation as exc:
        _emit(cfg, exc.report)
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except MVALError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"InvalidInput: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"{exc.token}: {exc}", file=sys.stderr)
        return 2
    return execute(cfg)


if __name__ == "__main__":
    sys.exit(main())
