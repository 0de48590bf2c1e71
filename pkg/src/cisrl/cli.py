"""Command-line entry point.

Subcommands: ``operator`` and ``policy-eval`` run the experiment harness and
emit the CSV schema; ``verify`` runs the exact estimator checks on the
built-in battery; ``exact-dump`` writes enumeration atoms and
return-conditioned weight tables for a chain configuration. Flag values
override config-file values, which override the defaults. Exit codes:
0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import sys

from .environments import build_chain, random_dirichlet_policy
from .errors import ConfigError, EnumerationCapError
from .estimators import return_conditioner
from .exact import enumerate_trajectories, exact_conditional_weight
from .harness import (
    config_from_mapping,
    parse_config_text,
    run_operator_estimation,
    run_policy_evaluation_experiment,
    write_csv,
)
from .mdp import mix_policies
from .rng import make_rng
from .verify import run_battery

_RUN_FLAGS = (
    # (flag, config key)
    ("--seed", "seed"),
    ("--chain-length", "chain-length"),
    ("--noise", "noise"),
    ("--n", "n"),
    ("--beta", "beta"),
    ("--extra-actions", "extra-actions"),
    ("--alpha", "alpha"),
    ("--gamma", "gamma"),
    ("--samples", "samples"),
    ("--episodes", "episodes"),
    ("--repetitions", "repetitions"),
    ("--estimators", "estimators"),
    ("--repr", "repr"),
    ("--update-mode", "update-mode"),
    ("--mse-weighting", "mse-weighting"),
    ("--episode-cap", "episode-cap"),
    ("--ci-level", "ci-level"),
    ("--resamples", "resamples"),
)

_DUMP_FLAGS = (
    ("--seed", "seed"),
    ("--chain-length", "chain-length"),
    ("--noise", "noise"),
    ("--n", "n"),
    ("--beta", "beta"),
    ("--extra-actions", "extra-actions"),
    ("--gamma", "gamma"),
)


def _add_flags(parser: argparse.ArgumentParser, flags) -> None:
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--out", default=None, help="output path (default: stdout)")
    for flag, _ in flags:
        parser.add_argument(flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cisrl",
        description="Off-policy evaluation experiments with conditional importance sampling",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    _add_flags(sub.add_parser("operator", help="operator-estimation MSE curves"), _RUN_FLAGS)
    _add_flags(sub.add_parser("policy-eval", help="policy-evaluation learning curves"), _RUN_FLAGS)
    sub.add_parser("verify", help="run the exact estimator checks")
    _add_flags(sub.add_parser("exact-dump", help="dump enumeration atoms and weight tables"), _DUMP_FLAGS)
    return parser


def _collect_mapping(args, flags) -> dict[str, str]:
    mapping: dict[str, str] = {}
    if args.config is not None:
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        mapping.update(parse_config_text(text))
    for flag, key in flags:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            mapping[key] = value
    return mapping


def _open_out(args):
    if args.out is None or args.out == "-":
        return sys.stdout, False
    return open(args.out, "w", newline=""), True


def _run_experiment(args, experiment: str) -> int:
    mapping = _collect_mapping(args, _RUN_FLAGS)
    config = config_from_mapping(experiment, mapping)
    if experiment == "operator":
        result = run_operator_estimation(config)
    else:
        result = run_policy_evaluation_experiment(config)
    out, close = _open_out(args)
    try:
        write_csv(result, out)
    finally:
        if close:
            out.close()
    return 0


def _run_verify() -> int:
    failures = 0
    for name, ok, detail in run_battery():
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        if not ok:
            failures += 1
    return 0 if failures == 0 else 1


def _run_exact_dump(args) -> int:
    mapping = _collect_mapping(args, _DUMP_FLAGS)
    allowed = {key for _, key in _DUMP_FLAGS}
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"config key {key!r} does not apply to exact-dump")
    config = config_from_mapping("operator", {**mapping, "estimators": "ois"})
    mdp = build_chain(config.chain_spec())
    rng = make_rng(config.seed)
    pi_raw = random_dirichlet_policy(mdp, rng)
    mu = random_dirichlet_policy(mdp, rng)
    target = mix_policies(pi_raw, mu, config.beta)
    out, close = _open_out(args)
    try:
        writer = csv.writer(out)
        writer.writerow(
            ["record", "x", "a", "states", "actions", "rewards", "p_mu", "p_pi", "rho", "return", "key", "weight"]
        )
        for x, a in mdp.nonterminal_pairs():
            enum = enumerate_trajectories(mdp, mu, target, (x, a), config.n)
            gamma = mdp.gamma
            for traj, p_mu, p_pi in enum.atoms:
                g = 0.0
                w = 1.0
                for r in traj.rewards:
                    g += w * r
                    w *= gamma
                writer.writerow(
                    [
                        "atom",
                        x,
                        a,
                        "|".join(str(s) for s in traj.states),
                        "|".join(str(v) for v in traj.actions),
                        "|".join(repr(r) for r in traj.rewards),
                        repr(p_mu),
                        repr(p_pi),
                        repr(p_pi / p_mu),
                        repr(g),
                        "",
                        "",
                    ]
                )
            table = exact_conditional_weight(enum, return_conditioner())
            for key in sorted(table.weights):
                writer.writerow(
                    ["weight", x, a, "", "", "", "", "", "", "", repr(key), repr(table.weights[key])]
                )
    finally:
        if close:
            out.close()
    return 0


def parse_invocation(argv=None) -> argparse.Namespace:
    """Parse argv into a validated invocation; usage errors exit with status 2."""
    return build_parser().parse_args(argv)


def execute(args: argparse.Namespace) -> int:
    """Dispatch a parsed invocation and return the exit status."""
    try:
        if args.subcommand == "operator":
            return _run_experiment(args, "operator")
        if args.subcommand == "policy-eval":
            return _run_experiment(args, "policy_eval")
        if args.subcommand == "verify":
            return _run_verify()
        if args.subcommand == "exact-dump":
            return _run_exact_dump(args)
    except (ConfigError, EnumerationCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable subcommand")


def main(argv=None) -> int:
    return execute(parse_invocation(argv))


if __name__ == "__main__":
    sys.exit(main())
