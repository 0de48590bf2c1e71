"""Experiment harness: operator estimation and policy evaluation over the chain.

Each repetition draws fresh Dirichlet policies (behaviour, and a raw target
mixed toward the behaviour by beta), runs every configured estimator on
shared trajectories, and records MSE curves against exact targets.
Repetitions get pre-assigned seeds (base seed + repetition index) and run in
a process pool capped by the CIS_THREADS environment variable; aggregation
reduces in repetition order, so results do not depend on the worker count.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import repeat

import numpy as np

from . import _kernels
from .environments import ChainSpec, build_chain, random_dirichlet_policy, random_q_function
from .errors import ConfigError, SupportViolationError
from .estimators import EstimatorScheme, parse_scheme
from .exact import exact_operator_all, return_pmfs, reward_pmfs, solve_q_pi, state_marginals
from .learning import (
    mse_pair_weights,
    MSE_WEIGHTINGS,
    REPR_KINDS,
    UPDATE_MODES,
    policy_cum,
    run_policy_evaluation,
    sample_episodes,
)
from .mdp import check_support_condition, mix_policies, state_value
from .rng import make_rng

Q_TARGET_VARIANCE = 0.1  # Gaussian variance of the operator experiment's Q-tables

EXPERIMENTS = ("operator", "policy_eval")

OPERATOR_DEFAULT_ESTIMATORS = ("ois", "pdis", "rcis:oracle", "scis:oracle")
POLICY_EVAL_DEFAULT_ESTIMATORS = (
    "ois",
    "pdis",
    "rcis:oracle",
    "rcis:online",
    "scis:oracle",
    "scis:online",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment run (one parameter setting)."""

    experiment: str
    chain_length: int = 6
    noise: float = 0.1
    extra_actions: int = 0
    gamma: float = 0.99
    alpha: float = 0.1
    beta: float = 0.5
    n: int = 5
    samples: int = 1000
    episodes: int = 2000
    repetitions: int = 100
    seed: int = 0
    estimators: tuple[str, ...] = OPERATOR_DEFAULT_ESTIMATORS
    repr_kind: str = "tabular"
    update_mode: str = "update-then-query"
    mse_weighting: str = "uniform"
    episode_cap: int = 100
    ci_level: float = 0.95
    resamples: int = 1000

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.chain_length < 2:
            raise ConfigError("chain-length must be at least 2")
        if not (0.0 <= self.noise <= 1.0):
            raise ConfigError(f"noise must lie in [0, 1], got {self.noise}")
        if self.extra_actions < 0:
            raise ConfigError("extra-actions must be non-negative")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        for name, value in (
            ("n", self.n),
            ("samples", self.samples),
            ("repetitions", self.repetitions),
            ("episode-cap", self.episode_cap),
            ("resamples", self.resamples),
        ):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.episodes < 0:
            # 0 is allowed: the run then reports only the zero-initialisation error
            raise ConfigError(f"episodes must be non-negative, got {self.episodes}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        for desc in self.estimators:
            try:
                scheme = parse_scheme(desc)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if self.experiment == "operator" and scheme.mode == "online":
                raise ConfigError(
                    f"estimator {desc!r}: online weight estimation is only available in policy-eval"
                )
        if self.repr_kind not in REPR_KINDS:
            raise ConfigError(f"repr must be one of {REPR_KINDS}")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"update-mode must be one of {UPDATE_MODES}")
        if self.mse_weighting not in MSE_WEIGHTINGS:
            raise ConfigError(f"mse-weighting must be one of {MSE_WEIGHTINGS}")
        if not (0.0 < self.ci_level < 1.0):
            raise ConfigError("ci-level must lie in (0, 1)")

    def chain_spec(self) -> ChainSpec:
        return ChainSpec(
            n_interior=self.chain_length,
            noise=self.noise,
            extra_actions=self.extra_actions,
            gamma=self.gamma,
        )

    def schemes(self) -> list[EstimatorScheme]:
        return [parse_scheme(d) for d in self.estimators]


_CONFIG_KEYS = (
    ("experiment", "experiment", str),
    ("chain-length", "chain_length", int),
    ("noise", "noise", float),
    ("extra-actions", "extra_actions", int),
    ("gamma", "gamma", float),
    ("alpha", "alpha", float),
    ("beta", "beta", float),
    ("n", "n", int),
    ("samples", "samples", int),
    ("episodes", "episodes", int),
    ("repetitions", "repetitions", int),
    ("seed", "seed", int),
    ("estimators", "estimators", "estimators"),
    ("repr", "repr_kind", str),
    ("update-mode", "update_mode", str),
    ("mse-weighting", "mse_weighting", str),
    ("episode-cap", "episode_cap", int),
    ("ci-level", "ci_level", float),
    ("resamples", "resamples", int),
)

CONFIG_KEY_NAMES = tuple(k for k, _, _ in _CONFIG_KEYS)


def default_config(experiment: str) -> ExperimentConfig:
    if experiment == "operator":
        return ExperimentConfig(experiment="operator")
    if experiment == "policy_eval":
        return ExperimentConfig(
            experiment="policy_eval",
            n=3,
            repetitions=500,
            estimators=POLICY_EVAL_DEFAULT_ESTIMATORS,
        )
    raise ConfigError(f"unknown experiment {experiment!r}")


def config_to_text(config: ExperimentConfig) -> str:
    """Flat key-value serialization of the effective config (round-trippable)."""
    lines = []
    for key, attr, kind in _CONFIG_KEYS:
        value = getattr(config, attr)
        if kind == "estimators":
            text = ",".join(value)
        elif kind is float:
            text = repr(float(value))
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat key-value format; unknown keys are rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEY_NAMES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        out[key] = value
    return out


def config_from_mapping(experiment: str, mapping: dict[str, str]) -> ExperimentConfig:
    """Build a config from string key-value overrides on top of the defaults."""
    base = default_config(experiment)
    kwargs = {}
    for key, value in mapping.items():
        for name, attr, kind in _CONFIG_KEYS:
            if name != key:
                continue
            try:
                if kind == "estimators":
                    kwargs[attr] = tuple(tok.strip() for tok in value.split(",") if tok.strip())
                elif kind is int:
                    kwargs[attr] = int(value)
                elif kind is float:
                    kwargs[attr] = float(value)
                else:
                    kwargs[attr] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
            break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if kwargs.get("experiment", experiment) != experiment:
        raise ConfigError(
            f"config file names experiment {kwargs['experiment']!r} "
            f"but the {experiment!r} subcommand was invoked"
        )
    kwargs.pop("experiment", None)
    return replace(base, **kwargs)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()


@dataclass(frozen=True)
class RunResult:
    """Aggregated curves for one run: per estimator, (step, mean, ci_lo, ci_hi) rows."""

    config: ExperimentConfig
    curves: dict[str, np.ndarray]
    seed: int
    config_hash: str

    def __post_init__(self):
        for name, rows in self.curves.items():
            if np.any(rows[:, 2] > rows[:, 1]) or np.any(rows[:, 1] > rows[:, 3]):
                raise ValueError(f"curve {name!r} violates ci_lo <= mean <= ci_hi")


def bootstrap_ci(samples, level: float, resamples: int, rng) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of a sample vector."""
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("bootstrap_ci needs a non-empty 1-D sample vector")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    idx = rng.integers(0, arr.size, size=(resamples, arr.size))
    means = arr[idx].mean(axis=1)
    lo = float(np.quantile(means, (1.0 - level) / 2.0))
    hi = float(np.quantile(means, (1.0 + level) / 2.0))
    return lo, hi


def _worker_count(repetitions: int) -> int:
    env = os.environ.get("CIS_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError(f"CIS_THREADS must be an integer, got {env!r}") from exc
        if cap < 1:
            raise ConfigError("CIS_THREADS must be at least 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, repetitions))


def _run_repetitions(worker, config: ExperimentConfig) -> list[np.ndarray]:
    reps = config.repetitions
    workers = _worker_count(reps)
    if workers == 1:
        return [worker(config, r) for r in range(reps)]
    chunk = max(1, reps // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(worker, repeat(config), range(reps), chunksize=chunk))


def _draw_instance(config: ExperimentConfig, rng):
    """Per-repetition policies: behaviour mu and mixed target beta*pi + (1-beta)*mu."""
    mdp = build_chain(config.chain_spec())
    pi_raw = random_dirichlet_policy(mdp, rng)
    mu = random_dirichlet_policy(mdp, rng)
    target = mix_policies(pi_raw, mu, config.beta)
    if not check_support_condition(target, mu):
        raise SupportViolationError(-1, -1, "drawn target policy escapes behaviour support")
    return mdp, target, mu


def _operator_rep(config: ExperimentConfig, r: int) -> np.ndarray:
    """One operator-estimation repetition: mean squared error curve per estimator.

    Returns an (n_estimators, samples) array; MSE at sample m averages the
    squared error of the running-mean estimate over the covered start pairs
    (all non-terminal pairs under uniform weighting, the initial
    distribution's pairs under "nu").
    """
    rng = make_rng(config.seed + r)
    mdp, target, mu = _draw_instance(config, rng)
    q = random_q_function(mdp, Q_TARGET_VARIANCE, rng)
    n = config.n
    exact_vals = exact_operator_all(mdp, target, q, n)
    v_pi = np.array([state_value(q, target, x) for x in range(mdp.n_states)])

    t = mdp.tables()
    A = t.n_actions
    mu_mat = mu.matrix(A)
    mu_cum = policy_cum(mu, A)
    pi_mat = target.matrix(A)
    schemes = config.schemes()
    kinds = [_kernel_kind(s) for s in schemes]
    need_rcis = any(s.kind == "rcis" for s in schemes)
    need_scis = any(s.kind == "scis" for s in schemes)
    need_reward = any(s.kind == "reward_cis" for s in schemes)

    all_pairs, pair_w = mse_pair_weights(mdp, config.mse_weighting)
    pairs = [
        ((int(x), int(a)), w) for (x, a), w in zip(all_pairs, pair_w) if w > 0.0
    ]
    mse = np.zeros((config.samples, len(schemes)))
    denom = np.arange(1, config.samples + 1, dtype=float)[:, None]
    out = np.empty((config.samples, len(schemes)))
    for (x, a), weight in pairs:
        rcis_table: dict = {}
        scis_ratio = np.zeros((1, 1))
        reward_table: dict = {}
        if need_rcis:
            mu_pmf = return_pmfs(mdp, mu, (x, a), n)[n - 1]
            pi_pmf = return_pmfs(mdp, target, (x, a), n)[n - 1]
            rcis_table = {gq: pi_pmf.get(gq, 0.0) / mass for gq, mass in mu_pmf.items()}
        if need_scis:
            m_mu = state_marginals(mdp, mu, (x, a), n)
            m_pi = state_marginals(mdp, target, (x, a), n)
            scis_ratio = np.where(m_mu > 0, m_pi / np.where(m_mu > 0, m_mu, 1.0), 0.0)
        if need_reward:
            mu_pmfs = reward_pmfs(mdp, mu, (x, a), n)
            pi_pmfs = reward_pmfs(mdp, target, (x, a), n)
            for step in range(1, n):
                for rq, mass in mu_pmfs[step].items():
                    reward_table[(step, rq)] = pi_pmfs[step].get(rq, 0.0) / mass
        uniforms = rng.random((config.samples, 2 * n))
        _kernels.operator_estimates(
            t.n_act, t.off, t.ns, t.rew, t.cum, A,
            mu_mat, mu_cum, pi_mat,
            x, a, n, config.gamma,
            v_pi, kinds, rcis_table, scis_ratio, reward_table,
            uniforms, out,
        )
        running = np.cumsum(out, axis=0) / denom
        mse += weight * (running - exact_vals[x, a]) ** 2
    return np.ascontiguousarray(mse.T)


def _kernel_kind(scheme: EstimatorScheme) -> int:
    return {
        "ois": _kernels.OIS,
        "pdis": _kernels.PDIS,
        "uncorrected": _kernels.UNCORRECTED,
        "rcis": _kernels.RCIS,
        "scis": _kernels.SCIS,
        "reward_cis": _kernels.REWARD_CIS,
    }[scheme.kind]


def _policy_eval_rep(config: ExperimentConfig, r: int) -> np.ndarray:
    """One policy-evaluation repetition: per-episode MSE curve per estimator.

    All estimators replay the same behaviour episodes (drawn once per
    repetition), so with beta = 0 their learning runs coincide.
    """
    rng = make_rng(config.seed + r)
    mdp, target, mu = _draw_instance(config, rng)
    q_pi = solve_q_pi(mdp, target, tol=1e-10)
    batch = sample_episodes(mdp, mu, config.episodes, config.episode_cap, rng)
    curves = []
    for scheme in config.schemes():
        _, mse = run_policy_evaluation(
            mdp,
            target,
            mu,
            scheme,
            repr_kind=config.repr_kind,
            n=config.n,
            alpha=config.alpha,
            episode_cap=config.episode_cap,
            update_mode=config.update_mode,
            mse_weighting=config.mse_weighting,
            episode_batch=batch,
            q_pi=q_pi,
        )
        curves.append(mse)
    return np.stack(curves)


def _aggregate(config: ExperimentConfig, rep_curves: list[np.ndarray], first_step: int) -> RunResult:
    arr = np.stack(rep_curves)  # (reps, n_est, steps)
    reps, n_est, steps = arr.shape
    boot_rng = make_rng(config.seed, stream=1)
    idx = boot_rng.integers(0, reps, size=(config.resamples, reps))
    counts = np.zeros((config.resamples, reps))
    np.add.at(counts, (np.repeat(np.arange(config.resamples), reps), idx.ravel()), 1.0)
    lo_q = (1.0 - config.ci_level) / 2.0
    hi_q = (1.0 + config.ci_level) / 2.0
    curves: dict[str, np.ndarray] = {}
    step_idx = np.arange(first_step, first_step + steps, dtype=float)
    for e, name in enumerate(config.estimators):
        M = arr[:, e, :]
        mean = M.mean(axis=0)
        boot_means = counts @ M / reps
        lo = np.quantile(boot_means, lo_q, axis=0)
        hi = np.quantile(boot_means, hi_q, axis=0)
        lo = np.minimum(lo, mean)
        hi = np.maximum(hi, mean)
        curves[name] = np.column_stack([step_idx, mean, lo, hi])
    return RunResult(config=config, curves=curves, seed=config.seed, config_hash=config_hash(config))


def run_operator_estimation(config: ExperimentConfig) -> RunResult:
    """MSE of running-mean operator estimates as a function of sample count."""
    if config.experiment != "operator":
        raise ConfigError("config is not an operator-estimation config")
    rep_curves = _run_repetitions(_operator_rep, config)
    return _aggregate(config, rep_curves, first_step=1)


def run_policy_evaluation_experiment(config: ExperimentConfig) -> RunResult:
    """Learning-curve MSE of n-step TD policy evaluation, per estimator."""
    if config.experiment != "policy_eval":
        raise ConfigError("config is not a policy-evaluation config")
    rep_curves = _run_repetitions(_policy_eval_rep, config)
    return _aggregate(config, rep_curves, first_step=0)


CSV_COLUMNS = (
    "experiment,estimator,chain_length,noise,n,beta,extra_actions,alpha,gamma,"
    "step,mean_mse,ci_lo,ci_hi,repetitions,seed"
)


def write_csv(result: RunResult, out) -> None:
    """Emit the run as CSV, one row per estimator and step, full-precision numbers."""
    cfg = result.config
    out.write(CSV_COLUMNS + "\n")
    prefix = (
        f"{cfg.experiment},{{est}},{cfg.chain_length},{repr(cfg.noise)},{cfg.n},"
        f"{repr(cfg.beta)},{cfg.extra_actions},{repr(cfg.alpha)},{repr(cfg.gamma)}"
    )
    suffix = f"{cfg.repetitions},{cfg.seed}"
    for name in cfg.estimators:
        rows = result.curves[name]
        head = prefix.format(est=name)
        for step, mean, lo, hi in rows:
            out.write(
                f"{head},{int(step)},{float(mean)!r},{float(lo)!r},{float(hi)!r},{suffix}\n"
            )
