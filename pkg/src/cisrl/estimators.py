"""Per-trajectory off-policy estimators and their conditional-weight plumbing.

The general estimator replaces the full trajectory importance weight by its
conditional expectation given a functional of the trajectory (a conditioner).
Conditioning on the whole trajectory recovers ordinary importance sampling;
conditioning each reward term on the action prefix recovers per-decision
importance sampling; conditioning on the truncated return or on per-step
(state, action, reward) tuples gives the return-conditioned and
state-conditioned estimators. Weights come from a provider: oracle tables
computed by exact enumeration, or an online regression store.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingWeightError, SupportViolationError
from .exact import (
    EnumAtom,
    EnumeratedDistribution,
    exact_conditional_weight,
    quantize,
    state_marginal,
)
from .mdp import Policy, Trajectory, bootstrapped_return, importance_ratio, state_value

SCHEME_KINDS = ("ois", "pdis", "rcis", "scis", "reward_cis", "uncorrected")
_ANALYTIC = ("ois", "pdis", "uncorrected")
_CONDITIONAL = ("rcis", "scis", "reward_cis")


@dataclass(frozen=True)
class Conditioner:
    """Trajectory functional producing a canonical grouping key.

    Variants: "full" (whole trajectory), "const" (trajectory-independent),
    "return" (truncated discounted return), "reward_at" (R_t),
    "sar_at" ((X_t, A_t, R_t)), "prefix" ((X_{0:t}, A_{0:t}, R_t)) and
    "reward_seq" (the full reward sequence). Keys quantize real components to
    12 digits via `exact.quantize`.
    """

    variant: str
    t: int | None = None

    def __post_init__(self):
        per_step = self.variant in ("reward_at", "sar_at", "prefix")
        if per_step and (self.t is None or self.t < 0):
            raise ValueError(f"conditioner {self.variant!r} needs a step index t >= 0")
        if not per_step and self.t is not None:
            raise ValueError(f"conditioner {self.variant!r} takes no step index")
        if self.variant not in ("full", "const", "return", "reward_at", "sar_at", "prefix", "reward_seq"):
            raise ValueError(f"unknown conditioner variant {self.variant!r}")

    def key(self, traj: Trajectory, gamma: float):
        if self.variant == "full":
            return (
                traj.states,
                traj.actions,
                tuple(quantize(r) for r in traj.rewards),
            )
        if self.variant == "const":
            return 0
        if self.variant == "return":
            g = 0.0
            w = 1.0
            for r in traj.rewards:
                g += w * r
                w *= gamma
            return quantize(g)
        if self.variant == "reward_at":
            return quantize(traj.rewards[self.t])
        if self.variant == "sar_at":
            return (traj.state_at(self.t), traj.action_at(self.t), quantize(traj.rewards[self.t]))
        if self.variant == "prefix":
            return (
                tuple(traj.state_at(i) for i in range(self.t + 1)),
                tuple(traj.action_at(i) for i in range(self.t + 1)),
                quantize(traj.rewards[self.t]),
            )
        # reward_seq
        return tuple(quantize(r) for r in traj.rewards)

    @property
    def scf_for_return(self) -> bool:
        """Sufficient for the truncated-return target (conditional estimate stays unbiased)."""
        return self.variant in ("return", "reward_seq", "full")

    @property
    def scf_for_reward(self) -> bool:
        """Sufficient for the single-reward target R_t."""
        return self.variant in ("reward_at", "sar_at", "prefix")

    @property
    def biased_for_return(self) -> bool:
        return self.variant == "const"


def full_trajectory() -> Conditioner:
    return Conditioner("full")


def constant() -> Conditioner:
    return Conditioner("const")


def return_conditioner() -> Conditioner:
    return Conditioner("return")


def reward_at(t: int) -> Conditioner:
    return Conditioner("reward_at", t)


def state_action_reward_at(t: int) -> Conditioner:
    return Conditioner("sar_at", t)


def per_decision_prefix(t: int) -> Conditioner:
    return Conditioner("prefix", t)


def reward_sequence() -> Conditioner:
    return Conditioner("reward_seq")


@dataclass(frozen=True)
class EstimatorScheme:
    """Named estimator plus its weight source ("analytic", "oracle" or "online")."""

    kind: str
    mode: str

    @property
    def name(self) -> str:
        return self.kind if self.mode == "analytic" else f"{self.kind}:{self.mode}"


def parse_scheme(descriptor: str) -> EstimatorScheme:
    """Parse an estimator descriptor such as "ois" or "rcis:oracle"."""
    kind, _, mode = descriptor.partition(":")
    if kind in _ANALYTIC:
        if mode:
            raise ValueError(f"estimator {kind!r} takes no weight-source suffix")
        return EstimatorScheme(kind, "analytic")
    if kind in _CONDITIONAL:
        if mode not in ("oracle", "online"):
            raise ValueError(f"estimator {kind!r} needs a ':oracle' or ':online' suffix")
        return EstimatorScheme(kind, mode)
    raise ValueError(f"unknown estimator descriptor {descriptor!r}")


# Provider keys are discriminated tuples. The leading tag and window horizon
# keep groups from different conditioners or window lengths separate:
#   ("return", h, Gq)          conditional weight given the truncated return
#   ("sar", h, t, x, a, rq)    given (X_t, A_t, R_t), t >= 1
#   ("xn", h, x)               given the bootstrap state X_h
#   ("reward", h, t, rq)       given R_t, t >= 1


class OracleWeightProvider:
    """Exact conditional weights, keyed per start pair; no fallback by default."""

    def __init__(self, tables: dict | None = None, fallback_raw_rho: bool = False):
        self.tables = tables if tables is not None else {}
        self.fallback_raw_rho = fallback_raw_rho

    def get(self, start: tuple[int, int], key, raw_rho: float | None = None) -> float:
        w = self.tables.get((start, key))
        if w is None:
            if self.fallback_raw_rho and raw_rho is not None:
                return raw_rho
            raise MissingWeightError((start, key))
        return w

    def record(self, start, key, rho, psi):
        pass


class OnlineWeightProvider:
    """Adapter putting a regression WeightStore behind the provider interface."""

    def __init__(self, store):
        self.store = store

    def get(self, start, key, raw_rho=None) -> float:
        return self.store.query(start, key, raw_rho=raw_rho)

    def record(self, start, key, rho, psi):
        self.store.observe(start, key, rho, psi)


def oracle_provider_from_enum(
    enum: EnumeratedDistribution, scheme: EstimatorScheme, fallback_raw_rho: bool = False
) -> OracleWeightProvider | None:
    """Build the oracle tables one scheme needs, from a single enumeration."""
    if scheme.mode != "oracle":
        return None
    h = enum.horizon
    start = enum.start
    tables: dict = {}
    if scheme.kind == "rcis":
        table = exact_conditional_weight(enum, return_conditioner())
        for gq, w in table.weights.items():
            tables[(start, ("return", h, gq))] = w
    elif scheme.kind == "scis":
        for t in range(1, h):
            table = exact_conditional_weight(enum, state_action_reward_at(t))
            for (x, a, rq), w in table.weights.items():
                tables[(start, ("sar", h, t, x, a, rq))] = w
        m_pi = state_marginal(enum, h, "pi")
        m_mu = state_marginal(enum, h, "mu")
        for x in range(enum.mdp.n_states):
            if m_mu[x] > 0:
                tables[(start, ("xn", h, x))] = m_pi[x] / m_mu[x]
    elif scheme.kind == "reward_cis":
        for t in range(1, h):
            table = exact_conditional_weight(enum, reward_at(t))
            for rq, w in table.weights.items():
                tables[(start, ("reward", h, t, rq))] = w
    else:
        raise ValueError(f"scheme {scheme.name!r} does not use conditional weights")
    return OracleWeightProvider(tables, fallback_raw_rho=fallback_raw_rho)


def ois_estimate(traj: Trajectory, q: np.ndarray, pi: Policy, mu: Policy, gamma: float) -> float:
    """Whole bootstrapped return weighted by the full action-ratio product."""
    rho = importance_ratio(traj, pi, mu, 1, traj.horizon - 1)
    return rho * bootstrapped_return(traj, q, pi, gamma)


def pdis_estimate(traj: Trajectory, q: np.ndarray, pi: Policy, mu: Policy, gamma: float) -> float:
    """Each reward weighted only by the ratios of the actions preceding it."""
    h = traj.horizon
    acc = 0.0
    rho = 1.0
    w = 1.0
    for t in range(h):
        if t >= 1:
            x = traj.state_at(t)
            a = traj.action_at(t)
            m = mu.prob(x, a)
            if m == 0.0:
                raise SupportViolationError(x, a)
            rho *= pi.prob(x, a) / m
        acc += rho * (w * traj.rewards[t])
        w *= gamma
    return acc + rho * (w * state_value(q, pi, traj.states[-1]))


def scheme_observations(
    scheme: EstimatorScheme,
    traj: Trajectory,
    pi: Policy,
    mu: Policy,
    gamma: float,
    v_boot: float,
) -> tuple[float, list[tuple[object, float]]]:
    """Keys an online provider observes for this window, with psi values.

    Returns (rho, [(key, psi), ...]) where rho is the full window ratio
    regressed at every key. Time-0 per-step keys are omitted: with the start
    action fixed, the time-0 term needs no correction.
    """
    h = traj.horizon
    rho = importance_ratio(traj, pi, mu, 1, h - 1)
    obs: list[tuple[object, float]] = []
    if scheme.kind == "rcis":
        g = 0.0
        w = 1.0
        for r in traj.rewards:
            g += w * r
            w *= gamma
        obs.append((("return", h, quantize(g)), g))
    elif scheme.kind == "scis":
        w = 1.0
        for t in range(h):
            if t >= 1:
                obs.append(
                    (
                        ("sar", h, t, traj.state_at(t), traj.action_at(t), quantize(traj.rewards[t])),
                        w * traj.rewards[t],
                    )
                )
            w *= gamma
        obs.append((("xn", h, traj.states[-1]), w * v_boot))
    elif scheme.kind == "reward_cis":
        w = 1.0
        for t in range(h):
            if t >= 1:
                obs.append((("reward", h, t, quantize(traj.rewards[t])), w * traj.rewards[t]))
            w *= gamma
    return rho, obs


def conditional_estimate(
    traj: Trajectory,
    q: np.ndarray,
    pi: Policy,
    mu: Policy,
    scheme: EstimatorScheme,
    weights,
    gamma: float,
) -> float:
    """Evaluate a named estimator on one trajectory.

    ``weights`` is a provider (oracle or online); analytic schemes ignore it.
    """
    h = traj.horizon
    start = traj.start
    if scheme.kind == "uncorrected":
        return bootstrapped_return(traj, q, pi, gamma)
    if scheme.kind == "ois":
        return ois_estimate(traj, q, pi, mu, gamma)
    if scheme.kind == "pdis":
        return pdis_estimate(traj, q, pi, mu, gamma)

    rho = importance_ratio(traj, pi, mu, 1, h - 1)
    if scheme.kind == "rcis":
        g = 0.0
        w = 1.0
        for r in traj.rewards:
            g += w * r
            w *= gamma
        cond = weights.get(start, ("return", h, quantize(g)), raw_rho=rho)
        return cond * g + rho * (w * state_value(q, pi, traj.states[-1]))
    if scheme.kind == "scis":
        acc = 0.0
        w = 1.0
        for t in range(h):
            r = traj.rewards[t]
            if t == 0:
                acc += 1.0 * (w * r)
            else:
                key = ("sar", h, t, traj.state_at(t), traj.action_at(t), quantize(r))
                acc += weights.get(start, key, raw_rho=rho) * (w * r)
            w *= gamma
        xn = traj.states[-1]
        boot = weights.get(start, ("xn", h, xn), raw_rho=rho)
        return acc + boot * (w * state_value(q, pi, xn))
    if scheme.kind == "reward_cis":
        acc = 0.0
        w = 1.0
        for t in range(h):
            r = traj.rewards[t]
            if t == 0:
                acc += 1.0 * (w * r)
            else:
                key = ("reward", h, t, quantize(r))
                acc += weights.get(start, key, raw_rho=rho) * (w * r)
            w *= gamma
        return acc + rho * (w * state_value(q, pi, traj.states[-1]))
    raise ValueError(f"unknown estimator kind {scheme.kind!r}")


def evaluate_on_atom(
    atom: EnumAtom,
    enum: EnumeratedDistribution,
    scheme: EstimatorScheme,
    q: np.ndarray,
    provider,
) -> float:
    """Estimator value on one enumerated trajectory (oracle/analytic schemes)."""
    return conditional_estimate(atom.trajectory, q, enum.pi, enum.mu, scheme, provider, enum.mdp.gamma)
