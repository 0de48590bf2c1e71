"""Exact oracle for finite-horizon trajectory laws.

Two routes to the same quantities live here. Exhaustive enumeration
(`enumerate_trajectories`) materialises every trajectory with positive
behaviour probability together with its probability under both policies; it
backs conditional-weight tables, estimator moments and the debug dumps.
Dynamic programming (`exact_operator`, `solve_q_pi`, `return_pmfs`,
`state_marginals`) computes operator values, return distributions and state
marginals without touching individual trajectories, which the experiment
harness needs when enumeration would be too large. The two routes agree to
float tolerance and the test suite holds them against each other.

Real-valued grouping keys (returns, rewards) are canonically quantized by
rounding to 12 decimal digits before hashing; all return accumulation is
left-to-right with a running discount power so equal returns are bitwise
equal across routes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EnumerationCapError, SupportViolationError
from .mdp import Mdp, Policy, Trajectory

QUANT_DIGITS = 12
DEFAULT_ATOM_CAP = 10**7


def quantize(value: float) -> float:
    """Canonical grouping key for a real value (12-digit rounding)."""
    return round(float(value), QUANT_DIGITS)


class EnumAtom(NamedTuple):
    trajectory: Trajectory
    p_mu: float
    p_pi: float


@dataclass(frozen=True)
class EnumeratedDistribution:
    """All length-n trajectories from one start pair, with both policy laws.

    Atoms are enumerated under behaviour-policy support (every atom has
    p_mu > 0); p_pi sums to 1 as well whenever the support condition holds.
    """

    mdp: Mdp
    mu: Policy
    pi: Policy
    start: tuple[int, int]
    horizon: int
    atoms: tuple[EnumAtom, ...]

    def __post_init__(self):
        total_mu = sum(a.p_mu for a in self.atoms)
        total_pi = sum(a.p_pi for a in self.atoms)
        if abs(total_mu - 1.0) > 1e-10:
            raise ValueError(f"behaviour-law masses sum to {total_mu}, not 1")
        if total_pi > 1.0 + 1e-10:
            raise ValueError(f"target-law masses sum to {total_pi} > 1")


@dataclass(frozen=True)
class ConditionalWeightTable:
    """Conditional importance weights E_mu[rho | key] for one conditioner."""

    conditioner: object
    weights: dict

    def __post_init__(self):
        for k, w in self.weights.items():
            if w < 0:
                raise ValueError(f"negative conditional weight {w} at key {k!r}")


def _estimate_atom_count(mdp: Mdp, mu: Policy, start: tuple[int, int], n: int) -> int:
    """Count continuations per (step, state) by backward recursion."""
    counts = np.ones(mdp.n_states, dtype=float)
    for _ in range(n - 1, 0, -1):
        nxt = np.zeros(mdp.n_states, dtype=float)
        for x in range(mdp.n_states):
            total = 0.0
            for a in range(mdp.available_actions(x)):
                if mu.probs[x][a] > 0:
                    for ns, _, p in mdp.outcomes(x, a):
                        if p > 0:
                            total += counts[ns]
            nxt[x] = total
        counts = nxt
    x0, a0 = start
    first = 0.0
    for ns, _, p in mdp.outcomes(x0, a0):
        if p > 0:
            first += counts[ns]
    return int(first)


def enumerate_trajectories(
    mdp: Mdp,
    mu: Policy,
    pi: Policy,
    start: tuple[int, int],
    n: int,
    atom_cap: int = DEFAULT_ATOM_CAP,
) -> EnumeratedDistribution:
    """Expand every trajectory with p_mu > 0 from the start pair, exactly once.

    Raises SupportViolationError if a trajectory with p_pi > 0 but p_mu = 0
    exists (support violation at a reachable state), and EnumerationCapError
    when the estimated atom count exceeds ``atom_cap``.
    """
    x0, a0 = start
    if not (0 <= x0 < mdp.n_states) or not (0 <= a0 < mdp.available_actions(x0)):
        raise ValueError(f"start pair {start} out of range")
    if n < 1:
        raise ValueError("horizon n must be at least 1")
    estimated = _estimate_atom_count(mdp, mu, start, n)
    if estimated > atom_cap:
        raise EnumerationCapError(estimated, atom_cap)

    atoms: list[EnumAtom] = []
    states: list[int] = []
    actions: list[int] = []
    rewards: list[float] = []

    def expand(x: int, t: int, p_mu: float, p_pi: float):
        if t == n:
            atoms.append(
                EnumAtom(
                    Trajectory(start, tuple(states), tuple(actions), tuple(rewards)),
                    p_mu,
                    p_pi,
                )
            )
            return
        if t == 0:
            step_outcomes(x, a0, t, p_mu, p_pi)
            return
        for a in range(mdp.available_actions(x)):
            pm = float(mu.probs[x][a])
            pp = float(pi.probs[x][a])
            if pm == 0.0:
                if pp > 0.0 and p_pi > 0.0:
                    raise SupportViolationError(x, a)
                continue
            actions.append(a)
            step_outcomes(x, a, t, p_mu * pm, p_pi * pp)
            actions.pop()

    def step_outcomes(x: int, a: int, t: int, p_mu: float, p_pi: float):
        for ns, r, p in mdp.outcomes(x, a):
            if p == 0.0:
                continue
            states.append(ns)
            rewards.append(r)
            expand(ns, t + 1, p_mu * p, p_pi * p)
            rewards.pop()
            states.pop()

    expand(x0, 0, 1.0, 1.0)
    return EnumeratedDistribution(mdp, mu, pi, start, n, tuple(atoms))


def _policy_value_vector(mdp: Mdp, pi: Policy, q: np.ndarray) -> np.ndarray:
    v = np.zeros(mdp.n_states)
    for x in range(mdp.n_states):
        row = pi.probs[x]
        v[x] = float(np.dot(row, q[x, : row.size]))
    return v


def _zero_terminal_rows(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=float, copy=True)
    for x in range(mdp.n_states):
        if mdp.terminal[x]:
            q[x, :] = 0.0
    return q


def apply_bellman(mdp: Mdp, pi: Policy, q: np.ndarray) -> np.ndarray:
    """One application of the policy's one-step evaluation operator."""
    P, Rbar = mdp.dense()
    v = _policy_value_vector(mdp, pi, q)
    return Rbar + mdp.gamma * (P @ v)


def exact_operator_all(mdp: Mdp, pi: Policy, q: np.ndarray, n: int) -> np.ndarray:
    """n-step operator applied to q, for every (state, action) at once."""
    if n < 1:
        raise ValueError("operator power n must be at least 1")
    cur = _zero_terminal_rows(mdp, q)
    for _ in range(n):
        cur = apply_bellman(mdp, pi, cur)
    return cur


def exact_operator(mdp: Mdp, pi: Policy, q: np.ndarray, n: int, start: tuple[int, int]) -> float:
    """Exact value of the n-step operator applied to q at one start pair."""
    x, a = start
    if not (0 <= x < mdp.n_states) or not (0 <= a < mdp.available_actions(x)):
        raise ValueError(f"start pair {start} out of range")
    return float(exact_operator_all(mdp, pi, q, n)[x, a])


def solve_q_pi(mdp: Mdp, pi: Policy, tol: float = 1e-10) -> np.ndarray:
    """Value iteration from Q=0 until the sup-norm update drops below tol*(1-gamma)/gamma."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.gamma
    threshold = tol * (1.0 - gamma) / gamma if gamma > 0 else float("inf")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    while True:
        nxt = apply_bellman(mdp, pi, q)
        delta = float(np.max(np.abs(nxt - q)))
        q = nxt
        if delta < threshold:
            return q


def return_distribution(enum: EnumeratedDistribution, which: str) -> dict[float, float]:
    """Pmf of the truncated discounted return under "mu" or "pi", keyed by quantized value."""
    if which not in ("mu", "pi"):
        raise ValueError("which must be 'mu' or 'pi'")
    gamma = enum.mdp.gamma
    out: dict[float, float] = {}
    for traj, p_mu, p_pi in enum.atoms:
        g = 0.0
        w = 1.0
        for r in traj.rewards:
            g += w * r
            w *= gamma
        key = quantize(g)
        out[key] = out.get(key, 0.0) + (p_mu if which == "mu" else p_pi)
    return out


def state_marginal(enum: EnumeratedDistribution, t: int, which: str) -> np.ndarray:
    """Marginal law of X_t under the chosen policy, from the fixed start pair."""
    if which not in ("mu", "pi"):
        raise ValueError("which must be 'mu' or 'pi'")
    if not (0 <= t <= enum.horizon):
        raise ValueError(f"t must lie in [0, {enum.horizon}]")
    out = np.zeros(enum.mdp.n_states)
    for traj, p_mu, p_pi in enum.atoms:
        out[traj.state_at(t)] += p_mu if which == "mu" else p_pi
    return out


def exact_conditional_weight(enum: EnumeratedDistribution, phi) -> ConditionalWeightTable:
    """Conditional weights E_mu[rho | phi(tau) = k] over every key realised under mu.

    Computed by the grouping identity: the weight of a key is the ratio of the
    total target-law mass to the total behaviour-law mass in its group.
    """
    sums: dict = {}
    for traj, p_mu, p_pi in enum.atoms:
        key = phi.key(traj, enum.mdp.gamma)
        acc = sums.get(key)
        if acc is None:
            sums[key] = [p_pi, p_mu]
        else:
            acc[0] += p_pi
            acc[1] += p_mu
    weights = {k: s_pi / s_mu for k, (s_pi, s_mu) in sums.items()}
    return ConditionalWeightTable(conditioner=phi, weights=weights)


def estimator_moments(
    enum: EnumeratedDistribution,
    scheme,
    q: np.ndarray,
) -> tuple[float, float]:
    """Exact mean and variance of a per-trajectory estimator under the behaviour law.

    The scheme's weights must be oracle-backed (built here from the
    enumeration); online schemes have state and no exact law.
    """
    from .estimators import evaluate_on_atom, oracle_provider_from_enum

    if scheme.mode == "online":
        raise ValueError("estimator_moments needs an oracle-backed scheme, not an online one")
    provider = oracle_provider_from_enum(enum, scheme)
    q = _zero_terminal_rows(enum.mdp, np.asarray(q, dtype=float))
    m1 = 0.0
    m2 = 0.0
    for atom in enum.atoms:
        est = evaluate_on_atom(atom, enum, scheme, q, provider)
        m1 += atom.p_mu * est
        m2 += atom.p_mu * est * est
    return m1, max(m2 - m1 * m1, 0.0)


def return_pmfs(
    mdp: Mdp, policy: Policy, start: tuple[int, int], n: int
) -> list[dict[float, float]]:
    """Pmfs of the truncated return for every horizon 1..n, by forward DP.

    Element m-1 of the result is the horizon-(m) pmf keyed by quantized
    return. The DP carries an unrounded representative per (state, key) cell
    so accumulation matches the per-trajectory route bitwise.
    """
    if n < 1:
        raise ValueError("horizon n must be at least 1")
    x0, a0 = start
    # cell: (state, quantized G) -> [mass, unrounded G representative]
    cells: dict[tuple[int, float], list] = {}
    w = 1.0
    for ns, r, p in mdp.outcomes(x0, a0):
        if p == 0.0:
            continue
        g = 0.0 + w * r
        key = (ns, quantize(g))
        acc = cells.get(key)
        if acc is None:
            cells[key] = [p, g]
        else:
            acc[0] += p
    w *= mdp.gamma
    out = [_marginal_return_pmf(cells)]
    for _ in range(1, n):
        nxt: dict[tuple[int, float], list] = {}
        for (x, _), (mass, g) in cells.items():
            for a in range(mdp.available_actions(x)):
                pa = float(policy.probs[x][a])
                if pa == 0.0:
                    continue
                for ns, r, p in mdp.outcomes(x, a):
                    if p == 0.0:
                        continue
                    g2 = g + w * r
                    key = (ns, quantize(g2))
                    acc = nxt.get(key)
                    if acc is None:
                        nxt[key] = [mass * pa * p, g2]
                    else:
                        acc[0] += mass * pa * p
        cells = nxt
        w *= mdp.gamma
        out.append(_marginal_return_pmf(cells))
    return out


def _marginal_return_pmf(cells: dict) -> dict[float, float]:
    pmf: dict[float, float] = {}
    for (_, gq), (mass, _) in cells.items():
        pmf[gq] = pmf.get(gq, 0.0) + mass
    return pmf


def reward_pmfs(
    mdp: Mdp, policy: Policy, start: tuple[int, int], n: int
) -> list[dict[float, float]]:
    """Pmfs of the step rewards R_0..R_{n-1} under the policy, keyed by quantized value."""
    marg = state_marginals(mdp, policy, start, n)
    out: list[dict[float, float]] = []
    pmf0: dict[float, float] = {}
    for _, r, p in mdp.outcomes(*start):
        if p > 0:
            key = quantize(r)
            pmf0[key] = pmf0.get(key, 0.0) + p
    out.append(pmf0)
    for t in range(1, n):
        pmf: dict[float, float] = {}
        for x in range(mdp.n_states):
            mass = marg[t, x]
            if mass <= 0:
                continue
            for a in range(mdp.available_actions(x)):
                pa = float(policy.probs[x][a])
                if pa == 0.0:
                    continue
                for _, r, p in mdp.outcomes(x, a):
                    if p > 0:
                        key = quantize(r)
                        pmf[key] = pmf.get(key, 0.0) + mass * pa * p
        out.append(pmf)
    return out


def state_marginals(
    mdp: Mdp, policy: Policy, start: tuple[int, int], n: int
) -> np.ndarray:
    """Array of state marginals at times 0..n from the start pair, by forward DP."""
    if n < 1:
        raise ValueError("horizon n must be at least 1")
    S = mdp.n_states
    out = np.zeros((n + 1, S))
    x0, a0 = start
    out[0, x0] = 1.0
    step = np.zeros(S)
    for ns, _, p in mdp.outcomes(x0, a0):
        step[ns] += p
    out[1] = step
    if n > 1:
        # one-step state kernel under the policy
        T = np.zeros((S, S))
        for x in range(S):
            for a in range(mdp.available_actions(x)):
                pa = float(policy.probs[x][a])
                if pa == 0.0:
                    continue
                for ns, _, p in mdp.outcomes(x, a):
                    T[x, ns] += pa * p
        for t in range(2, n + 1):
            out[t] = out[t - 1] @ T
    return out


def dump_atoms_csv(enum: EnumeratedDistribution, writer) -> None:
    """Write enumeration atoms as CSV rows: trajectory, p_mu, p_pi, rho, return."""
    gamma = enum.mdp.gamma
    writer.writerow(["x", "a", "states", "actions", "rewards", "p_mu", "p_pi", "rho", "return"])
    for traj, p_mu, p_pi in enum.atoms:
        g = 0.0
        w = 1.0
        for r in traj.rewards:
            g += w * r
            w *= gamma
        writer.writerow(
            [
                traj.start[0],
                traj.start[1],
                "|".join(str(s) for s in traj.states),
                "|".join(str(a) for a in traj.actions),
                "|".join(repr(r) for r in traj.rewards),
                repr(p_mu),
                repr(p_pi),
                repr(p_pi / p_mu),
                repr(g),
            ]
        )
