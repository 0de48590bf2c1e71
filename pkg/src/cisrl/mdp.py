"""Finite-MDP data model, trajectory sampling, and importance-sampling primitives.

States and actions are integer indices. The transition law is a joint finite
distribution over (next_state, reward) per state-action pair, which lets the
reward depend on the realised successor (needed for environments whose
terminal entry pays differently from interior steps). Terminal states expose
exactly one "stay" action that self-loops with probability 1 and reward 0, so
trajectories remain well-defined past absorption: post-absorption steps have
importance ratio 1 and reward 0.

``Mdp`` and ``Policy`` are immutable after construction and safe to share
across threads; sampling needs one independent Generator per thread.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import SupportViolationError

PROB_ATOL = 1e-12  # slack for probability normalisation checks

# (next_state, reward, probability)
Outcome = tuple[int, float, float]


@dataclass
class Mdp:
    """Finite MDP with a joint (next-state, reward) transition law.

    Args:
        n_states: number of states, indexed 0..n_states-1.
        n_actions: actions available at every non-terminal state. Terminal
            states expose a single stay action (index 0).
        gamma: discount factor in [0, 1).
        transitions: map (state, action) -> tuple of (next_state, reward,
            probability) outcomes.
        terminal: per-state terminal flags.
        initial_dist: start-state distribution.
    """

    n_states: int
    n_actions: int
    gamma: float
    transitions: Mapping[tuple[int, int], tuple[Outcome, ...]]
    terminal: tuple[bool, ...]
    initial_dist: np.ndarray
    _tables: "MdpTables | None" = field(default=None, repr=False, compare=False)
    _dense: "tuple | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("n_states and n_actions must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        self.terminal = tuple(bool(t) for t in self.terminal)
        if len(self.terminal) != self.n_states:
            raise ValueError("terminal flags must cover every state")
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if self.initial_dist.shape != (self.n_states,):
            raise ValueError("initial_dist must have one entry per state")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > PROB_ATOL:
            raise ValueError("initial_dist must be a probability distribution")
        self.transitions = {k: tuple(v) for k, v in self.transitions.items()}
        for x in range(self.n_states):
            for a in range(self.available_actions(x)):
                if (x, a) not in self.transitions:
                    raise ValueError(f"missing transition entry for state {x}, action {a}")
                self._check_outcomes(x, a)
            if self.terminal[x]:
                if any((x, a) in self.transitions for a in range(1, self.n_actions)):
                    raise ValueError(f"terminal state {x} must expose only the stay action")
                (ns, r, p), *rest = self.transitions[(x, 0)]
                if rest or ns != x or r != 0.0 or p != 1.0:
                    raise ValueError(
                        f"terminal state {x} must self-loop with probability 1 and reward 0"
                    )

    def _check_outcomes(self, x, a):
        total = 0.0
        for ns, r, p in self.transitions[(x, a)]:
            if not (0 <= ns < self.n_states):
                raise ValueError(f"outcome state {ns} out of range at ({x}, {a})")
            if p < 0:
                raise ValueError(f"negative outcome probability at ({x}, {a})")
            total += p
        if abs(total - 1.0) > PROB_ATOL:
            raise ValueError(f"outcome probabilities at ({x}, {a}) sum to {total}, not 1")

    def is_terminal(self, x: int) -> bool:
        return self.terminal[x]

    def available_actions(self, x: int) -> int:
        return 1 if self.terminal[x] else self.n_actions

    def outcomes(self, x: int, a: int) -> tuple[Outcome, ...]:
        if not (0 <= x < self.n_states) or not (0 <= a < self.available_actions(x)):
            raise ValueError(f"state-action pair ({x}, {a}) out of range")
        return self.transitions[(x, a)]

    def nonterminal_pairs(self) -> list[tuple[int, int]]:
        return [
            (x, a)
            for x in range(self.n_states)
            if not self.terminal[x]
            for a in range(self.n_actions)
        ]

    def tables(self) -> "MdpTables":
        """Flattened array view used by the sampling/learning kernels."""
        if self._tables is None:
            self._tables = MdpTables.build(self)
        return self._tables

    def dense(self):
        """Dense (P, R_bar) view for dynamic programming: P[x,a,ns], R_bar[x,a]."""
        if self._dense is None:
            size = self.n_states * self.n_states * self.n_actions
            if size > 50_000_000:
                raise ValueError("MDP too large for dense dynamic programming")
            P = np.zeros((self.n_states, self.n_actions, self.n_states))
            Rbar = np.zeros((self.n_states, self.n_actions))
            for x in range(self.n_states):
                for a in range(self.available_actions(x)):
                    for ns, r, p in self.transitions[(x, a)]:
                        P[x, a, ns] += p
                        Rbar[x, a] += p * r
            self._dense = (P, Rbar)
        return self._dense


@dataclass(frozen=True)
class MdpTables:
    """CSR-style arrays for one Mdp: outcome lists flattened per (state, action)."""

    n_states: int
    n_actions: int
    gamma: float
    n_act: np.ndarray  # int32[S], available actions per state
    terminal: np.ndarray  # uint8[S]
    off: np.ndarray  # int64[S*A + 1], offsets indexed by x*A + a
    ns: np.ndarray  # int32[total]
    rew: np.ndarray  # float64[total]
    prob: np.ndarray  # float64[total]
    cum: np.ndarray  # float64[total], within-(x,a) cumulative probabilities

    @staticmethod
    def build(mdp: Mdp) -> "MdpTables":
        S, A = mdp.n_states, mdp.n_actions
        n_act = np.array([mdp.available_actions(x) for x in range(S)], dtype=np.int32)
        terminal = np.array(mdp.terminal, dtype=np.uint8)
        off = np.zeros(S * A + 1, dtype=np.int64)
        ns, rew, prob, cum = [], [], [], []
        pos = 0
        for x in range(S):
            for a in range(A):
                off[x * A + a] = pos
                if a < n_act[x]:
                    running = 0.0
                    for s2, r, p in mdp.transitions[(x, a)]:
                        running += p
                        ns.append(s2)
                        rew.append(r)
                        prob.append(p)
                        cum.append(running)
                        pos += 1
            # trailing offsets for padded action slots of terminal states
            for a in range(n_act[x], A):
                off[x * A + a] = pos
        off[S * A] = pos
        return MdpTables(
            n_states=S,
            n_actions=A,
            gamma=mdp.gamma,
            n_act=n_act,
            terminal=terminal,
            off=off,
            ns=np.array(ns, dtype=np.int32),
            rew=np.array(rew, dtype=float),
            prob=np.array(prob, dtype=float),
            cum=np.array(cum, dtype=float),
        )


@dataclass
class Policy:
    """Per-state action distribution; terminal states carry the stay action."""

    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        rows = []
        for x, row in enumerate(self.probs):
            row = np.asarray(row, dtype=float)
            if row.ndim != 1 or row.size < 1:
                raise ValueError(f"policy row {x} must be a non-empty vector")
            if np.any(row < 0):
                raise ValueError(f"policy row {x} has negative entries")
            if abs(row.sum() - 1.0) > PROB_ATOL:
                raise ValueError(f"policy row {x} sums to {row.sum()}, not 1")
            rows.append(row)
        self.probs = tuple(rows)

    @property
    def n_states(self) -> int:
        return len(self.probs)

    def prob(self, x: int, a: int) -> float:
        return float(self.probs[x][a])

    def matrix(self, n_actions: int) -> np.ndarray:
        """Zero-padded (S, n_actions) probability matrix."""
        out = np.zeros((self.n_states, n_actions))
        for x, row in enumerate(self.probs):
            out[x, : row.size] = row
        return out


@dataclass(frozen=True)
class Trajectory:
    """Truncated trajectory from a fixed start pair.

    ``start`` is (X_0, A_0); ``states`` holds X_1..X_n, ``actions`` holds
    A_1..A_{n-1} and ``rewards`` holds R_0..R_{n-1}, so ``horizon`` = n >= 1.
    """

    start: tuple[int, int]
    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        n = len(self.rewards)
        if n < 1:
            raise ValueError("trajectory horizon must be at least 1")
        if len(self.states) != n or len(self.actions) != n - 1:
            raise ValueError(
                f"inconsistent lengths: {n} rewards need {n} states and {n - 1} actions"
            )

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def state_at(self, t: int) -> int:
        return self.start[0] if t == 0 else self.states[t - 1]

    def action_at(self, t: int) -> int:
        return self.start[1] if t == 0 else self.actions[t - 1]


def sample_trajectory(
    mdp: Mdp,
    behaviour: Policy,
    start: tuple[int, int],
    n: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Draw a length-n trajectory with the start pair fixed and A_t ~ behaviour for t >= 1.

    Once a terminal state is entered the remaining steps take the stay action
    with reward 0.
    """
    x, a = start
    if not (0 <= x < mdp.n_states) or not (0 <= a < mdp.available_actions(x)):
        raise ValueError(f"start pair ({x}, {a}) out of range")
    if n < 1:
        raise ValueError("horizon n must be at least 1")
    t = mdp.tables()
    A = t.n_actions
    states, actions, rewards = [], [], []
    for step in range(n):
        if step > 0:
            k = int(t.n_act[x])
            if k == 1:
                a = 0
            else:
                row = behaviour.probs[x]
                u = rng.random()
                acc = 0.0
                a = k - 1
                for j in range(k):
                    acc += row[j]
                    if u < acc:
                        a = j
                        break
            actions.append(a)
        lo = int(t.off[x * A + a])
        hi = int(t.off[x * A + a + 1])
        if hi - lo == 1:
            idx = lo
        else:
            u = rng.random()
            idx = hi - 1
            for j in range(lo, hi):
                if u < t.cum[j]:
                    idx = j
                    break
        rewards.append(float(t.rew[idx]))
        x = int(t.ns[idx])
        states.append(x)
    return Trajectory(start=start, states=tuple(states), actions=tuple(actions), rewards=tuple(rewards))


def check_support_condition(pi: Policy, mu: Policy) -> bool:
    """True iff supp(pi(.|x)) is contained in supp(mu(.|x)) at every state."""
    if pi.n_states != mu.n_states:
        raise ValueError("policies are defined on different state spaces")
    for x in range(pi.n_states):
        p, m = pi.probs[x], mu.probs[x]
        if p.size != m.size:
            raise ValueError(f"policies disagree on the action count at state {x}")
        if np.any((p > 0) & (m == 0)):
            return False
    return True


def mix_policies(pi: Policy, mu: Policy, beta: float) -> Policy:
    """Convex mixture beta*pi + (1-beta)*mu, state by state."""
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if pi.n_states != mu.n_states:
        raise ValueError("policies are defined on different state spaces")
    rows = []
    for x in range(pi.n_states):
        p, m = pi.probs[x], mu.probs[x]
        if p.size != m.size:
            raise ValueError(f"policies disagree on the action count at state {x}")
        rows.append(beta * p + (1.0 - beta) * m)
    return Policy(probs=tuple(rows))


def importance_ratio(traj: Trajectory, pi: Policy, mu: Policy, s: int, t: int) -> float:
    """Product of action-probability ratios pi/mu over steps s..t (1 when s > t)."""
    if s < 1:
        raise ValueError("ratio products start at step 1 at the earliest")
    if t > traj.horizon - 1:
        raise ValueError("ratio products end at step n-1 at the latest")
    out = 1.0
    for i in range(s, t + 1):
        x = traj.state_at(i)
        a = traj.action_at(i)
        m = mu.prob(x, a)
        if m == 0.0:
            raise SupportViolationError(x, a)
        out *= pi.prob(x, a) / m
    return out


def truncated_return(traj: Trajectory, gamma: float) -> float:
    """Discounted reward sum over the trajectory (no bootstrap term).

    Accumulated left-to-right with a running discount power; every consumer
    of quantized return keys relies on this exact accumulation order.
    """
    g = 0.0
    w = 1.0
    for r in traj.rewards:
        g += w * r
        w *= gamma
    return g


def state_value(q: np.ndarray, pi: Policy, x: int) -> float:
    """V(x; pi) = sum_a pi(a|x) q(x, a)."""
    row = pi.probs[x]
    acc = 0.0
    for a in range(row.size):
        acc += row[a] * q[x, a]
    return acc


def bootstrapped_return(traj: Trajectory, q: np.ndarray, pi: Policy, gamma: float) -> float:
    """Truncated return plus gamma^n * V(X_n; pi) from the supplied Q-table."""
    g = 0.0
    w = 1.0
    for r in traj.rewards:
        g += w * r
        w *= gamma
    return g + w * state_value(q, pi, traj.states[-1])


def save_mdp(mdp: Mdp, path) -> None:
    """Write an Mdp to a structured text file (see load_mdp for the format)."""
    lines = [
        f"states {mdp.n_states}",
        f"actions {mdp.n_actions}",
        f"gamma {mdp.gamma!r}",
        "terminal " + " ".join("1" if t else "0" for t in mdp.terminal),
        "initial " + " ".join(repr(float(v)) for v in mdp.initial_dist),
    ]
    for x in range(mdp.n_states):
        for a in range(mdp.available_actions(x)):
            for ns, r, p in mdp.transitions[(x, a)]:
                lines.append(f"outcome {x} {a} {ns} {r!r} {p!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mdp(path) -> Mdp:
    """Read an Mdp from the text format written by save_mdp.

    Lines: ``states N``, ``actions A``, ``gamma G``, ``terminal f0 f1 ...``,
    ``initial p0 p1 ...`` and one ``outcome x a ns reward prob`` line per
    transition outcome. Blank lines and ``#`` comments are ignored.
    """
    header: dict[str, str] = {}
    outcomes: dict[tuple[int, int], list[Outcome]] = {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "outcome":
                x, a, ns, r, p = rest.split()
                outcomes.setdefault((int(x), int(a)), []).append(
                    (int(ns), float(r), float(p))
                )
            elif key in ("states", "actions", "gamma", "terminal", "initial"):
                header[key] = rest
            else:
                raise ValueError(f"unrecognised line in MDP file: {line!r}")
    for want in ("states", "actions", "gamma", "terminal", "initial"):
        if want not in header:
            raise ValueError(f"MDP file is missing the '{want}' line")
    return Mdp(
        n_states=int(header["states"]),
        n_actions=int(header["actions"]),
        gamma=float(header["gamma"]),
        transitions={k: tuple(v) for k, v in outcomes.items()},
        terminal=tuple(tok == "1" for tok in header["terminal"].split()),
        initial_dist=np.array([float(tok) for tok in header["initial"].split()]),
    )
