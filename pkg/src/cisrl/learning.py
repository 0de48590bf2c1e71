"""Q-function representations and the n-step off-policy TD evaluation loop.

Two engines run the same loop. The "kernel" engine flattens everything into
arrays and dispatches to the compiled/fallback backend; the "reference"
engine walks Trajectory objects through the public estimator functions. They
consume identical uniform streams and agree to float tolerance; the test
suite holds them against each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError
from .estimators import (
    EstimatorScheme,
    OnlineWeightProvider,
    OracleWeightProvider,
    conditional_estimate,
    scheme_observations,
)
from .exact import quantize, return_pmfs, reward_pmfs, solve_q_pi, state_marginals
from .mdp import Mdp, Policy, Trajectory, state_value
from .regression import WeightStore

REPR_KINDS = ("tabular", "tilecode")
UPDATE_MODES = ("update-then-query", "query-then-update")
MSE_WEIGHTINGS = ("uniform", "nu")


class TabularQ:
    """One value per (state, action); terminal entries pinned to 0."""

    def __init__(self, mdp: Mdp):
        self.mdp = mdp
        self.values = np.zeros((mdp.n_states, mdp.n_actions))

    def value(self, x: int, a: int) -> float:
        return float(self.values[x, a])

    def update(self, x: int, a: int, target: float, alpha: float) -> None:
        if self.mdp.terminal[x]:
            return
        self.values[x, a] += alpha * (target - self.values[x, a])

    def as_matrix(self) -> np.ndarray:
        return self.values


class TileCodedQ:
    """Linear chain representation: interior state k averages segment weights k-1, k.

    For a chain with interior states x_1..x_K the weights form a (K-1, A)
    table; Q(x_1, a) = w[0, a], Q(x_K, a) = w[K-2, a] and interior states
    average their two adjacent segments. Terminal values are identically 0
    and are not parameterised.
    """

    def __init__(self, mdp: Mdp):
        S = mdp.n_states
        if S < 4 or not mdp.terminal[0] or not mdp.terminal[S - 1] or any(
            mdp.terminal[x] for x in range(1, S - 1)
        ):
            raise ConfigError("tile coding expects a chain layout: absorbing endpoints only")
        self.mdp = mdp
        K = S - 2
        self.weights = np.zeros((K - 1, mdp.n_actions))
        self.seg_a, self.seg_b, self.coef_a, self.coef_b = tile_layout(S)

    def value(self, x: int, a: int) -> float:
        return float(
            self.coef_a[x] * self.weights[self.seg_a[x], a]
            + self.coef_b[x] * self.weights[self.seg_b[x], a]
        )

    def update(self, x: int, a: int, target: float, alpha: float) -> None:
        if self.mdp.terminal[x]:
            return
        delta = alpha * (target - self.value(x, a))
        self.weights[self.seg_a[x], a] += delta * self.coef_a[x]
        self.weights[self.seg_b[x], a] += delta * self.coef_b[x]

    def as_matrix(self) -> np.ndarray:
        out = np.zeros((self.mdp.n_states, self.mdp.n_actions))
        for x in range(self.mdp.n_states):
            if self.mdp.terminal[x]:
                continue
            for a in range(self.mdp.n_actions):
                out[x, a] = self.value(x, a)
        return out


def tile_layout(n_states: int):
    """Segment indices and averaging coefficients per chain state."""
    S = n_states
    K = S - 2
    seg_a = np.zeros(S, dtype=np.int32)
    seg_b = np.zeros(S, dtype=np.int32)
    coef_a = np.zeros(S)
    coef_b = np.zeros(S)
    for x in range(1, S - 1):
        k = x  # interior index 1..K
        if k == 1:
            seg_a[x] = seg_b[x] = 0
            coef_a[x] = 1.0
        elif k == K:
            seg_a[x] = seg_b[x] = K - 2
            coef_a[x] = 1.0
        else:
            seg_a[x] = k - 2
            seg_b[x] = k - 1
            coef_a[x] = 0.5
            coef_b[x] = 0.5
    return seg_a, seg_b, coef_a, coef_b


def make_representation(mdp: Mdp, kind: str):
    if kind == "tabular":
        return TabularQ(mdp)
    if kind == "tilecode":
        return TileCodedQ(mdp)
    raise ConfigError(f"unknown representation kind {kind!r}")


def q_value(repr_, x: int, a: int) -> float:
    """Value of (x, a) under either representation."""
    return repr_.value(x, a)


def apply_update(repr_, x: int, a: int, target: float, alpha: float) -> None:
    """Semi-gradient step toward the target at (x, a)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    repr_.update(x, a, target, alpha)


@dataclass(frozen=True)
class EpisodeBatch:
    """Concatenated behaviour episodes (see kernel sample_episode_batch)."""

    ep_off: np.ndarray
    xs: np.ndarray
    acts: np.ndarray
    rews: np.ndarray
    last: np.ndarray
    absorbed: np.ndarray

    def __len__(self) -> int:
        return len(self.ep_off) - 1


def policy_cum(policy: Policy, n_actions: int) -> np.ndarray:
    out = np.zeros((policy.n_states, n_actions))
    for x, row in enumerate(policy.probs):
        out[x, : row.size] = np.cumsum(row)
    return out


def sample_episodes(mdp: Mdp, mu: Policy, episodes: int, cap: int, rng) -> EpisodeBatch:
    """Draw behaviour episodes from the initial distribution (one uniform block per episode)."""
    t = mdp.tables()
    uniforms = rng.random((episodes, 1 + 2 * cap))
    nu_cum = np.cumsum(mdp.initial_dist)
    out = _kernels.sample_episode_batch(
        t.n_act, t.terminal, t.off, t.ns, t.rew, t.cum, t.n_actions,
        policy_cum(mu, t.n_actions), nu_cum, uniforms, cap,
    )
    return EpisodeBatch(*out)


def mse_pair_weights(mdp: Mdp, weighting: str) -> tuple[np.ndarray, np.ndarray]:
    """Non-terminal (x, a) pairs and their weights for the evaluation MSE."""
    pairs = np.array(mdp.nonterminal_pairs(), dtype=np.int32)
    if weighting == "uniform":
        w = np.full(len(pairs), 1.0 / len(pairs))
    elif weighting == "nu":
        w = np.array([mdp.initial_dist[x] for x, _ in pairs])
        total = w.sum()
        if total <= 0:
            raise ConfigError("nu-weighted MSE needs initial mass on non-terminal states")
        w = w / total
    else:
        raise ConfigError(f"unknown MSE weighting {weighting!r}")
    return pairs, w


def build_oracle_data(mdp: Mdp, pi: Policy, mu: Policy, n: int, kind: str):
    """Exact conditional-weight structures for one scheme, all start pairs.

    RCIS tables are per key horizon 1..n (cap-shortened windows query their
    own horizon); SCIS marginal ratios and reward-pmf ratios do not depend on
    the window horizon.
    """
    A = mdp.n_actions
    pairs = mdp.nonterminal_pairs()
    if kind == "rcis":
        tables: dict = {}
        for x, a in pairs:
            pmfs_mu = return_pmfs(mdp, mu, (x, a), n)
            pmfs_pi = return_pmfs(mdp, pi, (x, a), n)
            p = x * A + a
            for m in range(1, n + 1):
                mu_pmf = pmfs_mu[m - 1]
                pi_pmf = pmfs_pi[m - 1]
                for gq, mass in mu_pmf.items():
                    tables[(p, m, gq)] = pi_pmf.get(gq, 0.0) / mass
        return tables
    if kind == "scis":
        ratio = np.zeros((mdp.n_states * A, n + 1, mdp.n_states))
        for x, a in pairs:
            m_mu = state_marginals(mdp, mu, (x, a), n)
            m_pi = state_marginals(mdp, pi, (x, a), n)
            with np.errstate(invalid="ignore", divide="ignore"):
                r = np.where(m_mu > 0, m_pi / np.where(m_mu > 0, m_mu, 1.0), 0.0)
            ratio[x * A + a] = r
        return ratio
    if kind == "reward_cis":
        tables = {}
        for x, a in pairs:
            pmfs_mu = reward_pmfs(mdp, mu, (x, a), n)
            pmfs_pi = reward_pmfs(mdp, pi, (x, a), n)
            p = x * A + a
            for t in range(1, n):
                for rq, mass in pmfs_mu[t].items():
                    tables[(p, t, rq)] = pmfs_pi[t].get(rq, 0.0) / mass
        return tables
    return None


def run_policy_evaluation(
    mdp: Mdp,
    pi: Policy,
    mu: Policy,
    scheme: EstimatorScheme,
    weights=None,
    repr_kind: str = "tabular",
    n: int = 3,
    episodes: int = 2000,
    alpha: float = 0.1,
    episode_cap: int = 100,
    rng=None,
    update_mode: str = "update-then-query",
    mse_weighting: str = "uniform",
    q_tol: float = 1e-10,
    objective: str = "plain",
    engine: str = "auto",
    episode_batch: EpisodeBatch | None = None,
    q_pi: np.ndarray | None = None,
):
    """n-step TD policy evaluation along behaviour episodes.

    Per episode, every visited (X_t, A_t) gets one update toward the scheme's
    off-policy estimate of its n-step target (windows shorten at the episode
    end; the bootstrap uses the current representation, 0 at terminal
    states). Online weight stores follow the configured update/query order.
    Returns (representation, mse_curve) where mse_curve[0] is the error of
    the zero initialisation and mse_curve[e+1] the error after episode e,
    measured against the value-iteration solution.

    Passing an explicit ``weights`` provider forces the reference engine.
    """
    if update_mode not in UPDATE_MODES:
        raise ConfigError(f"unknown update mode {update_mode!r}")
    if rng is None and episode_batch is None:
        raise ValueError("pass an rng (or a pre-sampled episode batch)")
    if weights is not None:
        engine = "reference"
    if engine == "auto":
        engine = "kernel"
    if engine not in ("kernel", "reference"):
        raise ValueError(f"unknown engine {engine!r}")

    if q_pi is None:
        q_pi = solve_q_pi(mdp, pi, tol=q_tol)
    if episode_batch is None:
        episode_batch = sample_episodes(mdp, mu, episodes, episode_cap, rng)
    pairs, pair_w = mse_pair_weights(mdp, mse_weighting)
    repr_ = make_representation(mdp, repr_kind)
    gamma = mdp.gamma

    if engine == "kernel":
        t = mdp.tables()
        A = t.n_actions
        est_kind = _KIND_CODES[scheme.kind]
        mode = _MODE_CODES[scheme.mode]
        rcis_tables = reward_tables = None
        scis_ratio = np.zeros((1, 1, 1))
        store: dict | None = {} if scheme.mode == "online" else None
        if scheme.mode == "oracle":
            data = build_oracle_data(mdp, pi, mu, n, scheme.kind)
            if scheme.kind == "rcis":
                rcis_tables = data
            elif scheme.kind == "scis":
                scis_ratio = data
            elif scheme.kind == "reward_cis":
                reward_tables = data
        if isinstance(repr_, TabularQ):
            repr_code, qtab = 0, repr_.values
            tile_w = np.zeros((1, 1))
            seg_a = seg_b = np.zeros(1, dtype=np.int32)
            coef_a = coef_b = np.zeros(1)
        else:
            repr_code, qtab = 1, np.zeros((1, 1))
            tile_w = repr_.weights
            seg_a, seg_b, coef_a, coef_b = repr_.seg_a, repr_.seg_b, repr_.coef_a, repr_.coef_b
        mse = np.zeros(len(episode_batch) + 1)
        _kernels.learning_run(
            t.n_act, t.terminal, A,
            pi.matrix(A), mu.matrix(A),
            episode_batch.ep_off, episode_batch.xs, episode_batch.acts,
            episode_batch.rews, episode_batch.last, episode_batch.absorbed,
            n, gamma, alpha,
            est_kind, mode,
            1 if update_mode == "update-then-query" else 0,
            1 if objective == "psi_weighted" else 0,
            rcis_tables, scis_ratio, reward_tables, store,
            repr_code, qtab, tile_w, seg_a, seg_b, coef_a, coef_b,
            q_pi, pairs, pair_w, mse,
        )
        return repr_, mse

    # reference engine
    provider = weights
    if provider is None:
        if scheme.mode == "online":
            provider = OnlineWeightProvider(WeightStore(objective=objective))
        elif scheme.mode == "oracle":
            provider = _reference_oracle_provider(mdp, pi, mu, n, scheme.kind)
        else:
            provider = OracleWeightProvider({})
    mse = np.zeros(len(episode_batch) + 1)
    mse[0] = _mse_of(repr_, q_pi, pairs, pair_w)
    online = scheme.mode == "online"
    for e in range(len(episode_batch)):
        s0, s1 = episode_batch.ep_off[e], episode_batch.ep_off[e + 1]
        T = s1 - s0
        absorbed = bool(episode_batch.absorbed[e])
        last = int(episode_batch.last[e])
        for t_idx in range(T):
            traj = _window_trajectory(episode_batch, s0, T, t_idx, n, last, absorbed)
            q_mat = repr_.as_matrix()
            v_boot = state_value(q_mat, pi, traj.states[-1])
            if online:
                rho, obs = scheme_observations(scheme, traj, pi, mu, gamma, v_boot)
                if update_mode == "update-then-query":
                    for key, psi in obs:
                        provider.record(traj.start, key, rho, psi)
                    target = conditional_estimate(traj, q_mat, pi, mu, scheme, provider, gamma)
                else:
                    target = conditional_estimate(traj, q_mat, pi, mu, scheme, provider, gamma)
                    for key, psi in obs:
                        provider.record(traj.start, key, rho, psi)
            else:
                target = conditional_estimate(traj, q_mat, pi, mu, scheme, provider, gamma)
            repr_.update(traj.start[0], traj.start[1], target, alpha)
        mse[e + 1] = _mse_of(repr_, q_pi, pairs, pair_w)
    return repr_, mse


def _window_trajectory(batch: EpisodeBatch, s0, T, t, n, last, absorbed) -> Trajectory:
    """n-step window starting at episode index t.

    Absorbed episodes pad to the full horizon with terminal stay steps;
    cap-truncated episodes shorten the window instead.
    """
    m = min(n, T - t)
    h = n if absorbed else m
    states, actions, rewards = [], [], []
    for j in range(m):
        idx = s0 + t + j
        if j >= 1:
            actions.append(int(batch.acts[idx]))
        rewards.append(float(batch.rews[idx]))
        states.append(int(batch.xs[idx + 1]) if t + j + 1 < T else last)
    for j in range(m, h):
        if j >= 1:
            actions.append(0)
        rewards.append(0.0)
        states.append(last)
    return Trajectory(
        start=(int(batch.xs[s0 + t]), int(batch.acts[s0 + t])),
        states=tuple(states),
        actions=tuple(actions),
        rewards=tuple(rewards),
    )


def _mse_of(repr_, q_pi, pairs, pair_w) -> float:
    acc = 0.0
    for (x, a), w in zip(pairs, pair_w):
        d = repr_.value(x, a) - q_pi[x, a]
        acc += w * (d * d)
    return float(acc)


def _reference_oracle_provider(mdp, pi, mu, n, kind) -> OracleWeightProvider:
    """Provider-keyed oracle tables for the reference engine, all pairs and horizons."""
    A = mdp.n_actions
    tables: dict = {}
    for x, a in mdp.nonterminal_pairs():
        start = (x, a)
        if kind == "rcis":
            pmfs_mu = return_pmfs(mdp, mu, start, n)
            pmfs_pi = return_pmfs(mdp, pi, start, n)
            for m in range(1, n + 1):
                for gq, mass in pmfs_mu[m - 1].items():
                    tables[(start, ("return", m, gq))] = pmfs_pi[m - 1].get(gq, 0.0) / mass
        elif kind == "scis":
            m_mu = state_marginals(mdp, mu, start, n)
            m_pi = state_marginals(mdp, pi, start, n)
            for m in range(1, n + 1):
                for t in range(1, m):
                    for x2 in range(mdp.n_states):
                        if m_mu[t, x2] <= 0:
                            continue
                        ratio = m_pi[t, x2] / m_mu[t, x2]
                        for a2 in range(mdp.available_actions(x2)):
                            if mu.probs[x2][a2] <= 0:
                                continue
                            act_ratio = pi.probs[x2][a2] / mu.probs[x2][a2]
                            for ns2, r2, p2 in mdp.outcomes(x2, a2):
                                if p2 <= 0:
                                    continue
                                key = ("sar", m, t, x2, a2, quantize(r2))
                                tables[(start, key)] = ratio * act_ratio
                for x2 in range(mdp.n_states):
                    if m_mu[m, x2] > 0:
                        tables[(start, ("xn", m, x2))] = m_pi[m, x2] / m_mu[m, x2]
        elif kind == "reward_cis":
            pmfs_mu = reward_pmfs(mdp, mu, start, n)
            pmfs_pi = reward_pmfs(mdp, pi, start, n)
            for m in range(1, n + 1):
                for t in range(1, m):
                    for rq, mass in pmfs_mu[t].items():
                        tables[(start, ("reward", m, t, rq))] = pmfs_pi[t].get(rq, 0.0) / mass
    return OracleWeightProvider(tables)


_KIND_CODES = {
    "ois": _kernels.OIS,
    "pdis": _kernels.PDIS,
    "uncorrected": _kernels.UNCORRECTED,
    "rcis": _kernels.RCIS,
    "scis": _kernels.SCIS,
    "reward_cis": _kernels.REWARD_CIS,
}
_MODE_CODES = {"analytic": _kernels.ANALYTIC, "oracle": _kernels.ORACLE, "online": _kernels.ONLINE}
