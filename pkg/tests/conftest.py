import numpy as np
import pytest

from cisrl.environments import ChainSpec, build_chain
from cisrl.mdp import Mdp, Policy
from cisrl.verify import branch_mdp, branch_policies, two_state_mdp


@pytest.fixture
def branch():
    mdp = branch_mdp()
    pi, mu = branch_policies()
    return mdp, pi, mu


@pytest.fixture
def two_state():
    return two_state_mdp()


@pytest.fixture
def chain_noiseless():
    return build_chain(ChainSpec(noise=0.0))


def single_path_mdp():
    """One non-terminal state whose only move pays 1 into the terminal state."""
    return Mdp(
        n_states=2,
        n_actions=1,
        gamma=0.5,
        transitions={(0, 0): ((1, 1.0, 1.0),), (1, 0): ((1, 0.0, 1.0),)},
        terminal=(False, True),
        initial_dist=np.array([1.0, 0.0]),
    )


def uniform_policy(mdp) -> Policy:
    rows = []
    for x in range(mdp.n_states):
        k = mdp.available_actions(x)
        rows.append(np.full(k, 1.0 / k))
    return Policy(tuple(rows))


def always_action(mdp, action) -> Policy:
    rows = []
    for x in range(mdp.n_states):
        k = mdp.available_actions(x)
        row = np.zeros(k)
        row[min(action, k - 1)] = 1.0
        rows.append(row)
    return Policy(tuple(rows))


def brute_force_argmin(fn, lo, hi, grid=4001):
    """Independent 1-D minimiser: dense grid scan + one parabolic refinement.

    Pure comparison search stalls at the sqrt(machine-eps) flatness floor on
    quadratic objectives; the parabola through the best grid point and its
    neighbours recovers the vertex to machine precision.
    """
    xs = np.linspace(lo, hi, grid)
    vals = np.array([fn(x) for x in xs])
    i = int(np.argmin(vals))
    i = min(max(i, 1), grid - 2)
    a, m, b = xs[i - 1], xs[i], xs[i + 1]
    fa, fm, fb = vals[i - 1], vals[i], vals[i + 1]
    num = (m - a) ** 2 * (fm - fb) - (m - b) ** 2 * (fm - fa)
    den = (m - a) * (fm - fb) - (m - b) * (fm - fa)
    if den == 0.0:
        return float(m)
    return float(m - 0.5 * num / den)
