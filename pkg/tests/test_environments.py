import numpy as np
import pytest

from cisrl.environments import ChainSpec, build_chain, random_dirichlet_policy, random_q_function
from cisrl.exact import solve_q_pi
from cisrl.mdp import Mdp, Policy
from cisrl.rng import make_rng


def test_chain_noiseless_transitions():
    mdp = build_chain(ChainSpec(noise=0.0))
    assert mdp.outcomes(3, 1) == ((4, 1.0, 1.0),)
    # rightmost interior state moving right pays the absorbing bonus
    assert mdp.outcomes(6, 1) == ((7, 10.0, 1.0),)
    assert mdp.outcomes(1, 0) == ((0, 10.0, 1.0),)
    assert mdp.terminal[0] and mdp.terminal[7]
    assert mdp.initial_dist[3] == 1.0


def test_chain_noise_composition():
    mdp = build_chain(ChainSpec(noise=0.5))
    outcomes = {ns: p for ns, _, p in mdp.outcomes(3, 1)}
    assert outcomes[4] == pytest.approx(0.75)
    assert outcomes[2] == pytest.approx(0.25)


def test_chain_extra_actions_replicate_directions():
    mdp = build_chain(ChainSpec(noise=0.2, extra_actions=2))
    assert mdp.n_actions == 6
    for a in (1, 3, 5):
        assert mdp.outcomes(3, a) == mdp.outcomes(3, 1)
    for a in (0, 2, 4):
        assert mdp.outcomes(3, a) == mdp.outcomes(3, 0)


@pytest.mark.parametrize("noise", [0.0, 0.1, 0.5])
@pytest.mark.parametrize("extra", [0, 1, 3])
def test_chain_grid_builds_valid_mdps(noise, extra):
    mdp = build_chain(ChainSpec(noise=noise, extra_actions=extra))
    assert isinstance(mdp, Mdp)  # construction runs the full invariant checks
    assert mdp.n_actions == 2 * (1 + extra)


def test_chain_spec_validation():
    with pytest.raises(ValueError):
        ChainSpec(noise=1.5)
    with pytest.raises(ValueError):
        ChainSpec(n_interior=1)
    with pytest.raises(ValueError):
        ChainSpec(initial_state=7)


def test_replicated_actions_leave_values_unchanged():
    # spreading a 2-action policy uniformly over replicas preserves Q
    base = build_chain(ChainSpec(noise=0.3))
    wide = build_chain(ChainSpec(noise=0.3, extra_actions=3))
    rng = make_rng(5)
    pol2 = random_dirichlet_policy(base, rng)
    rows = []
    for x in range(wide.n_states):
        if wide.terminal[x]:
            rows.append(np.array([1.0]))
        else:
            row = np.empty(8)
            row[0::2] = pol2.probs[x][0] / 4.0
            row[1::2] = pol2.probs[x][1] / 4.0
            rows.append(row)
    pol8 = Policy(tuple(rows))
    q2 = solve_q_pi(base, pol2, tol=1e-11)
    q8 = solve_q_pi(wide, pol8, tol=1e-11)
    for x in range(base.n_states):
        if base.terminal[x]:
            continue
        for a in range(8):
            assert q8[x, a] == pytest.approx(q2[x, a % 2], abs=1e-10)


def test_dirichlet_policy_degenerate_and_reproducible():
    mdp = build_chain(ChainSpec())
    pol = random_dirichlet_policy(mdp, make_rng(3))
    assert pol.probs[0].tolist() == [1.0]  # terminal stay action
    again = random_dirichlet_policy(mdp, make_rng(3))
    for a, b in zip(pol.probs, again.probs):
        assert np.array_equal(a, b)


def test_dirichlet_policy_is_symmetric():
    # mean of each action probability approaches 1/|A|
    mdp = Mdp(
        n_states=1,
        n_actions=4,
        gamma=0.5,
        transitions={(0, a): ((0, 0.0, 1.0),) for a in range(4)},
        terminal=(False,),
        initial_dist=np.array([1.0]),
    )
    rng = make_rng(8)
    total = np.zeros(4)
    draws = 10**5
    for _ in range(draws):
        total += random_dirichlet_policy(mdp, rng).probs[0]
    assert np.all(np.abs(total / draws - 0.25) < 0.005)


def test_random_q_function_variance_and_terminal_zeros():
    n = 10_000
    transitions = {}
    terminal = [False] * n + [True]
    for x in range(n):
        for a in range(10):
            transitions[(x, a)] = ((x, 0.0, 1.0),)
    transitions[(n, 0)] = ((n, 0.0, 1.0),)
    nu = np.zeros(n + 1)
    nu[0] = 1.0
    mdp = Mdp(
        n_states=n + 1,
        n_actions=10,
        gamma=0.5,
        transitions=transitions,
        terminal=tuple(terminal),
        initial_dist=nu,
    )
    q = random_q_function(mdp, 0.1, make_rng(4))
    assert np.all(q[n, :] == 0.0)
    sample_var = float(np.var(q[:n, :]))
    assert abs(sample_var - 0.1) < 0.005
    again = random_q_function(mdp, 0.1, make_rng(4))
    assert np.array_equal(q, again)
    as_std = random_q_function(mdp, 0.1, make_rng(4), interpret="std")
    assert abs(float(np.var(as_std[:n, :])) - 0.01) < 0.005


def test_random_q_function_validation():
    mdp = build_chain(ChainSpec())
    with pytest.raises(ValueError):
        random_q_function(mdp, 0.0, make_rng(0))
    with pytest.raises(ValueError):
        random_q_function(mdp, 0.1, make_rng(0), interpret="stddev")
