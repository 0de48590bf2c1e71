import numpy as np
import pytest

from cisrl.environments import ChainSpec, build_chain, random_dirichlet_policy
from cisrl.errors import SupportViolationError
from cisrl.exact import enumerate_trajectories
from cisrl.mdp import (
    Mdp,
    Policy,
    Trajectory,
    bootstrapped_return,
    check_support_condition,
    importance_ratio,
    load_mdp,
    mix_policies,
    sample_trajectory,
    save_mdp,
    truncated_return,
)
from cisrl.rng import make_rng
from cisrl.verify import random_mdp, two_state_mdp

from conftest import always_action, single_path_mdp, uniform_policy


def test_mdp_rejects_bad_outcome_probabilities():
    with pytest.raises(ValueError, match="sum to"):
        Mdp(
            n_states=2,
            n_actions=1,
            gamma=0.5,
            transitions={(0, 0): ((1, 1.0, 0.7),), (1, 0): ((1, 0.0, 1.0),)},
            terminal=(False, True),
            initial_dist=np.array([1.0, 0.0]),
        )


def test_mdp_rejects_bad_terminal_convention():
    with pytest.raises(ValueError, match="terminal state"):
        Mdp(
            n_states=2,
            n_actions=1,
            gamma=0.5,
            transitions={(0, 0): ((1, 1.0, 1.0),), (1, 0): ((1, 5.0, 1.0),)},
            terminal=(False, True),
            initial_dist=np.array([1.0, 0.0]),
        )


def test_mdp_rejects_gamma_one():
    with pytest.raises(ValueError, match="gamma"):
        Mdp(
            n_states=1,
            n_actions=1,
            gamma=1.0,
            transitions={(0, 0): ((0, 0.0, 1.0),)},
            terminal=(False,),
            initial_dist=np.array([1.0]),
        )


def test_trajectory_validates_lengths():
    with pytest.raises(ValueError, match="inconsistent"):
        Trajectory(start=(0, 0), states=(1,), actions=(0,), rewards=(1.0,))


def test_sample_trajectory_deterministic_path():
    mdp = single_path_mdp()
    traj = sample_trajectory(mdp, uniform_policy(mdp), (0, 0), 1, make_rng(0))
    assert traj.rewards == (1.0,)
    assert traj.states == (1,)


def test_sample_trajectory_chain_noiseless():
    mdp = build_chain(ChainSpec(noise=0.0))
    traj = sample_trajectory(mdp, always_action(mdp, 1), (3, 1), 2, make_rng(0))
    assert traj.states == (4, 5)
    assert traj.rewards == (1.0, 1.0)


def test_sample_trajectory_noise_composition():
    # intended neighbour keeps (1 - p) + p/2 mass at p = 0.5
    mdp = build_chain(ChainSpec(noise=0.5))
    rng = make_rng(7)
    hits = 0
    draws = 10**5
    for _ in range(draws):
        traj = sample_trajectory(mdp, uniform_policy(mdp), (3, 1), 1, rng)
        hits += traj.states[0] == 4
    assert abs(hits / draws - 0.75) < 0.01


def test_sample_trajectory_validates_input():
    mdp = single_path_mdp()
    with pytest.raises(ValueError):
        sample_trajectory(mdp, uniform_policy(mdp), (5, 0), 1, make_rng(0))
    with pytest.raises(ValueError):
        sample_trajectory(mdp, uniform_policy(mdp), (0, 0), 0, make_rng(0))


def test_sampling_frequencies_match_enumeration():
    # total variation between 1e6 sampled trajectories and the exact law
    mdp = two_state_mdp()
    mu = Policy((np.array([0.3, 0.7]), np.array([1.0])))
    enum = enumerate_trajectories(mdp, mu, mu, (0, 0), 2)
    exact = {a.trajectory: a.p_mu for a in enum.atoms}
    counts: dict = {}
    rng = make_rng(123)
    draws = 10**6
    for _ in range(draws):
        traj = sample_trajectory(mdp, mu, (0, 0), 2, rng)
        counts[traj] = counts.get(traj, 0) + 1
    assert set(counts) <= set(exact)
    tv = 0.5 * sum(abs(exact[t] - counts.get(t, 0) / draws) for t in exact)
    assert tv < 0.01


def test_support_condition():
    mdp = two_state_mdp()
    mu = uniform_policy(mdp)
    pi = always_action(mdp, 1)
    assert check_support_condition(pi, pi)
    assert check_support_condition(pi, mu)
    bad_mu = Policy((np.array([0.0, 1.0]), np.array([1.0])))
    pi0 = always_action(mdp, 0)
    assert not check_support_condition(pi0, bad_mu)


def test_support_condition_rejects_mismatched_spaces():
    mdp = two_state_mdp()
    with pytest.raises(ValueError):
        check_support_condition(uniform_policy(mdp), Policy((np.array([1.0]),)))


def test_mix_policies():
    mdp = two_state_mdp()
    pi = Policy((np.array([0.8, 0.2]), np.array([1.0])))
    mu = Policy((np.array([0.4, 0.6]), np.array([1.0])))
    assert np.allclose(mix_policies(pi, mu, 1.0).probs[0], pi.probs[0])
    assert np.allclose(mix_policies(pi, mu, 0.0).probs[0], mu.probs[0])
    assert mix_policies(pi, mu, 0.5).prob(0, 0) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        mix_policies(pi, mu, 1.5)


def test_mix_policies_rows_stay_normalised():
    rng = make_rng(5)
    for _ in range(25):
        mdp = random_mdp(rng)
        pi = random_dirichlet_policy(mdp, rng)
        mu = random_dirichlet_policy(mdp, rng)
        mixed = mix_policies(pi, mu, float(rng.random()))
        for row in mixed.probs:
            assert abs(row.sum() - 1.0) <= 1e-12
            assert np.all(row >= 0)


def test_importance_ratio_basics():
    traj = Trajectory(start=(0, 0), states=(0, 1), actions=(1,), rewards=(1.0, 2.0))
    pi = Policy((np.array([0.2, 0.8]), np.array([1.0])))
    mu = Policy((np.array([0.6, 0.4]), np.array([1.0])))
    assert importance_ratio(traj, pi, mu, 1, 0) == 1.0
    assert importance_ratio(traj, pi, mu, 1, 1) == pytest.approx(2.0)
    assert importance_ratio(traj, mu, mu, 1, 1) == 1.0
    with pytest.raises(ValueError):
        importance_ratio(traj, pi, mu, 0, 1)
    with pytest.raises(ValueError):
        importance_ratio(traj, pi, mu, 1, 2)


def test_importance_ratio_flags_support_violation():
    traj = Trajectory(start=(0, 0), states=(0, 1), actions=(0,), rewards=(1.0, 2.0))
    pi = Policy((np.array([1.0, 0.0]), np.array([1.0])))
    mu = Policy((np.array([0.0, 1.0]), np.array([1.0])))
    with pytest.raises(SupportViolationError):
        importance_ratio(traj, pi, mu, 1, 1)


def test_ratio_equals_trajectory_probability_ratio():
    # product of action ratios == p_pi / p_mu on every enumerated trajectory
    rng = make_rng(31)
    for _ in range(20):
        mdp = random_mdp(rng)
        pi = random_dirichlet_policy(mdp, rng)
        mu = random_dirichlet_policy(mdp, rng)
        x0 = next(x for x in range(mdp.n_states) if not mdp.terminal[x])
        n = int(rng.integers(1, 4))
        enum = enumerate_trajectories(mdp, mu, pi, (x0, 0), n)
        for traj, p_mu, p_pi in enum.atoms:
            rho = importance_ratio(traj, pi, mu, 1, n - 1)
            assert rho == pytest.approx(p_pi / p_mu, abs=1e-12, rel=1e-12)


def test_bootstrapped_return():
    mdp = two_state_mdp()
    pi = uniform_policy(mdp)
    traj = Trajectory(start=(0, 0), states=(0, 0), actions=(0,), rewards=(1.0, 1.0))
    q = np.full((2, 2), 2.0)
    q[1, :] = 0.0
    assert bootstrapped_return(traj, q, pi, 0.5) == pytest.approx(2.0)
    assert bootstrapped_return(traj, np.zeros((2, 2)), pi, 0.5) == pytest.approx(1.5)
    term = Trajectory(start=(0, 0), states=(1,), actions=(), rewards=(3.0,))
    assert bootstrapped_return(term, q, pi, 0.9) == pytest.approx(3.0)


def test_truncated_return_accumulation():
    traj = Trajectory(start=(0, 0), states=(0, 0), actions=(0,), rewards=(1.0, 2.0))
    assert truncated_return(traj, 0.5) == pytest.approx(2.0)


def test_mdp_serialization_roundtrip(tmp_path):
    rng = make_rng(9)
    mdp = random_mdp(rng)
    path = tmp_path / "model.mdp"
    save_mdp(mdp, path)
    loaded = load_mdp(path)
    assert loaded.n_states == mdp.n_states
    assert loaded.n_actions == mdp.n_actions
    assert loaded.gamma == mdp.gamma
    assert loaded.terminal == mdp.terminal
    assert np.array_equal(loaded.initial_dist, mdp.initial_dist)
    assert loaded.transitions == mdp.transitions
