import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cisrl.errors import MissingWeightError
from cisrl.estimators import return_conditioner, reward_at
from cisrl.exact import enumerate_trajectories, exact_conditional_weight
from cisrl.mdp import sample_trajectory
from cisrl.regression import WeightStore, fit_batch
from cisrl.rng import make_rng
from cisrl.verify import branch_mdp, branch_policies

from conftest import brute_force_argmin


def test_observe_and_query_means():
    store = WeightStore()
    store.observe((0, 0), "k", 1.6, 0.0)
    assert store.query((0, 0), "k") == pytest.approx(1.6)
    store.observe((0, 0), "k", 0.4, 0.0)
    assert store.query((0, 0), "k") == pytest.approx(1.0)


def test_psi_weighted_query_ignores_zero_psi():
    store = WeightStore(objective="psi_weighted")
    store.observe((0, 0), "k", 2.0, 1.0)
    store.observe((0, 0), "k", 0.0, 0.0)
    assert store.query((0, 0), "k") == pytest.approx(2.0)


def test_observe_validates_inputs():
    store = WeightStore()
    with pytest.raises(ValueError):
        store.observe((0, 0), "k", -1.0, 0.0)
    with pytest.raises(ValueError):
        store.observe((0, 0), "k", float("nan"), 0.0)


def test_query_fallback_and_strict_modes():
    store = WeightStore()
    assert store.query((0, 0), "unseen", raw_rho=1.3) == 1.3
    strict = WeightStore(fallback_raw_rho=False)
    with pytest.raises(MissingWeightError, match="unseen"):
        strict.query((0, 0), "unseen", raw_rho=1.3)
    store.observe((1, 0), "k", 2.0, 0.0)
    store.observe((1, 0), "k", 2.0, 0.0)
    store.observe((1, 0), "k", 2.0, 0.0)
    assert store.query((1, 0), "k") == pytest.approx(2.0)


def test_fit_batch_empty_and_identical():
    mdp = branch_mdp()
    pi, mu = branch_policies()
    store = fit_batch([], return_conditioner(), pi, mu, gamma=mdp.gamma)
    assert len(store) == 0
    assert store.query((0, 0), 1.0, raw_rho=0.7) == 0.7

    enum = enumerate_trajectories(mdp, mu, pi, (0, 0), 2)
    traj = enum.atoms[0].trajectory
    rho = enum.atoms[0].p_pi / enum.atoms[0].p_mu
    store = fit_batch([traj] * 5, return_conditioner(), pi, mu, gamma=mdp.gamma)
    assert len(store) == 1
    assert store.query(traj.start, 1.0) == pytest.approx(rho, abs=1e-12)


def test_fit_batch_matches_exact_table_on_full_support():
    # atoms repeated proportionally to their behaviour probability
    mdp = branch_mdp()
    pi, mu = branch_policies()
    enum = enumerate_trajectories(mdp, mu, pi, (0, 0), 2)
    batch = []
    for atom in enum.atoms:
        batch.extend([atom.trajectory] * int(round(atom.p_mu * 1000)))
    for phi in (return_conditioner(), reward_at(1)):
        store = fit_batch(batch, phi, pi, mu, gamma=mdp.gamma)
        table = exact_conditional_weight(enum, phi).weights
        for key, w in table.items():
            assert store.query((0, 0), key) == pytest.approx(w, abs=1e-12)


def test_fit_batch_rejects_mixed_horizons():
    mdp = branch_mdp()
    pi, mu = branch_policies()
    t1 = sample_trajectory(mdp, mu, (0, 0), 1, make_rng(0))
    t2 = sample_trajectory(mdp, mu, (0, 0), 2, make_rng(0))
    with pytest.raises(ValueError, match="horizon"):
        fit_batch([t1, t2], return_conditioner(), pi, mu, gamma=mdp.gamma)


def test_fit_batch_requires_gamma_for_return_targets():
    mdp = branch_mdp()
    pi, mu = branch_policies()
    traj = sample_trajectory(mdp, mu, (0, 0), 2, make_rng(0))
    with pytest.raises(ValueError, match="gamma"):
        fit_batch([traj], return_conditioner(), pi, mu)


def test_fit_batch_order_invariance():
    mdp = branch_mdp()
    pi, mu = branch_policies()
    rng = make_rng(10)
    batch = [sample_trajectory(mdp, mu, (0, 0), 2, rng) for _ in range(200)]
    store_a = fit_batch(batch, return_conditioner(), pi, mu, gamma=mdp.gamma)
    perm = make_rng(11).permutation(len(batch))
    store_b = fit_batch([batch[i] for i in perm], return_conditioner(), pi, mu, gamma=mdp.gamma)
    for start, key, *_ in store_a.items():
        assert store_a.query(start, key) == pytest.approx(store_b.query(start, key), abs=1e-12)


def test_query_matches_brute_force_minimiser():
    # the store's closed forms solve the empirical objectives
    rng = make_rng(55)
    for _ in range(8):
        k = int(rng.integers(1, 10))
        rhos = rng.standard_exponential(k)
        psis = rng.normal(0.0, 2.0, size=k)
        for objective in ("plain", "psi_weighted"):
            store = WeightStore(objective=objective)
            for rho, psi in zip(rhos, psis):
                store.observe((0, 0), "k", float(rho), float(psi))
            if objective == "plain":
                fn = lambda f: float(np.sum((f - rhos) ** 2))
            else:
                fn = lambda f: float(np.sum(((f - rhos) * psis) ** 2))
            argmin = brute_force_argmin(fn, float(rhos.min()) - 1.0, float(rhos.max()) + 1.0)
            assert store.query((0, 0), "k") == pytest.approx(argmin, abs=1e-8)
            # scipy's bounded search agrees to its own float-flatness floor
            res = minimize_scalar(
                fn, bounds=(float(rhos.min()) - 1, float(rhos.max()) + 1), method="bounded"
            )
            assert store.query((0, 0), "k") == pytest.approx(res.x, abs=1e-6)


def test_online_consistency_small():
    # store estimates drift toward the exact conditional weight as data grows
    mdp = branch_mdp()
    pi, mu = branch_policies()
    rng = make_rng(77)
    batch = [sample_trajectory(mdp, mu, (0, 0), 2, rng) for _ in range(20_000)]
    store = fit_batch(batch, return_conditioner(), pi, mu, gamma=mdp.gamma)
    assert store.query((0, 0), 1.0) == pytest.approx(1.0, abs=0.05)


def test_store_dump(tmp_path):
    store = WeightStore()
    store.observe((3, 1), 1.0, 1.5, 0.0)
    path = tmp_path / "store.csv"
    store.dump_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "x,a,key,count,weight"
    assert text[1].startswith("3,1,")
