import numpy as np
import pytest

from cisrl.environments import build_chain
from cisrl.errors import ConfigError
from cisrl.exact import exact_operator_all
from cisrl.harness import (
    ExperimentConfig,
    bootstrap_ci,
    config_from_mapping,
    config_hash,
    config_to_text,
    default_config,
    parse_config_text,
    run_operator_estimation,
    run_policy_evaluation_experiment,
    _operator_rep,
)
from cisrl.rng import make_rng


def test_bootstrap_ci_constant_samples():
    lo, hi = bootstrap_ci([2.5] * 20, 0.95, 500, make_rng(0))
    assert lo == 2.5 and hi == 2.5


def test_bootstrap_ci_bounded_statistic():
    lo, hi = bootstrap_ci([0.0, 1.0], 0.95, 2000, make_rng(1))
    assert 0.0 <= lo <= hi <= 1.0


def test_bootstrap_ci_width_matches_clt():
    samples = make_rng(2).normal(0.0, 1.0, size=1000)
    lo, hi = bootstrap_ci(samples, 0.95, 4000, make_rng(3))
    width = hi - lo
    expected = 2.0 * 1.96 / np.sqrt(1000)
    assert abs(width - expected) < 0.2 * expected


def test_bootstrap_ci_validation():
    with pytest.raises(ValueError):
        bootstrap_ci([], 0.95, 100, make_rng(0))
    with pytest.raises(ValueError):
        bootstrap_ci([1.0], 1.5, 100, make_rng(0))


def test_config_defaults_match_reported_values():
    op = default_config("operator")
    assert (op.gamma, op.alpha, op.n, op.repetitions) == (0.99, 0.1, 5, 100)
    assert (op.chain_length, op.noise, op.samples) == (6, 0.1, 1000)
    pe = default_config("policy_eval")
    assert (pe.n, pe.repetitions, pe.episodes) == (3, 500, 2000)
    assert pe.gamma == 0.99 and pe.alpha == 0.1


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="operator", beta=1.5)
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="operator", noise=-0.1)
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="operator", repetitions=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="operator", estimators=("rcis:online",))
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="policy_eval", estimators=("bogus",))


def test_config_text_roundtrip():
    cfg = ExperimentConfig(
        experiment="policy_eval", noise=0.5, beta=0.1, n=4, repetitions=7, episodes=12,
        estimators=("ois", "rcis:online"), repr_kind="tilecode", seed=9,
    )
    text = config_to_text(cfg)
    mapping = parse_config_text(text)
    again = config_from_mapping("policy_eval", mapping)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_parse_config_text_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("whatever = 3\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")


def test_table_grid_configs_are_accepted():
    for noise in (0.0, 0.1, 0.5):
        ExperimentConfig(experiment="operator", noise=noise)
    for n in (2, 4, 7):
        ExperimentConfig(experiment="operator", n=n)
    for beta in (0.1, 0.5, 1.0):
        ExperimentConfig(experiment="operator", beta=beta)
    for extra in (0, 1, 3):
        ExperimentConfig(experiment="operator", extra_actions=extra)


def test_grid_extreme_points_run():
    # the costly corners of the parameter grid stay enumeration-free
    cfg = ExperimentConfig(
        experiment="operator", extra_actions=3, samples=20, repetitions=2, seed=1
    )
    res = run_operator_estimation(cfg)
    assert res.curves["ois"].shape == (20, 4)
    cfg7 = ExperimentConfig(experiment="operator", n=7, samples=20, repetitions=2, seed=1)
    res7 = run_operator_estimation(cfg7)
    assert res7.curves["rcis:oracle"].shape == (20, 4)


def test_operator_determinism_and_worker_independence(monkeypatch):
    cfg = ExperimentConfig(experiment="operator", samples=40, repetitions=4, seed=11)
    a = run_operator_estimation(cfg)
    monkeypatch.setenv("CIS_THREADS", "1")
    b = run_operator_estimation(cfg)
    for name in cfg.estimators:
        assert np.array_equal(a.curves[name], b.curves[name])
    assert a.config_hash == b.config_hash


def test_policy_eval_determinism():
    cfg = ExperimentConfig(
        experiment="policy_eval", n=3, episodes=30, repetitions=3, seed=2,
        estimators=("ois", "rcis:online"),
    )
    a = run_policy_evaluation_experiment(cfg)
    b = run_policy_evaluation_experiment(cfg)
    for name in cfg.estimators:
        assert np.array_equal(a.curves[name], b.curves[name])


def test_beta_zero_makes_all_estimators_coincide():
    cfg = ExperimentConfig(experiment="operator", samples=50, repetitions=3, seed=5, beta=0.0)
    res = run_operator_estimation(cfg)
    base = res.curves[cfg.estimators[0]][:, 1]
    for name in cfg.estimators[1:]:
        assert np.max(np.abs(res.curves[name][:, 1] - base)) <= 1e-12

    cfgp = ExperimentConfig(
        experiment="policy_eval", episodes=40, repetitions=2, seed=5, beta=0.0, n=3,
        estimators=("ois", "pdis", "rcis:oracle", "rcis:online", "scis:oracle", "scis:online"),
    )
    resp = run_policy_evaluation_experiment(cfgp)
    basep = resp.curves[cfgp.estimators[0]][:, 1]
    for name in cfgp.estimators[1:]:
        assert np.max(np.abs(resp.curves[name][:, 1] - basep)) <= 1e-12


def test_curves_have_valid_intervals():
    cfg = ExperimentConfig(experiment="operator", samples=30, repetitions=5, seed=8)
    res = run_operator_estimation(cfg)
    for rows in res.curves.values():
        assert np.all(rows[:, 2] <= rows[:, 1] + 1e-15)
        assert np.all(rows[:, 1] <= rows[:, 3] + 1e-15)


def test_mean_estimation_error_is_centred():
    # signed estimation error of each unbiased estimator at the final sample
    # count stays within three bootstrap standard errors of zero
    cfg = ExperimentConfig(experiment="operator", samples=10_000, repetitions=30, seed=13)
    mdp = build_chain(cfg.chain_spec())
    errors = {name: [] for name in cfg.estimators}
    for r in range(cfg.repetitions):
        curves = _operator_rep_signed(cfg, r, mdp)
        for name, value in curves.items():
            errors[name].append(value)
    for name, vals in errors.items():
        vals = np.asarray(vals)
        se_rng = make_rng(999)
        idx = se_rng.integers(0, len(vals), size=(2000, len(vals)))
        boot_se = float(np.std(vals[idx].mean(axis=1)))
        assert abs(vals.mean()) <= 3.0 * boot_se + 1e-12, name


def _operator_rep_signed(cfg, r, mdp):
    """Signed mean estimation error at the final sample count, per estimator."""
    from cisrl import _kernels
    from cisrl.environments import random_dirichlet_policy, random_q_function
    from cisrl.harness import Q_TARGET_VARIANCE, _kernel_kind
    from cisrl.learning import policy_cum
    from cisrl.mdp import mix_policies, state_value
    from cisrl.exact import return_pmfs, state_marginals

    rng = make_rng(cfg.seed + r)
    pi_raw = random_dirichlet_policy(mdp, rng)
    mu = random_dirichlet_policy(mdp, rng)
    target = mix_policies(pi_raw, mu, cfg.beta)
    q = random_q_function(mdp, Q_TARGET_VARIANCE, rng)
    n = cfg.n
    exact_vals = exact_operator_all(mdp, target, q, n)
    v_pi = np.array([state_value(q, target, x) for x in range(mdp.n_states)])
    t = mdp.tables()
    A = t.n_actions
    mu_mat, mu_cum, pi_mat = mu.matrix(A), policy_cum(mu, A), target.matrix(A)
    kinds = [_kernel_kind(s) for s in cfg.schemes()]
    err = {name: 0.0 for name in cfg.estimators}
    pairs = mdp.nonterminal_pairs()
    out = np.empty((cfg.samples, len(kinds)))
    for x, a in pairs:
        mu_pmf = return_pmfs(mdp, mu, (x, a), n)[n - 1]
        pi_pmf = return_pmfs(mdp, target, (x, a), n)[n - 1]
        rcis_table = {gq: pi_pmf.get(gq, 0.0) / m for gq, m in mu_pmf.items()}
        m_mu = state_marginals(mdp, mu, (x, a), n)
        m_pi = state_marginals(mdp, target, (x, a), n)
        scis_ratio = np.where(m_mu > 0, m_pi / np.where(m_mu > 0, m_mu, 1.0), 0.0)
        uniforms = rng.random((cfg.samples, 2 * n))
        _kernels.operator_estimates(
            t.n_act, t.off, t.ns, t.rew, t.cum, A, mu_mat, mu_cum, pi_mat,
            x, a, n, cfg.gamma, v_pi, kinds, rcis_table, scis_ratio, {}, uniforms, out,
        )
        for e, name in enumerate(cfg.estimators):
            err[name] += float(out[:, e].mean() - exact_vals[x, a])
    return {name: v / len(pairs) for name, v in err.items()}


def test_policy_eval_zero_episodes_identical_initial_mse():
    cfg = ExperimentConfig(
        experiment="policy_eval", episodes=0, repetitions=3, seed=6,
        estimators=("ois", "pdis", "rcis:online", "scis:oracle"),
    )
    res = run_policy_evaluation_experiment(cfg)
    rows = [res.curves[name] for name in cfg.estimators]
    assert all(r.shape == (1, 4) for r in rows)
    base = rows[0][0, 1]
    assert all(r[0, 1] == base for r in rows[1:])


def test_operator_zero_variance_instance():
    # deterministic dynamics and deterministic policies: every estimate equals
    # the exact operator value, so the running-mean MSE is 0 at every m
    import numpy as np
    from cisrl import _kernels
    from cisrl.environments import ChainSpec, build_chain
    from cisrl.exact import exact_operator, return_pmfs, state_marginals
    from cisrl.learning import policy_cum
    from cisrl.mdp import state_value
    from conftest import always_action

    mdp = build_chain(ChainSpec(noise=0.0))
    pol = always_action(mdp, 1)
    q = np.zeros((8, 2))
    n = 4
    t = mdp.tables()
    v_pi = np.array([state_value(q, pol, x) for x in range(8)])
    mu_pmf = return_pmfs(mdp, pol, (3, 1), n)[n - 1]
    rcis_table = {gq: 1.0 for gq in mu_pmf}
    m = state_marginals(mdp, pol, (3, 1), n)
    scis_ratio = np.where(m > 0, 1.0, 0.0)
    out = np.empty((50, 4))
    _kernels.operator_estimates(
        t.n_act, t.off, t.ns, t.rew, t.cum, 2,
        pol.matrix(2), policy_cum(pol, 2), pol.matrix(2),
        3, 1, n, mdp.gamma, v_pi,
        [_kernels.OIS, _kernels.PDIS, _kernels.RCIS, _kernels.SCIS],
        rcis_table, scis_ratio, {}, make_rng(1).random((50, 2 * n)), out,
    )
    exact = exact_operator(mdp, pol, q, n, (3, 1))
    assert np.max(np.abs(out - exact)) <= 1e-12


def test_operator_mse_weighting_modes_differ():
    base = dict(experiment="operator", samples=25, repetitions=2, seed=3)
    uni = run_operator_estimation(ExperimentConfig(**base))
    nu = run_operator_estimation(ExperimentConfig(**base, mse_weighting="nu"))
    assert not np.array_equal(uni.curves["ois"], nu.curves["ois"])
