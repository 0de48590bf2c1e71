#!/usr/bin/env python3
"""Benchmark the compiled kernel against the pure-Python fallback.

Times the three hot loops (trajectory simulation with estimator evaluation,
episode sampling, and the TD learning run) on default-sized workloads and
prints the per-call times and speedups. Both backends produce bitwise
identical outputs; the parity is asserted here as well.

Usage: python benchmarks/bench_backends.py
"""
import time

import numpy as np

from cisrl._kernels import _pyfallback
from cisrl.environments import ChainSpec, build_chain, random_dirichlet_policy, random_q_function
from cisrl.exact import return_pmfs, solve_q_pi, state_marginals
from cisrl.learning import build_oracle_data, mse_pair_weights, policy_cum, tile_layout
from cisrl.mdp import mix_policies, state_value
from cisrl.rng import make_rng

try:
    from cisrl._kernels import _core
except ImportError:
    _core = None


def _time(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    mdp = build_chain(ChainSpec(noise=0.1))
    rng = make_rng(1)
    pi_raw = random_dirichlet_policy(mdp, rng)
    mu = random_dirichlet_policy(mdp, rng)
    target = mix_policies(pi_raw, mu, 0.5)
    q = random_q_function(mdp, 0.1, rng)
    t = mdp.tables()
    A = t.n_actions
    mu_mat, mu_cum, pi_mat = mu.matrix(A), policy_cum(mu, A), target.matrix(A)

    n = 5
    samples = 20_000
    v_pi = np.array([state_value(q, target, x) for x in range(mdp.n_states)])
    mu_pmf = return_pmfs(mdp, mu, (3, 1), n)[n - 1]
    pi_pmf = return_pmfs(mdp, target, (3, 1), n)[n - 1]
    rcis_table = {gq: pi_pmf.get(gq, 0.0) / m for gq, m in mu_pmf.items()}
    m_mu = state_marginals(mdp, mu, (3, 1), n)
    m_pi = state_marginals(mdp, target, (3, 1), n)
    scis_ratio = np.where(m_mu > 0, m_pi / np.where(m_mu > 0, m_mu, 1.0), 0.0)
    kinds = [0, 1, 3, 4]
    uniforms = make_rng(2).random((samples, 2 * n))

    backends = [("python", _pyfallback)] + ([("cython", _core)] if _core else [])
    results = {}

    print(f"operator estimates: {samples} trajectories x {len(kinds)} estimators, n={n}")
    outs = {}
    for name, impl in backends:
        out = np.empty((samples, len(kinds)))
        dt = _time(
            lambda impl=impl, out=out: impl.operator_estimates(
                t.n_act, t.off, t.ns, t.rew, t.cum, A, mu_mat, mu_cum, pi_mat,
                3, 1, n, mdp.gamma, v_pi, kinds, rcis_table, scis_ratio, {}, uniforms, out,
            )
        )
        outs[name] = out.copy()
        results[("operator", name)] = dt
        print(f"  {name:7s} {dt * 1e3:9.1f} ms")
    if len(outs) == 2:
        assert np.array_equal(outs["python"], outs["cython"]), "backend outputs differ"

    episodes, cap = 2000, 100
    ep_uniforms = make_rng(3).random((episodes, 1 + 2 * cap))
    nu_cum = np.cumsum(mdp.initial_dist)
    print(f"episode sampling: {episodes} episodes, cap {cap}")
    batches = {}
    for name, impl in backends:
        dt = _time(
            lambda impl=impl: impl.sample_episode_batch(
                t.n_act, t.terminal, t.off, t.ns, t.rew, t.cum, A, mu_cum, nu_cum, ep_uniforms, cap
            )
        )
        batches[name] = impl.sample_episode_batch(
            t.n_act, t.terminal, t.off, t.ns, t.rew, t.cum, A, mu_cum, nu_cum, ep_uniforms, cap
        )
        results[("episodes", name)] = dt
        print(f"  {name:7s} {dt * 1e3:9.1f} ms")

    batch = batches[backends[-1][0]]
    n_learn = 3
    q_pi = solve_q_pi(mdp, target)
    pairs, pair_w = mse_pair_weights(mdp, "uniform")
    seg_a, seg_b, coef_a, coef_b = tile_layout(mdp.n_states)
    rcis_tables = build_oracle_data(mdp, target, mu, n_learn, "rcis")
    print(f"learning run: {episodes} episodes, return-conditioned oracle weights, n={n_learn}")
    for name, impl in backends:
        def run(impl=impl):
            qtab = np.zeros((mdp.n_states, A))
            tile_w = np.zeros((mdp.n_states - 3, A))
            mse = np.zeros(episodes + 1)
            impl.learning_run(
                t.n_act, t.terminal, A, pi_mat, mu_mat,
                batch[0], batch[1], batch[2], batch[3], batch[4], batch[5],
                n_learn, mdp.gamma, 0.1, 3, 1, 1, 0,
                rcis_tables, np.zeros((1, 1, 1)), None, None,
                0, qtab, tile_w, seg_a, seg_b, coef_a, coef_b,
                q_pi, pairs, pair_w, mse,
            )
        dt = _time(run)
        results[("learning", name)] = dt
        print(f"  {name:7s} {dt * 1e3:9.1f} ms")

    if _core:
        print("speedups (python / cython):")
        for stage in ("operator", "episodes", "learning"):
            ratio = results[(stage, "python")] / results[(stage, "cython")]
            print(f"  {stage:9s} {ratio:6.1f}x")
    else:
        print("compiled kernel not available; built fallback timings only")


if __name__ == "__main__":
    main()
