"""Pure-Python backend for the hot sampling/estimation loops.

This module and the compiled `_core` extension implement the same functions
with the same argument conventions, the same uniform-consumption pattern and
the same floating-point operation order, so a given seed produces bitwise
identical results on either backend. Keep the two in lockstep when editing.

Conventions shared by both backends:
  - MDP arrays are the CSR views from `MdpTables` (offsets indexed x*A + a).
  - Policy matrices are zero-padded (S, A); `*_cum` are within-row cumulative
    sums over the available actions.
  - Sampling scans cumulative arrays for the first entry exceeding the
    uniform draw, falling back to the last entry.
  - Estimator kind codes: 0 ois, 1 pdis, 2 uncorrected, 3 rcis, 4 scis,
    5 reward_cis. Weight modes: 0 analytic, 1 oracle, 2 online.
  - Online store: dict mapping key tuples to [count, sum_rho, sum_psi2,
    sum_rho_psi2] lists.
"""
import numpy as np

from ..errors import MissingWeightError

OIS, PDIS, UNCORRECTED, RCIS, SCIS, REWARD_CIS = 0, 1, 2, 3, 4, 5
ANALYTIC, ORACLE, ONLINE = 0, 1, 2

# online-store key tags
TAG_RETURN, TAG_SAR, TAG_XN, TAG_REWARD = 0, 1, 2, 3


def sample_paths(n_act, off, ns_arr, rew_arr, cum_arr, A, mu_cum, x0, a0, n, uniforms):
    """Draw fixed-start trajectories; one row of 2n uniforms per sample.

    Returns (states, actions, rewards): states[s, t] = X_{t+1},
    actions[s, t] = A_{t+1}, rewards[s, t] = R_t.
    """
    samples = uniforms.shape[0]
    states = np.empty((samples, n), dtype=np.int32)
    actions = np.empty((samples, max(n - 1, 1)), dtype=np.int32)
    rewards = np.empty((samples, n), dtype=np.float64)
    for s in range(samples):
        row = uniforms[s]
        k = 0
        x = x0
        a = a0
        for t in range(n):
            if t > 0:
                u = row[k]
                k += 1
                na = n_act[x]
                a = na - 1
                for j in range(na):
                    if u < mu_cum[x, j]:
                        a = j
                        break
                actions[s, t - 1] = a
            u = row[k]
            k += 1
            lo = off[x * A + a]
            hi = off[x * A + a + 1]
            idx = hi - 1
            for j in range(lo, hi):
                if u < cum_arr[j]:
                    idx = j
                    break
            rewards[s, t] = rew_arr[idx]
            x = ns_arr[idx]
            states[s, t] = x
    return states, actions, rewards


def operator_estimates(
    n_act,
    off,
    ns_arr,
    rew_arr,
    cum_arr,
    A,
    mu_prob,
    mu_cum,
    pi_prob,
    x0,
    a0,
    n,
    gamma,
    v_pi,
    est_kinds,
    rcis_table,
    scis_ratio,
    reward_table,
    uniforms,
    out,
):
    """Simulate trajectories from one start pair and fill per-sample estimates.

    out has shape (samples, len(est_kinds)). Oracle tables are keyed by
    quantized values; a missing key raises MissingWeightError.
    """
    samples = uniforms.shape[0]
    n_est = len(est_kinds)
    states = np.empty(n + 1, dtype=np.int64)
    rews = np.empty(n, dtype=np.float64)
    ratios = np.empty(n, dtype=np.float64)
    for s in range(samples):
        row = uniforms[s]
        k = 0
        x = x0
        a = a0
        states[0] = x0
        ratios[0] = 1.0
        for t in range(n):
            if t > 0:
                u = row[k]
                k += 1
                na = n_act[x]
                a = na - 1
                for j in range(na):
                    if u < mu_cum[x, j]:
                        a = j
                        break
                ratios[t] = pi_prob[x, a] / mu_prob[x, a]
            u = row[k]
            k += 1
            lo = off[x * A + a]
            hi = off[x * A + a + 1]
            idx = hi - 1
            for j in range(lo, hi):
                if u < cum_arr[j]:
                    idx = j
                    break
            rews[t] = rew_arr[idx]
            x = ns_arr[idx]
            states[t + 1] = x
        # shared scalars
        G = 0.0
        w = 1.0
        rho = 1.0
        for t in range(n):
            if t >= 1:
                rho *= ratios[t]
            G += w * rews[t]
            w *= gamma
        xn = states[n]
        boot_base = w * v_pi[xn]
        for e in range(n_est):
            kind = est_kinds[e]
            if kind == OIS:
                est = rho * (G + boot_base)
            elif kind == PDIS:
                acc = 0.0
                rr = 1.0
                ww = 1.0
                for t in range(n):
                    if t >= 1:
                        rr *= ratios[t]
                    acc += rr * (ww * rews[t])
                    ww *= gamma
                est = acc + rho * boot_base
            elif kind == UNCORRECTED:
                est = G + boot_base
            elif kind == RCIS:
                wq = rcis_table.get(round(G, 12))
                if wq is None:
                    raise MissingWeightError(("return", n, round(G, 12)))
                est = wq * G + rho * boot_base
            elif kind == SCIS:
                acc = 0.0
                ww = 1.0
                for t in range(n):
                    if t == 0:
                        acc += 1.0 * (ww * rews[t])
                    else:
                        wj = scis_ratio[t, states[t]] * ratios[t]
                        acc += wj * (ww * rews[t])
                    ww *= gamma
                est = acc + scis_ratio[n, xn] * boot_base
            else:  # REWARD_CIS
                acc = 0.0
                ww = 1.0
                for t in range(n):
                    if t == 0:
                        acc += 1.0 * (ww * rews[t])
                    else:
                        wj = reward_table.get((t, round(rews[t], 12)))
                        if wj is None:
                            raise MissingWeightError(("reward", n, t, round(rews[t], 12)))
                        acc += wj * (ww * rews[t])
                    ww *= gamma
                est = acc + rho * boot_base
            out[s, e] = est


def sample_episode_batch(n_act, terminal, off, ns_arr, rew_arr, cum_arr, A, mu_cum, nu_cum, uniforms, cap):
    """Sample behaviour episodes from the initial distribution until absorption or cap.

    One row of 1 + 2*cap uniforms per episode. Returns (ep_off, xs, acts,
    rews, last, absorbed) in concatenated-array form: episode e occupies
    slice ep_off[e]:ep_off[e+1] of xs/acts/rews, ``last[e]`` is the state the
    episode ended in and ``absorbed[e]`` flags termination (vs cap).
    """
    episodes = uniforms.shape[0]
    S = len(nu_cum)
    ep_off = np.zeros(episodes + 1, dtype=np.int64)
    xs_l, as_l, rs_l = [], [], []
    last = np.empty(episodes, dtype=np.int32)
    absorbed = np.empty(episodes, dtype=np.uint8)
    pos = 0
    for e in range(episodes):
        row = uniforms[e]
        u = row[0]
        x = S - 1
        for j in range(S):
            if u < nu_cum[j]:
                x = j
                break
        k = 1
        steps = 0
        while not terminal[x] and steps < cap:
            u = row[k]
            k += 1
            na = n_act[x]
            a = na - 1
            for j in range(na):
                if u < mu_cum[x, j]:
                    a = j
                    break
            u = row[k]
            k += 1
            lo = off[x * A + a]
            hi = off[x * A + a + 1]
            idx = hi - 1
            for j in range(lo, hi):
                if u < cum_arr[j]:
                    idx = j
                    break
            xs_l.append(x)
            as_l.append(a)
            rs_l.append(rew_arr[idx])
            x = ns_arr[idx]
            steps += 1
            pos += 1
        ep_off[e + 1] = pos
        last[e] = x
        absorbed[e] = 1 if terminal[x] else 0
    xs = np.array(xs_l, dtype=np.int32)
    acts = np.array(as_l, dtype=np.int32)
    rews = np.array(rs_l, dtype=np.float64)
    return ep_off, xs, acts, rews, last, absorbed


def _store_observe(store, key, rho, psi):
    acc = store.get(key)
    psi2 = psi * psi
    if acc is None:
        store[key] = [1, rho, psi2, rho * psi2]
    else:
        acc[0] += 1
        acc[1] += rho
        acc[2] += psi2
        acc[3] += rho * psi2


def _store_query(store, key, raw_rho, objective_psi):
    acc = store.get(key)
    if acc is None:
        return raw_rho
    if objective_psi and acc[2] > 0.0:
        return acc[3] / acc[2]
    return acc[1] / acc[0]


def learning_run(
    n_act,
    terminal,
    A,
    pi_prob,
    mu_prob,
    ep_off,
    ep_x,
    ep_a,
    ep_r,
    ep_last,
    ep_absorbed,
    n,
    gamma,
    alpha,
    est_kind,
    weight_mode,
    update_then_query,
    objective_psi,
    rcis_tables,
    scis_ratio,
    reward_tables,
    store,
    repr_kind,
    qtab,
    tile_w,
    seg_a,
    seg_b,
    coef_a,
    coef_b,
    q_pi,
    pairs,
    pair_w,
    mse_out,
):
    """Replay an episode batch through one n-step TD learner, recording MSE.

    Windows start at every visited (state, action); absorbed episodes pad to
    the full horizon through the terminal stay convention (zero rewards,
    unit ratios), cap-truncated episodes shorten the tail windows and their
    key horizon. Updates run in visit order; mse_out[0] is the initial error
    and mse_out[e+1] the error after episode e.
    """
    episodes = len(ep_off) - 1
    n_pairs = pairs.shape[0]
    store = store if store is not None else {}
    rcis_tables = rcis_tables if rcis_tables is not None else {}
    reward_tables = reward_tables if reward_tables is not None else {}

    def q_value(x, a):
        if repr_kind == 0:
            return qtab[x, a]
        return coef_a[x] * tile_w[seg_a[x], a] + coef_b[x] * tile_w[seg_b[x], a]

    def v_value(x):
        acc = 0.0
        for a in range(n_act[x]):
            acc += pi_prob[x, a] * q_value(x, a)
        return acc

    def mse():
        acc = 0.0
        for p in range(n_pairs):
            d = q_value(pairs[p, 0], pairs[p, 1]) - q_pi[pairs[p, 0], pairs[p, 1]]
            acc += pair_w[p] * (d * d)
        return acc

    mse_out[0] = mse()
    keys = []
    psis = []
    for e in range(episodes):
        s0 = ep_off[e]
        T = ep_off[e + 1] - s0
        absorbed = ep_absorbed[e]
        last = ep_last[e]
        for t in range(T):
            m = n if T - t >= n else T - t
            h = n if absorbed else m
            x0 = ep_x[s0 + t]
            a0 = ep_a[s0 + t]
            pair = x0 * A + a0
            G = 0.0
            w = 1.0
            rho = 1.0
            for j in range(m):
                idx = s0 + t + j
                if j >= 1:
                    rho *= pi_prob[ep_x[idx], ep_a[idx]] / mu_prob[ep_x[idx], ep_a[idx]]
                G += w * ep_r[idx]
                w *= gamma
            boot = ep_x[s0 + t + n] if t + n < T else last
            v_boot = v_value(boot)
            boot_base = w * v_boot

            if est_kind == OIS:
                target = rho * (G + boot_base)
            elif est_kind == PDIS:
                acc = 0.0
                rr = 1.0
                ww = 1.0
                for j in range(m):
                    idx = s0 + t + j
                    if j >= 1:
                        rr *= pi_prob[ep_x[idx], ep_a[idx]] / mu_prob[ep_x[idx], ep_a[idx]]
                    acc += rr * (ww * ep_r[idx])
                    ww *= gamma
                target = acc + rho * boot_base
            elif est_kind == UNCORRECTED:
                target = G + boot_base
            elif est_kind == RCIS:
                gq = round(G, 12)
                if weight_mode == ORACLE:
                    wq = rcis_tables.get((pair, h, gq))
                    if wq is None:
                        raise MissingWeightError((pair, h, gq))
                else:
                    key = (pair, h, TAG_RETURN, gq)
                    if update_then_query:
                        _store_observe(store, key, rho, G)
                    wq = _store_query(store, key, rho, objective_psi)
                    if not update_then_query:
                        _store_observe(store, key, rho, G)
                target = wq * G + rho * boot_base
            elif est_kind == SCIS:
                if weight_mode == ONLINE:
                    keys.clear()
                    psis.clear()
                    ww = 1.0
                    for j in range(m):
                        idx = s0 + t + j
                        if j >= 1:
                            keys.append(
                                (pair, h, TAG_SAR, j, ep_x[idx], ep_a[idx], round(ep_r[idx], 12))
                            )
                            psis.append(ww * ep_r[idx])
                        ww *= gamma
                    keys.append((pair, h, TAG_XN, boot))
                    psis.append(boot_base)
                    if update_then_query:
                        for i in range(len(keys)):
                            _store_observe(store, keys[i], rho, psis[i])
                acc = 0.0
                ww = 1.0
                ki = 0
                for j in range(m):
                    idx = s0 + t + j
                    r = ep_r[idx]
                    if j == 0:
                        acc += 1.0 * (ww * r)
                    else:
                        if weight_mode == ORACLE:
                            wj = scis_ratio[pair, j, ep_x[idx]] * (
                                pi_prob[ep_x[idx], ep_a[idx]] / mu_prob[ep_x[idx], ep_a[idx]]
                            )
                        else:
                            wj = _store_query(store, keys[ki], rho, objective_psi)
                            ki += 1
                        acc += wj * (ww * r)
                    ww *= gamma
                if weight_mode == ORACLE:
                    wb = scis_ratio[pair, m, boot]
                else:
                    wb = _store_query(store, keys[ki], rho, objective_psi)
                if weight_mode == ONLINE and not update_then_query:
                    for i in range(len(keys)):
                        _store_observe(store, keys[i], rho, psis[i])
                target = acc + wb * boot_base
            else:  # REWARD_CIS
                if weight_mode == ONLINE:
                    keys.clear()
                    psis.clear()
                    ww = 1.0
                    for j in range(m):
                        idx = s0 + t + j
                        if j >= 1:
                            keys.append((pair, h, TAG_REWARD, j, round(ep_r[idx], 12)))
                            psis.append(ww * ep_r[idx])
                        ww *= gamma
                    if update_then_query:
                        for i in range(len(keys)):
                            _store_observe(store, keys[i], rho, psis[i])
                acc = 0.0
                ww = 1.0
                ki = 0
                for j in range(m):
                    idx = s0 + t + j
                    r = ep_r[idx]
                    if j == 0:
                        acc += 1.0 * (ww * r)
                    else:
                        if weight_mode == ORACLE:
                            wj = reward_tables.get((pair, j, round(r, 12)))
                            if wj is None:
                                raise MissingWeightError((pair, j, round(r, 12)))
                        else:
                            wj = _store_query(store, keys[ki], rho, objective_psi)
                            ki += 1
                        acc += wj * (ww * r)
                    ww *= gamma
                if weight_mode == ONLINE and not update_then_query:
                    for i in range(len(keys)):
                        _store_observe(store, keys[i], rho, psis[i])
                target = acc + rho * boot_base

            delta = alpha * (target - q_value(x0, a0))
            if repr_kind == 0:
                qtab[x0, a0] += delta
            else:
                tile_w[seg_a[x0], a0] += delta * coef_a[x0]
                tile_w[seg_b[x0], a0] += delta * coef_b[x0]
        mse_out[e + 1] = mse()
