# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend for the hot sampling/estimation loops.

Mirrors `_pyfallback` function for function; argument conventions, uniform
consumption and floating-point operation order are identical so both
backends produce bitwise-equal results from the same inputs. Keep the two in
lockstep when editing.
"""
import numpy as np

from ..errors import MissingWeightError

OIS, PDIS, UNCORRECTED, RCIS, SCIS, REWARD_CIS = 0, 1, 2, 3, 4, 5
ANALYTIC, ORACLE, ONLINE = 0, 1, 2

TAG_RETURN, TAG_SAR, TAG_XN, TAG_REWARD = 0, 1, 2, 3

cdef int C_OIS = 0, C_PDIS = 1, C_UNC = 2, C_RCIS = 3, C_SCIS = 4, C_RCIS_R = 5
cdef int C_ORACLE = 1, C_ONLINE = 2


cdef inline int _pick_action(const double[:, ::1] pol_cum, const int[::1] n_act, int x, double u) nogil:
    cdef int na = n_act[x]
    cdef int a = na - 1
    cdef int j
    for j in range(na):
        if u < pol_cum[x, j]:
            a = j
            break
    return a


cdef inline long _pick_outcome(const long[::1] off, const double[::1] cum_arr, int x, int a, int A, double u) nogil:
    cdef long lo = off[x * A + a]
    cdef long hi = off[x * A + a + 1]
    cdef long idx = hi - 1
    cdef long j
    for j in range(lo, hi):
        if u < cum_arr[j]:
            idx = j
            break
    return idx


def sample_paths(
    const int[::1] n_act,
    const long[::1] off,
    const int[::1] ns_arr,
    const double[::1] rew_arr,
    const double[::1] cum_arr,
    int A,
    const double[:, ::1] mu_cum,
    int x0,
    int a0,
    int n,
    const double[:, ::1] uniforms,
):
    """Draw fixed-start trajectories; one row of 2n uniforms per sample."""
    cdef Py_ssize_t samples = uniforms.shape[0]
    states_np = np.empty((samples, n), dtype=np.int32)
    actions_np = np.empty((samples, max(n - 1, 1)), dtype=np.int32)
    rewards_np = np.empty((samples, n), dtype=np.float64)
    cdef int[:, ::1] states = states_np
    cdef int[:, ::1] actions = actions_np
    cdef double[:, ::1] rewards = rewards_np
    cdef Py_ssize_t s
    cdef int t, k, x, a
    cdef long idx
    for s in range(samples):
        k = 0
        x = x0
        a = a0
        for t in range(n):
            if t > 0:
                a = _pick_action(mu_cum, n_act, x, uniforms[s, k])
                k += 1
                actions[s, t - 1] = a
            idx = _pick_outcome(off, cum_arr, x, a, A, uniforms[s, k])
            k += 1
            rewards[s, t] = rew_arr[idx]
            x = ns_arr[idx]
            states[s, t] = x
    return states_np, actions_np, rewards_np


def operator_estimates(
    const int[::1] n_act,
    const long[::1] off,
    const int[::1] ns_arr,
    const double[::1] rew_arr,
    const double[::1] cum_arr,
    int A,
    const double[:, ::1] mu_prob,
    const double[:, ::1] mu_cum,
    const double[:, ::1] pi_prob,
    int x0,
    int a0,
    int n,
    double gamma,
    const double[::1] v_pi,
    est_kinds,
    rcis_table,
    const double[:, ::1] scis_ratio,
    reward_table,
    const double[:, ::1] uniforms,
    double[:, ::1] out,
):
    """Simulate trajectories from one start pair and fill per-sample estimates."""
    cdef Py_ssize_t samples = uniforms.shape[0]
    cdef int n_est = len(est_kinds)
    kinds_np = np.asarray(est_kinds, dtype=np.int32)
    cdef int[::1] kinds = kinds_np
    states_np = np.empty(n + 1, dtype=np.int64)
    rews_np = np.empty(n, dtype=np.float64)
    ratios_np = np.empty(n, dtype=np.float64)
    cdef long[::1] states = states_np
    cdef double[::1] rews = rews_np
    cdef double[::1] ratios = ratios_np
    cdef Py_ssize_t s
    cdef int t, k, x, a, e, kind, xn
    cdef long idx
    cdef double G, w, rho, boot_base, est, acc, rr, ww, wj
    wq_obj = None
    for s in range(samples):
        k = 0
        x = x0
        a = a0
        states[0] = x0
        ratios[0] = 1.0
        for t in range(n):
            if t > 0:
                a = _pick_action(mu_cum, n_act, x, uniforms[s, k])
                k += 1
                ratios[t] = pi_prob[x, a] / mu_prob[x, a]
            idx = _pick_outcome(off, cum_arr, x, a, A, uniforms[s, k])
            k += 1
            rews[t] = rew_arr[idx]
            x = ns_arr[idx]
            states[t + 1] = x
        G = 0.0
        w = 1.0
        rho = 1.0
        for t in range(n):
            if t >= 1:
                rho *= ratios[t]
            G += w * rews[t]
            w *= gamma
        xn = <int> states[n]
        boot_base = w * v_pi[xn]
        for e in range(n_est):
            kind = kinds[e]
            if kind == C_OIS:
                est = rho * (G + boot_base)
            elif kind == C_PDIS:
                acc = 0.0
                rr = 1.0
                ww = 1.0
                for t in range(n):
                    if t >= 1:
                        rr *= ratios[t]
                    acc += rr * (ww * rews[t])
                    ww *= gamma
                est = acc + rho * boot_base
            elif kind == C_UNC:
                est = G + boot_base
            elif kind == C_RCIS:
                wq_obj = rcis_table.get(round(G, 12))
                if wq_obj is None:
                    raise MissingWeightError(("return", n, round(G, 12)))
                est = (<double> wq_obj) * G + rho * boot_base
            elif kind == C_SCIS:
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
            else:
                acc = 0.0
                ww = 1.0
                for t in range(n):
                    if t == 0:
                        acc += 1.0 * (ww * rews[t])
                    else:
                        wq_obj = reward_table.get((t, round(rews[t], 12)))
                        if wq_obj is None:
                            raise MissingWeightError(("reward", n, t, round(rews[t], 12)))
                        acc += (<double> wq_obj) * (ww * rews[t])
                    ww *= gamma
                est = acc + rho * boot_base
            out[s, e] = est


def sample_episode_batch(
    const int[::1] n_act,
    const unsigned char[::1] terminal,
    const long[::1] off,
    const int[::1] ns_arr,
    const double[::1] rew_arr,
    const double[::1] cum_arr,
    int A,
    const double[:, ::1] mu_cum,
    const double[::1] nu_cum,
    const double[:, ::1] uniforms,
    int cap,
):
    """Sample behaviour episodes from the initial distribution until absorption or cap."""
    cdef Py_ssize_t episodes = uniforms.shape[0]
    cdef int S = nu_cum.shape[0]
    ep_off_np = np.zeros(episodes + 1, dtype=np.int64)
    xs_np = np.empty(episodes * cap, dtype=np.int32)
    as_np = np.empty(episodes * cap, dtype=np.int32)
    rs_np = np.empty(episodes * cap, dtype=np.float64)
    last_np = np.empty(episodes, dtype=np.int32)
    absorbed_np = np.empty(episodes, dtype=np.uint8)
    cdef long[::1] ep_off = ep_off_np
    cdef int[::1] xs = xs_np
    cdef int[::1] acts = as_np
    cdef double[::1] rs = rs_np
    cdef int[::1] last = last_np
    cdef unsigned char[::1] absorbed = absorbed_np
    cdef Py_ssize_t e
    cdef long pos = 0
    cdef int x, a, k, steps, j
    cdef long idx
    cdef double u
    for e in range(episodes):
        u = uniforms[e, 0]
        x = S - 1
        for j in range(S):
            if u < nu_cum[j]:
                x = j
                break
        k = 1
        steps = 0
        while terminal[x] == 0 and steps < cap:
            a = _pick_action(mu_cum, n_act, x, uniforms[e, k])
            k += 1
            idx = _pick_outcome(off, cum_arr, x, a, A, uniforms[e, k])
            k += 1
            xs[pos] = x
            acts[pos] = a
            rs[pos] = rew_arr[idx]
            x = ns_arr[idx]
            steps += 1
            pos += 1
        ep_off[e + 1] = pos
        last[e] = x
        absorbed[e] = 1 if terminal[x] else 0
    return ep_off_np, xs_np[:pos].copy(), as_np[:pos].copy(), rs_np[:pos].copy(), last_np, absorbed_np


cdef inline void _store_observe(dict store, object key, double rho, double psi):
    cdef double psi2 = psi * psi
    acc = store.get(key)
    if acc is None:
        store[key] = [1, rho, psi2, rho * psi2]
    else:
        acc[0] += 1
        acc[1] += rho
        acc[2] += psi2
        acc[3] += rho * psi2


cdef inline double _store_query(dict store, object key, double raw_rho, int objective_psi):
    acc = store.get(key)
    if acc is None:
        return raw_rho
    if objective_psi and (<double> acc[2]) > 0.0:
        return (<double> acc[3]) / (<double> acc[2])
    return (<double> acc[1]) / (<double> acc[0])


def learning_run(
    const int[::1] n_act,
    const unsigned char[::1] terminal,
    int A,
    const double[:, ::1] pi_prob,
    const double[:, ::1] mu_prob,
    const long[::1] ep_off,
    const int[::1] ep_x,
    const int[::1] ep_a,
    const double[::1] ep_r,
    const int[::1] ep_last,
    const unsigned char[::1] ep_absorbed,
    int n,
    double gamma,
    double alpha,
    int est_kind,
    int weight_mode,
    int update_then_query,
    int objective_psi,
    rcis_tables,
    const double[:, :, ::1] scis_ratio,
    reward_tables,
    store,
    int repr_kind,
    double[:, ::1] qtab,
    double[:, ::1] tile_w,
    const int[::1] seg_a,
    const int[::1] seg_b,
    const double[::1] coef_a,
    const double[::1] coef_b,
    const double[:, ::1] q_pi,
    const int[:, ::1] pairs,
    const double[::1] pair_w,
    double[::1] mse_out,
):
    """Replay an episode batch through one n-step TD learner, recording MSE."""
    cdef Py_ssize_t episodes = ep_off.shape[0] - 1
    cdef int n_pairs = pairs.shape[0]
    cdef dict store_d = store if store is not None else {}
    cdef dict rcis_d = rcis_tables if rcis_tables is not None else {}
    cdef dict rew_d = reward_tables if reward_tables is not None else {}
    cdef list keys = []
    cdef list psis = []
    cdef Py_ssize_t e
    cdef long s0, idx
    cdef int T, t, m, h, x0, a0, pair, boot, j, ki, xj, aj, p, absorbed
    cdef double G, w, rho, v_boot, boot_base, target, acc, rr, ww, wj, wb, delta, d, mse_acc
    wq_obj = None

    mse_acc = 0.0
    for p in range(n_pairs):
        d = _q_value(repr_kind, qtab, tile_w, seg_a, seg_b, coef_a, coef_b, pairs[p, 0], pairs[p, 1]) - q_pi[pairs[p, 0], pairs[p, 1]]
        mse_acc += pair_w[p] * (d * d)
    mse_out[0] = mse_acc

    for e in range(episodes):
        s0 = ep_off[e]
        T = <int> (ep_off[e + 1] - s0)
        absorbed = ep_absorbed[e]
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
            boot = ep_x[s0 + t + n] if t + n < T else ep_last[e]
            v_boot = 0.0
            for j in range(n_act[boot]):
                v_boot += pi_prob[boot, j] * _q_value(repr_kind, qtab, tile_w, seg_a, seg_b, coef_a, coef_b, boot, j)
            boot_base = w * v_boot

            if est_kind == C_OIS:
                target = rho * (G + boot_base)
            elif est_kind == C_PDIS:
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
            elif est_kind == C_UNC:
                target = G + boot_base
            elif est_kind == C_RCIS:
                gq = round(G, 12)
                if weight_mode == C_ORACLE:
                    wq_obj = rcis_d.get((pair, h, gq))
                    if wq_obj is None:
                        raise MissingWeightError((pair, h, gq))
                    wj = <double> wq_obj
                else:
                    key = (pair, h, TAG_RETURN, gq)
                    if update_then_query:
                        _store_observe(store_d, key, rho, G)
                    wj = _store_query(store_d, key, rho, objective_psi)
                    if not update_then_query:
                        _store_observe(store_d, key, rho, G)
                target = wj * G + rho * boot_base
            elif est_kind == C_SCIS:
                if weight_mode == C_ONLINE:
                    del keys[:]
                    del psis[:]
                    ww = 1.0
                    for j in range(m):
                        idx = s0 + t + j
                        if j >= 1:
                            keys.append((pair, h, TAG_SAR, j, ep_x[idx], ep_a[idx], round(ep_r[idx], 12)))
                            psis.append(ww * ep_r[idx])
                        ww *= gamma
                    keys.append((pair, h, TAG_XN, boot))
                    psis.append(boot_base)
                    if update_then_query:
                        for ki in range(len(keys)):
                            _store_observe(store_d, keys[ki], rho, <double> psis[ki])
                acc = 0.0
                ww = 1.0
                ki = 0
                for j in range(m):
                    idx = s0 + t + j
                    if j == 0:
                        acc += 1.0 * (ww * ep_r[idx])
                    else:
                        xj = ep_x[idx]
                        aj = ep_a[idx]
                        if weight_mode == C_ORACLE:
                            wj = scis_ratio[pair, j, xj] * (pi_prob[xj, aj] / mu_prob[xj, aj])
                        else:
                            wj = _store_query(store_d, keys[ki], rho, objective_psi)
                            ki += 1
                        acc += wj * (ww * ep_r[idx])
                    ww *= gamma
                if weight_mode == C_ORACLE:
                    wb = scis_ratio[pair, m, boot]
                else:
                    wb = _store_query(store_d, keys[ki], rho, objective_psi)
                if weight_mode == C_ONLINE and not update_then_query:
                    for ki in range(len(keys)):
                        _store_observe(store_d, keys[ki], rho, <double> psis[ki])
                target = acc + wb * boot_base
            else:
                if weight_mode == C_ONLINE:
                    del keys[:]
                    del psis[:]
                    ww = 1.0
                    for j in range(m):
                        idx = s0 + t + j
                        if j >= 1:
                            keys.append((pair, h, TAG_REWARD, j, round(ep_r[idx], 12)))
                            psis.append(ww * ep_r[idx])
                        ww *= gamma
                    if update_then_query:
                        for ki in range(len(keys)):
                            _store_observe(store_d, keys[ki], rho, <double> psis[ki])
                acc = 0.0
                ww = 1.0
                ki = 0
                for j in range(m):
                    idx = s0 + t + j
                    if j == 0:
                        acc += 1.0 * (ww * ep_r[idx])
                    else:
                        if weight_mode == C_ORACLE:
                            wq_obj = rew_d.get((pair, j, round(ep_r[idx], 12)))
                            if wq_obj is None:
                                raise MissingWeightError((pair, j, round(ep_r[idx], 12)))
                            wj = <double> wq_obj
                        else:
                            wj = _store_query(store_d, keys[ki], rho, objective_psi)
                            ki += 1
                        acc += wj * (ww * ep_r[idx])
                    ww *= gamma
                if weight_mode == C_ONLINE and not update_then_query:
                    for ki in range(len(keys)):
                        _store_observe(store_d, keys[ki], rho, <double> psis[ki])
                target = acc + rho * boot_base

            delta = alpha * (target - _q_value(repr_kind, qtab, tile_w, seg_a, seg_b, coef_a, coef_b, x0, a0))
            if repr_kind == 0:
                qtab[x0, a0] += delta
            else:
                tile_w[seg_a[x0], a0] += delta * coef_a[x0]
                tile_w[seg_b[x0], a0] += delta * coef_b[x0]
        mse_acc = 0.0
        for p in range(n_pairs):
            d = _q_value(repr_kind, qtab, tile_w, seg_a, seg_b, coef_a, coef_b, pairs[p, 0], pairs[p, 1]) - q_pi[pairs[p, 0], pairs[p, 1]]
            mse_acc += pair_w[p] * (d * d)
        mse_out[e + 1] = mse_acc


cdef inline double _q_value(
    int repr_kind,
    double[:, ::1] qtab,
    double[:, ::1] tile_w,
    const int[::1] seg_a,
    const int[::1] seg_b,
    const double[::1] coef_a,
    const double[::1] coef_b,
    int x,
    int a,
) nogil:
    if repr_kind == 0:
        return qtab[x, a]
    return coef_a[x] * tile_w[seg_a[x], a] + coef_b[x] * tile_w[seg_b[x], a]
