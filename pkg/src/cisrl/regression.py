"""Online estimation of conditional importance weights.

Weights are fit by empirical least squares, solved exactly per observed key:
the plain objective minimises the squared gap between the predicted weight
and the realised trajectory ratio, whose per-key minimiser is the group mean
of the ratios; the psi-weighted objective scales each squared gap by the
target value squared, whose minimiser is the psi^2-weighted group mean.
Both reduce to four running sums per key.
"""
from __future__ import annotations

import csv
import math
from typing import Sequence

from .errors import MissingWeightError
from .mdp import Policy, Trajectory, importance_ratio

OBJECTIVES = ("plain", "psi_weighted")


class WeightStore:
    """Keyed accumulators for conditional-weight regression.

    Each (start pair, conditioner key) holds (count, sum_rho, sum_psi2,
    sum_rho_psi2). ``query`` returns the empirical objective minimiser:
    sum_rho/count for the plain objective, sum_rho_psi2/sum_psi2 for the
    psi-weighted one (falling back to the plain mean when every observed psi
    was 0, where the weighted objective is flat).

    Single-writer; concurrent readers are fine between write phases.
    """

    def __init__(self, objective: str = "plain", fallback_raw_rho: bool = True):
        if objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
        self.objective = objective
        self.fallback_raw_rho = fallback_raw_rho
        self._acc: dict = {}

    def __len__(self) -> int:
        return len(self._acc)

    def observe(self, start: tuple[int, int], key, rho: float, psi: float = 0.0) -> None:
        if not (math.isfinite(rho) and math.isfinite(psi)):
            raise ValueError(f"non-finite observation rho={rho}, psi={psi}")
        if rho < 0:
            raise ValueError(f"importance ratios are non-negative, got {rho}")
        full = (start, key)
        acc = self._acc.get(full)
        psi2 = psi * psi
        if acc is None:
            self._acc[full] = [1, rho, psi2, rho * psi2]
        else:
            acc[0] += 1
            acc[1] += rho
            acc[2] += psi2
            acc[3] += rho * psi2

    def query(self, start: tuple[int, int], key, raw_rho: float | None = None) -> float:
        acc = self._acc.get((start, key))
        if acc is None:
            if self.fallback_raw_rho and raw_rho is not None:
                return raw_rho
            raise MissingWeightError((start, key))
        count, sum_rho, sum_psi2, sum_rho_psi2 = acc
        if self.objective == "psi_weighted" and sum_psi2 > 0.0:
            return sum_rho_psi2 / sum_psi2
        return sum_rho / count

    def items(self):
        for (start, key), (count, sum_rho, sum_psi2, sum_rho_psi2) in self._acc.items():
            yield start, key, count, sum_rho, sum_psi2, sum_rho_psi2

    def dump_csv(self, path) -> None:
        """Debug dump: one row per key with its count and current weight."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "a", "key", "count", "weight"])
            for start, key, count, *_ in self.items():
                w.writerow([start[0], start[1], repr(key), count, repr(self.query(start, key))])


def fit_batch(
    trajectories: Sequence[Trajectory],
    phi,
    pi: Policy,
    mu: Policy,
    objective: str = "plain",
    gamma: float | None = None,
) -> WeightStore:
    """Fold a trajectory batch into a fresh store, keyed by the conditioner.

    All trajectories must share one horizon. psi is the conditioner's natural
    target: the truncated return for return-targeting conditioners (requires
    ``gamma``), R_t for per-reward ones. The result is order-independent up to
    float summation noise.
    """
    store = WeightStore(objective=objective)
    trajectories = list(trajectories)
    if not trajectories:
        return store
    h = trajectories[0].horizon
    if any(traj.horizon != h for traj in trajectories):
        raise ValueError("all trajectories in a batch must share the same horizon")
    needs_gamma = phi.variant in ("full", "const", "return", "reward_seq")
    if needs_gamma and gamma is None:
        raise ValueError(f"conditioner {phi.variant!r} targets the return; pass gamma")
    for traj in trajectories:
        rho = importance_ratio(traj, pi, mu, 1, h - 1)
        if needs_gamma:
            g = 0.0
            w = 1.0
            for r in traj.rewards:
                g += w * r
                w *= gamma
            psi = g
            key = phi.key(traj, gamma)
        else:
            psi = traj.rewards[phi.t]
            key = phi.key(traj, 0.0)
        store.observe(traj.start, key, rho, psi)
    return store
