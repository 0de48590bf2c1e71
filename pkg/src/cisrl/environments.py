"""The chain benchmark environment and random evaluation instances."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import Mdp, Policy

LEFT = 0
RIGHT = 1


@dataclass(frozen=True)
class ChainSpec:
    """Parameters of the chain environment.

    ``n_interior`` interior states sit in a line between two absorbing
    endpoints. Moving pays ``step_reward`` when the successor is interior and
    ``absorb_reward`` when it is an endpoint. With probability ``noise`` the
    realised successor is uniform over the two adjacent states regardless of
    the action. Actions left/right are each replicated ``1 + extra_actions``
    times with identical dynamics. ``initial_state`` is an interior index
    (1-based from the left); the default is the third from the left.
    """

    n_interior: int = 6
    noise: float = 0.0
    extra_actions: int = 0
    step_reward: float = 1.0
    absorb_reward: float = 10.0
    initial_state: int = 3
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_interior < 2:
            raise ValueError("the chain needs at least 2 interior states")
        if not (0.0 <= self.noise <= 1.0):
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")
        if self.extra_actions < 0:
            raise ValueError("extra_actions must be non-negative")
        if not (1 <= self.initial_state <= self.n_interior):
            raise ValueError("initial_state must index an interior state (1-based)")


def build_chain(spec: ChainSpec) -> Mdp:
    """Construct the chain MDP: states 0 and K+1 absorb, 1..K are interior.

    Action index a moves left when a % 2 == 0 and right otherwise, so action
    1 is "right" regardless of replication. The noise event replaces the
    transition with a uniform draw over the two adjacent states, giving the
    intended neighbour total probability (1 - noise) + noise/2.
    """
    K = spec.n_interior
    n_states = K + 2
    n_actions = 2 * (1 + spec.extra_actions)
    terminal = tuple(x == 0 or x == K + 1 for x in range(n_states))
    transitions: dict[tuple[int, int], tuple] = {}
    for x in range(n_states):
        if terminal[x]:
            transitions[(x, 0)] = ((x, 0.0, 1.0),)
            continue
        left_nb, right_nb = x - 1, x + 1
        for a in range(n_actions):
            intended = left_nb if a % 2 == 0 else right_nb
            other = right_nb if a % 2 == 0 else left_nb
            probs = {intended: (1.0 - spec.noise) + spec.noise * 0.5}
            if spec.noise > 0.0:
                probs[other] = spec.noise * 0.5
            outcomes = []
            for ns in sorted(probs):
                r = spec.absorb_reward if terminal[ns] else spec.step_reward
                outcomes.append((ns, r, probs[ns]))
            transitions[(x, a)] = tuple(outcomes)
    initial = np.zeros(n_states)
    initial[spec.initial_state] = 1.0
    return Mdp(
        n_states=n_states,
        n_actions=n_actions,
        gamma=spec.gamma,
        transitions=transitions,
        terminal=terminal,
        initial_dist=initial,
    )


def random_dirichlet_policy(mdp: Mdp, rng: np.random.Generator) -> Policy:
    """Uniform simplex draw per non-terminal state, via normalised exponentials."""
    rows = []
    for x in range(mdp.n_states):
        k = mdp.available_actions(x)
        if k == 1:
            rows.append(np.array([1.0]))
        else:
            e = rng.standard_exponential(k)
            rows.append(e / e.sum())
    return Policy(probs=tuple(rows))


def random_q_function(
    mdp: Mdp,
    std_or_var: float,
    rng: np.random.Generator,
    interpret: str = "variance",
) -> np.ndarray:
    """I.i.d. centred Gaussian Q-table on non-terminal pairs; terminal rows are 0.

    The scale parameter is read as a variance by default ("std" flips it).
    """
    if std_or_var <= 0:
        raise ValueError("the Gaussian scale parameter must be positive")
    if interpret not in ("variance", "std"):
        raise ValueError("interpret must be 'variance' or 'std'")
    scale = math.sqrt(std_or_var) if interpret == "variance" else std_or_var
    q = rng.normal(0.0, scale, size=(mdp.n_states, mdp.n_actions))
    for x in range(mdp.n_states):
        if mdp.terminal[x]:
            q[x, :] = 0.0
    return q
