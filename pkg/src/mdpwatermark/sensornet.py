"""Power-managed sensing node with a transmission queue.

A power manager switches a sensing node between eco and performance
mode.  The composite state is (node state, queue length): the node is
asleep (0) or active (1), and wakes next step with probability ``p0``
under eco mode or ``p1`` under performance mode, regardless of its
current state.  An active node enqueues one packet per step; the
transmission head dequeues one packet per step with probability
``r_trans`` when the queue is nonempty; overflow beyond the queue bound
is dropped.  Within a step the departure is resolved before the
arrival.

The step cost charges the queue length and credits expected activity,
``h((s, q), a) = q - rho * (p0 + (p1 - p0) * a)``; since a sleeping node
misses an independent scene change with probability ``p_scene``, the
credit term is a soft constraint on the scene miss rate, and
``p_scene`` itself does not enter the dynamics.

Manager policies are threshold rules on the queue: performance mode
when the queue length does not exceed the threshold, eco mode above it,
with the preferred action kept with probability ``1 - beta`` when a
watermark of magnitude ``beta`` is mixed in.  Change detection for this
model runs on the node-state component of the reported observations,
whose nominal conditional law depends only on the action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import CostFunction, Policy, Trajectory, TransitionKernel, discounted_cost


@dataclass(frozen=True)
class PowerModelParams:
    """Model parameters; the defaults are the reference case study values."""

    n_queue: int = 20
    p0: float = 0.2
    p1: float = 0.8
    p_scene: float = 0.5
    r_trans: float = 0.8
    rho: float = 20.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.n_queue < 1:
            raise ValueError("queue bound must be >= 1")
        if not (0.0 < self.p0 < self.p1 < 1.0):
            raise ValueError("activation probabilities must satisfy 0 < p0 < p1 < 1")
        for name in ("p_scene", "r_trans"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.rho > 0:
            raise ValueError("activity-reward weight rho must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("discount factor must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return 2 * (self.n_queue + 1)


@dataclass(frozen=True)
class CompositeState:
    """Node state (0 sleep / 1 active) and queue length."""

    s: int
    q: int

    def flat(self, n_queue: int) -> int:
        return state_index(self.s, self.q, n_queue)


def state_index(s: int, q: int, n_queue: int) -> int:
    """Flat index ``s * (n_queue + 1) + q``."""
    if s not in (0, 1) or not (0 <= q <= n_queue):
        raise ValueError(f"composite state ({s}, {q}) out of range")
    return s * (n_queue + 1) + q


def state_unindex(idx: int, n_queue: int) -> CompositeState:
    width = n_queue + 1
    if not (0 <= idx < 2 * width):
        raise ValueError(f"flat state {idx} out of range")
    return CompositeState(s=idx // width, q=idx % width)


def build_model(params: PowerModelParams) -> tuple[TransitionKernel, CostFunction]:
    """Transition kernel and cost table of the power-management MDP."""
    nq = params.n_queue
    width = nq + 1
    n = params.n_states
    R = np.zeros((n * 2, n))
    h = np.zeros((n, 2))
    for s in (0, 1):
        for q in range(width):
            i = state_index(s, q, nq)
            arrival = 1 if s == 1 else 0
            for a in (0, 1):
                p_act = params.p0 + (params.p1 - params.p0) * a
                if q == 0:
                    q_dist = {min(arrival, nq): 1.0}
                else:
                    q_dist: dict[int, float] = {}
                    q_dep = min(q - 1 + arrival, nq)
                    q_stay = min(q + arrival, nq)
                    q_dist[q_dep] = q_dist.get(q_dep, 0.0) + params.r_trans
                    q_dist[q_stay] = q_dist.get(q_stay, 0.0) + (1.0 - params.r_trans)
                row = R[i * 2 + a]
                for q_next, mass in q_dist.items():
                    row[state_index(0, q_next, nq)] += (1.0 - p_act) * mass
                    row[state_index(1, q_next, nq)] += p_act * mass
                h[i, a] = q - params.rho * p_act
    return TransitionKernel(n=n, m=2, matrix=R), CostFunction(h)


def threshold_policy(params: PowerModelParams, level: int, beta: float = 0.0) -> Policy:
    """Queue-threshold policy, optionally watermarked.

    Performance mode is preferred when the queue length does not exceed
    ``level`` and eco mode above it; the preferred action is played with
    probability ``1 - beta``.  The rule reads only the queue component.
    """
    if not (0 <= level <= params.n_queue):
        raise ValueError(f"threshold must lie in [0, {params.n_queue}], got {level}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"watermark magnitude must lie in [0, 1], got {beta}")
    g = np.zeros((params.n_states, 2))
    for s in (0, 1):
        for q in range(params.n_queue + 1):
            i = state_index(s, q, params.n_queue)
            preferred = 1 if q <= level else 0
            g[i, preferred] = 1.0 - beta
            g[i, 1 - preferred] = beta
    return Policy(g)


def find_optimal_threshold(params: PowerModelParams, levels) -> tuple[int, list[tuple[int, float]]]:
    """Exact policy evaluation over a threshold range.

    Evaluates the discounted cost of each deterministic threshold policy
    from the empty-sleeping initial state and returns the minimizer
    (ties to the smaller threshold) with the full cost table.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("threshold range is empty")
    R, h = build_model(params)
    x0 = state_index(0, 0, params.n_queue)
    table: list[tuple[int, float]] = []
    for level in levels:
        eta = discounted_cost(R, threshold_policy(params, level), h, params.alpha)
        table.append((level, float(eta[x0])))
    best_level, _ = min(table, key=lambda lc: (lc[1], lc[0]))
    return best_level, table


def projected_kernel(params: PowerModelParams) -> TransitionKernel:
    """Nominal law of the node-state component given the action.

    Two observations (sleep/active) and two actions; the next node state
    does not depend on the current one, only on the action's activation
    probability.
    """
    rows = np.empty((4, 2))
    for s in (0, 1):
        for a in (0, 1):
            p_act = params.p0 + (params.p1 - params.p0) * a
            rows[s * 2 + a] = (1.0 - p_act, p_act)
    return TransitionKernel(n=2, m=2, matrix=rows)


def node_projection(traj: Trajectory, params: PowerModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Node-state observation stream and action stream for the detector."""
    width = params.n_queue + 1
    return traj.Y // width, np.asarray(traj.A)
