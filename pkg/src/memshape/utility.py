"""Per-step utility from matching rollout steps against the memory graph.

``U_t = r_hat * rho * s`` where ``r_hat`` is the matched node's estimated
reward, ``rho`` the Jaccard similarity of goal sets, and ``s`` the step
similarity (action agreement plus positional overlap).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .memory_graph import MemoryGraph, Step


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def step_similarity(agent: Step, stored: Step, d_max: float, w_action: float = 0.5,
                    w_position: float = 0.5) -> float:
    s = w_action * (agent.action == stored.action)
    if agent.position is not None and stored.position is not None:
        dist = abs(agent.position[0] - stored.position[0]) + abs(agent.position[1] - stored.position[1])
        s += w_position * max(0.0, 1.0 - dist / d_max)
    else:
        s += w_position * (agent.obs_key == stored.obs_key)
    return float(s)


@dataclass
class MatchState:
    """Last matched step index per node, for the episode in progress."""
    pointers: dict[int, int] = field(default_factory=dict)

    def clear(self) -> None:
        self.pointers.clear()


@dataclass
class UtilityTrace:
    utility: np.ndarray
    node_ids: np.ndarray  # -1 where unmatched
    step_indices: np.ndarray
    r_hat: np.ndarray
    rho: np.ndarray
    similarity: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "UtilityTrace":
        return cls(np.zeros(n), np.full(n, -1), np.full(n, -1), np.zeros(n), np.zeros(n), np.zeros(n))

    @property
    def match_rate(self) -> float:
        return float(np.mean(self.node_ids >= 0)) if len(self.node_ids) else 0.0


def compute_utility(graph: MemoryGraph, obs_keys: Sequence[str], actions: Sequence[int],
                    positions: Sequence, episode_ends: Sequence[bool], match_state: MatchState,
                    d_max: float, w_action: float = 0.5, w_position: float = 0.5,
                    target_goals=None) -> UtilityTrace:
    """Greedy monotone matching of each step to the best stored node step.

    Candidates for step t are index hits on ``obs_keys[t]`` whose step index
    lies beyond the node's pointer. The candidate maximizing ``r_hat*rho*s``
    wins (ties: lowest node id, then lowest step index) and advances the
    pointer. Pointers reset after each ``episode_ends[t]``; ``match_state``
    is left holding the pointers of a trailing unfinished episode.
    """
    n = len(obs_keys)
    trace = UtilityTrace.empty(n)
    if not graph.trajectories:
        for t in range(n):
            if episode_ends[t]:
                match_state.clear()
        return trace
    target = graph.goal_set(graph.goal.node_id) if target_goals is None else frozenset(target_goals)
    rho_cache: dict[int, float] = {}
    pointers = match_state.pointers
    nodes = graph.trajectories
    for t in range(n):
        hits = graph.lookup(obs_keys[t])
        if hits:
            agent = Step(obs_keys[t], int(actions[t]), positions[t])
            best = None
            for nid, j in hits:
                if j <= pointers.get(nid, -1):
                    continue
                node = nodes[nid]
                rho = rho_cache.get(nid)
                if rho is None:
                    rho = rho_cache[nid] = jaccard(target, graph.goal_set(node))
                s = step_similarity(agent, node.steps[j], d_max, w_action, w_position)
                value = node.estimated_reward * rho * s
                if best is None or value > best[0] or (value == best[0] and (nid, j) < (best[1], best[2])):
                    best = (value, nid, j, node.estimated_reward, rho, s)
            if best is not None:
                value, nid, j, r_hat, rho, s = best
                pointers[nid] = j
                trace.utility[t] = value
                trace.node_ids[t] = nid
                trace.step_indices[t] = j
                trace.r_hat[t] = r_hat
                trace.rho[t] = rho
                trace.similarity[t] = s
        if episode_ends[t]:
            match_state.clear()
    return trace


def episode_mean_utility(utility: np.ndarray | UtilityTrace, start: int, end: int) -> float:
    """Mean utility over steps ``start`` (inclusive) to ``end`` (exclusive)."""
    u = utility.utility if isinstance(utility, UtilityTrace) else np.asarray(utility)
    if not 0 <= start < end <= len(u):
        raise ValueError(f"invalid episode bounds [{start}, {end}) for length {len(u)}")
    return float(np.mean(u[start:end]))
