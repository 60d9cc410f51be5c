"""Memory graph of goals, subgoals and stored trajectory segments.

The graph holds one target goal, its subgoals (linked by goal-subgoal
edges), and trajectory nodes: short (obs_key, position, action) segments
tagged with a goal term and an estimated reward. An observation index maps
every stored obs_key to the (node_id, step_index) pairs containing it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .exceptions import ConfigError, DanglingReferenceError, PriorParseError
from .gridworlds import EVENT_TAGS

OFFLINE_PRIOR = "offline_prior"
ONLINE_LLM = "online_llm"
AGENT_ROLLOUT = "agent_rollout"
ORIGINS = (OFFLINE_PRIOR, ONLINE_LLM, AGENT_ROLLOUT)


@dataclass(frozen=True)
class Step:
    obs_key: str
    action: int
    position: tuple[int, int] | None = None


@dataclass
class TrajectoryNode:
    node_id: int
    steps: list[Step]
    goal_term: str
    estimated_reward: float
    origin: str = OFFLINE_PRIOR
    pinned: bool = False
    access_score: float = 0.0


@dataclass
class SubgoalNode:
    node_id: str
    label: str
    detection_event: str | None = None


@dataclass
class GoalNode:
    node_id: str
    label: str
    subgoal_children: list[str] = field(default_factory=list)


class MemoryGraph:
    """Goal, subgoals and trajectory segments plus the observation index.

    Parameters
    ----------
    goal : GoalNode
        The agent's target goal.
    subgoals : iterable of SubgoalNode
    cap : int
        Maximum number of trajectory nodes kept after :meth:`prune`.
    decay : float
        Multiplier applied to every access score at each prune cycle.
    """

    def __init__(self, goal: GoalNode, subgoals: Iterable[SubgoalNode] = (), cap: int = 256,
                 decay: float = 0.99):
        if cap < 1:
            raise ConfigError("memory cap must be >= 1")
        if not 0.0 < decay <= 1.0:
            raise ConfigError("access decay must be in (0, 1]")
        self.goal = goal
        self.subgoals: dict[str, SubgoalNode] = {}
        for sg in subgoals:
            self.add_subgoal(sg)
        for child in goal.subgoal_children:
            if child not in self.subgoals:
                raise DanglingReferenceError(f"edge references unknown subgoal {child!r}")
        self.cap = cap
        self.decay = decay
        self.trajectories: dict[int, TrajectoryNode] = {}
        self.index: dict[str, list[tuple[int, int]]] = {}
        self._next_id = 0

    @classmethod
    def single_goal(cls, label: str = "goal", **kwargs) -> "MemoryGraph":
        return cls(GoalNode(label, label), **kwargs)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def node_count(self) -> int:
        return 1 + len(self.subgoals) + len(self.trajectories)

    def add_subgoal(self, subgoal: SubgoalNode) -> None:
        if subgoal.node_id in self.subgoals or subgoal.node_id == self.goal.node_id:
            raise PriorParseError(f"duplicate node id {subgoal.node_id!r}")
        if any(s.label == subgoal.label for s in self.subgoals.values()):
            raise PriorParseError(f"duplicate subgoal label {subgoal.label!r}")
        self.subgoals[subgoal.node_id] = subgoal

    def subgoal_by_label(self, label: str) -> SubgoalNode | None:
        for sg in self.subgoals.values():
            if sg.label == label:
                return sg
        return None

    def resolve(self, node_id: str) -> GoalNode | SubgoalNode:
        if node_id == self.goal.node_id:
            return self.goal
        if node_id in self.subgoals:
            return self.subgoals[node_id]
        raise DanglingReferenceError(f"goal term references unknown node {node_id!r}")

    def add_trajectory(self, steps: list[Step], goal_term: str | None = None,
                       estimated_reward: float = 1.0, origin: str = OFFLINE_PRIOR,
                       pinned: bool = False, access_score: float = 0.0) -> TrajectoryNode:
        if not steps:
            raise ValueError("trajectory node needs at least one step")
        goal_term = self.goal.node_id if goal_term is None else goal_term
        self.resolve(goal_term)
        if not 0.0 <= estimated_reward <= 1.0:
            raise ValueError(f"estimated reward must lie in [0, 1], got {estimated_reward}")
        if origin not in ORIGINS:
            raise ValueError(f"unknown origin {origin!r}")
        if pinned and sum(n.pinned for n in self.trajectories.values()) + 1 > self.cap:
            raise ConfigError(f"more pinned trajectory nodes than the memory cap ({self.cap})")
        node = TrajectoryNode(self._next_id, list(steps), goal_term, float(estimated_reward),
                              origin, pinned, float(access_score))
        self._next_id += 1
        self.trajectories[node.node_id] = node
        for i, step in enumerate(node.steps):
            self.index.setdefault(step.obs_key, []).append((node.node_id, i))
        return node

    def remove(self, node_id: int) -> None:
        node = self.trajectories.pop(node_id)
        for key in {s.obs_key for s in node.steps}:
            entries = [e for e in self.index[key] if e[0] != node_id]
            if entries:
                self.index[key] = entries
            else:
                del self.index[key]

    def peek(self, obs_key: str) -> list[tuple[int, int]]:
        """Index hits for ``obs_key`` without touching access scores."""
        return list(self.index.get(obs_key, ()))

    def lookup(self, obs_key: str) -> list[tuple[int, int]]:
        """Index hits in insertion order; bumps each touched node's score by 1."""
        hits = self.index.get(obs_key)
        if not hits:
            return []
        touched = set()
        for node_id, _ in hits:
            if node_id not in touched:
                touched.add(node_id)
                self.trajectories[node_id].access_score += 1.0
        return list(hits)

    def bump(self, counts: dict[int, float]) -> None:
        """Merge deferred access-score increments."""
        for node_id, n in counts.items():
            node = self.trajectories.get(node_id)
            if node is not None:
                node.access_score += n

    def overlap_fraction(self, steps: list[Step]) -> float:
        """Fraction of ``steps`` whose (obs_key, action) already occurs in the index."""
        if not steps:
            return 0.0
        hits = 0
        for step in steps:
            for node_id, i in self.index.get(step.obs_key, ()):
                if self.trajectories[node_id].steps[i].action == step.action:
                    hits += 1
                    break
        return hits / len(steps)

    def insert_rollout(self, steps: list[Step], episode_return: float, success_threshold: float,
                       novelty_threshold: float = 0.5) -> bool:
        """Store a successful, novel episode as an unpinned agent_rollout node."""
        if not steps or episode_return < success_threshold:
            return False
        if self.overlap_fraction(steps) >= novelty_threshold:
            return False
        self.add_trajectory(steps, self.goal.node_id, min(max(episode_return, 0.0), 1.0),
                            origin=AGENT_ROLLOUT, pinned=False)
        return True

    def prune(self) -> list[int]:
        """Decay access scores, then evict unpinned nodes until within the cap.

        Eviction order: lowest access score first, oldest node id on ties.
        Goal and subgoal nodes are never removed.
        """
        for node in self.trajectories.values():
            node.access_score *= self.decay
        removed = []
        excess = len(self.trajectories) - self.cap
        if excess > 0:
            victims = sorted((n for n in self.trajectories.values() if not n.pinned),
                             key=lambda n: (n.access_score, n.node_id))[:excess]
            for node in victims:
                self.remove(node.node_id)
                removed.append(node.node_id)
        return removed

    def goal_set(self, node: TrajectoryNode | str) -> frozenset[str]:
        """The goal term plus its children (goal) or parent goal (subgoal)."""
        term = node.goal_term if isinstance(node, TrajectoryNode) else node
        if term == self.goal.node_id:
            return frozenset([term, *self.goal.subgoal_children])
        self.resolve(term)
        if term in self.goal.subgoal_children:
            return frozenset([term, self.goal.node_id])
        return frozenset([term])

    def check_consistency(self) -> None:
        """Raise AssertionError if the index and node store disagree."""
        expected: dict[str, list[tuple[int, int]]] = {}
        for node in self.trajectories.values():
            assert node.steps, f"node {node.node_id} has no steps"
            self.resolve(node.goal_term)
            for i, s in enumerate(node.steps):
                expected.setdefault(s.obs_key, []).append((node.node_id, i))
        assert expected == self.index, "observation index out of sync with nodes"

    # -- serialization -----------------------------------------------------

    def to_document(self, include_state: bool = True) -> dict:
        trajectories = []
        for node in self.trajectories.values():
            steps = []
            for s in node.steps:
                entry = {"obs_key": s.obs_key, "action": s.action}
                if s.position is not None:
                    entry["position"] = list(s.position)
                steps.append(entry)
            item = {"zeta": node.goal_term, "estimated_reward": node.estimated_reward,
                    "pinned": node.pinned, "steps": steps}
            if include_state:
                item["access_score"] = node.access_score
                item["origin"] = node.origin
            trajectories.append(item)
        return {
            "goal": {"id": self.goal.node_id, "label": self.goal.label},
            "subgoals": [
                {"id": s.node_id, "label": s.label, **({"detection_event": s.detection_event}
                                                       if s.detection_event else {})}
                for s in self.subgoals.values()
            ],
            "edges": [[self.goal.node_id, child] for child in self.goal.subgoal_children],
            "trajectories": trajectories,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    def structurally_equal(self, other: "MemoryGraph", tol: float = 1e-12) -> bool:
        if (self.goal.node_id, self.goal.label, self.goal.subgoal_children) != (
                other.goal.node_id, other.goal.label, other.goal.subgoal_children):
            return False
        if [(s.node_id, s.label, s.detection_event) for s in self.subgoals.values()] != [
                (s.node_id, s.label, s.detection_event) for s in other.subgoals.values()]:
            return False
        mine, theirs = list(self.trajectories.values()), list(other.trajectories.values())
        if len(mine) != len(theirs):
            return False
        for a, b in zip(mine, theirs):
            if (a.steps, a.goal_term, a.origin, a.pinned) != (b.steps, b.goal_term, b.origin, b.pinned):
                return False
            if abs(a.estimated_reward - b.estimated_reward) > tol or abs(a.access_score - b.access_score) > tol:
                return False
        return True


_TOP_FIELDS = {"goal", "subgoals", "edges", "trajectories"}
_TRAJ_FIELDS = {"zeta", "ζ", "estimated_reward", "pinned", "steps", "access_score", "origin"}
_STEP_FIELDS = {"obs_key", "position", "action"}


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise PriorParseError(f"{where}: {msg}")


def _check_fields(obj, allowed: set, required: set, where: str) -> None:
    _require(isinstance(obj, dict), where, "expected an object")
    unknown = set(obj) - allowed
    _require(not unknown, where, f"unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    _require(not missing, where, f"missing field(s) {sorted(missing)}")


def load_priors(document: dict | str | Path, cap: int = 256, decay: float = 0.99,
                position_key: Callable[[tuple[int, int]], str] | None = None,
                pin_priors: bool = True) -> MemoryGraph:
    """Build a graph from a prior document (a dict, JSON text, or a path).

    ``position_key`` derives an obs_key from a position for steps that only
    give ``position`` (possible in fully determined layouts like FrozenLake).
    """
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text(encoding="utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise PriorParseError(f"document: invalid JSON ({exc})") from None
    _check_fields(document, _TOP_FIELDS, {"goal"}, "document")

    goal_doc = document["goal"]
    _check_fields(goal_doc, {"id", "label"}, {"id"}, "goal")
    _require(isinstance(goal_doc["id"], str), "goal.id", "expected a string")
    goal = GoalNode(goal_doc["id"], str(goal_doc.get("label", goal_doc["id"])))

    subgoals = []
    sub_docs = document.get("subgoals", [])
    _require(isinstance(sub_docs, list), "subgoals", "expected a list")
    for i, sg in enumerate(sub_docs):
        where = f"subgoals[{i}]"
        _check_fields(sg, {"id", "label", "detection_event"}, {"id"}, where)
        _require(isinstance(sg["id"], str), f"{where}.id", "expected a string")
        event = sg.get("detection_event")
        _require(event is None or event in EVENT_TAGS, f"{where}.detection_event",
                 f"must be one of {sorted(EVENT_TAGS)}")
        subgoals.append(SubgoalNode(sg["id"], str(sg.get("label", sg["id"])), event))
    sub_ids = {s.node_id for s in subgoals}

    edges = document.get("edges", [])
    _require(isinstance(edges, list), "edges", "expected a list")
    for i, edge in enumerate(edges):
        where = f"edges[{i}]"
        _require(isinstance(edge, list) and len(edge) == 2, where, "expected [goal_id, subgoal_id]")
        if edge[0] != goal.node_id:
            raise DanglingReferenceError(f"{where}: unknown goal {edge[0]!r}")
        if edge[1] not in sub_ids:
            raise DanglingReferenceError(f"{where}: unknown subgoal {edge[1]!r}")
        if edge[1] not in goal.subgoal_children:
            goal.subgoal_children.append(edge[1])

    graph = MemoryGraph(goal, subgoals, cap=cap, decay=decay)

    trajs = document.get("trajectories", [])
    _require(isinstance(trajs, list), "trajectories", "expected a list")
    for i, tr in enumerate(trajs):
        where = f"trajectories[{i}]"
        _check_fields(tr, _TRAJ_FIELDS, {"steps"}, where)
        _require("zeta" in tr or "ζ" in tr, where, "missing field(s) ['zeta']")
        zeta = tr.get("zeta", tr.get("ζ"))
        _require(isinstance(zeta, str), f"{where}.zeta", "expected a node id string")
        if zeta != goal.node_id and zeta not in sub_ids:
            raise DanglingReferenceError(f"{where}.zeta: unknown goal/subgoal {zeta!r}")
        r_hat = tr.get("estimated_reward", 1.0)
        _require(isinstance(r_hat, (int, float)) and not isinstance(r_hat, bool)
                 and math.isfinite(r_hat) and 0.0 <= r_hat <= 1.0,
                 f"{where}.estimated_reward", "expected a number in [0, 1]")
        pinned = tr.get("pinned", pin_priors)
        _require(isinstance(pinned, bool), f"{where}.pinned", "expected a boolean")
        origin = tr.get("origin", OFFLINE_PRIOR)
        _require(origin in ORIGINS, f"{where}.origin", f"must be one of {list(ORIGINS)}")
        score = tr.get("access_score", 0.0)
        _require(isinstance(score, (int, float)) and not isinstance(score, bool) and score >= 0,
                 f"{where}.access_score", "expected a non-negative number")
        steps_doc = tr["steps"]
        _require(isinstance(steps_doc, list) and steps_doc, f"{where}.steps", "expected a non-empty list")
        steps = []
        for j, st in enumerate(steps_doc):
            sw = f"{where}.steps[{j}]"
            _check_fields(st, _STEP_FIELDS, {"action"}, sw)
            action = st["action"]
            _require(isinstance(action, int) and not isinstance(action, bool) and action >= 0,
                     f"{sw}.action", "expected a non-negative integer")
            position = st.get("position")
            if position is not None:
                _require(isinstance(position, list) and len(position) == 2
                         and all(isinstance(v, int) and not isinstance(v, bool) for v in position),
                         f"{sw}.position", "expected [row, col] integers")
                position = (position[0], position[1])
            key = st.get("obs_key")
            if key is None:
                _require(position is not None, sw, "needs obs_key or position")
                _require(position_key is not None, f"{sw}.obs_key",
                         "required: this environment cannot derive keys from positions")
                key = position_key(position)
            _require(isinstance(key, str), f"{sw}.obs_key", "expected a string")
            steps.append(Step(key, action, position))
        graph.add_trajectory(steps, zeta, float(r_hat), origin=origin, pinned=pinned,
                             access_score=float(score))
    return graph
