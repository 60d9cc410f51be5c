"""Seedable gridworlds: FrozenLake-8x8 and a partially observable DoorKey.

Both environments follow a small gym-like protocol (``reset``/``step``) and
return :class:`Observation` objects that carry, besides the policy features,
a hashable ``obs_key`` used by the memory graph and the agent's grid
position (used only by utility shaping, never by the policy).
"""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, InvalidActionError

KEY_PICKED = "key_picked"
DOOR_OPENED = "door_opened"
GOAL_REACHED = "goal_reached"
EVENT_TAGS = frozenset({KEY_PICKED, DOOR_OPENED, GOAL_REACHED})

FROZENLAKE_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)

_KEY_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_-"


def encode_key(view: Sequence[int]) -> str:
    """Encode a raw view (sequence of small non-negative ints) as a string key.

    One character per element, so the map is injective and stable across
    processes (unlike ``hash``).
    """
    try:
        return "".join(_KEY_ALPHABET[v] for v in view)
    except (IndexError, TypeError):
        raise ValueError(f"view values must be ints in [0, {len(_KEY_ALPHABET)})") from None


def decode_key(key: str) -> tuple[int, ...]:
    return tuple(_KEY_ALPHABET.index(ch) for ch in key)


@dataclass(frozen=True)
class Observation:
    features: np.ndarray
    obs_key: str
    events: frozenset = frozenset()
    position: tuple[int, int] | None = None


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    truncated: bool


@dataclass
class FrozenLakeState:
    cell_index: int = 0
    step_count: int = 0


class FrozenLake:
    """FrozenLake on the canonical 8x8 map.

    Actions follow the Gymnasium convention: 0 left, 1 down, 2 right, 3 up.
    With ``slippery=True`` the realized move is the intended one or either
    perpendicular, each with probability 1/3.
    """

    env_id = "frozenlake"
    action_names = ("left", "down", "right", "up")
    n_actions = 4
    max_steps = 200
    success_threshold = 1.0

    def __init__(self, slippery: bool = False, desc: Sequence[str] = FROZENLAKE_8X8):
        rows = [str(r) for r in desc]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigError("FrozenLake map must be a non-empty rectangle")
        if "".join(rows).count("S") != 1 or "".join(rows).count("G") < 1:
            raise ConfigError("FrozenLake map needs exactly one 'S' and at least one 'G'")
        self.desc = tuple(rows)
        self.nrow, self.ncol = len(rows), len(rows[0])
        self.n_cells = self.nrow * self.ncol
        self.slippery = slippery
        self.start = "".join(rows).index("S")
        self.state = FrozenLakeState(self.start, 0)
        self.rng = np.random.default_rng(0)
        self.terminal = False
        self._eye = np.eye(self.n_cells)

    @property
    def n_features(self) -> int:
        return self.n_cells

    @property
    def grid_span(self) -> int:
        return self.nrow + self.ncol

    def _observe(self, events: frozenset = frozenset()) -> Observation:
        cell = self.state.cell_index
        return Observation(
            features=self._eye[cell],
            obs_key=encode_key((cell,)),
            events=events,
            position=divmod(cell, self.ncol),
        )

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = FrozenLakeState(self.start, 0)
        self.terminal = False
        return self._observe()

    def _move(self, cell: int, action: int) -> int:
        row, col = divmod(cell, self.ncol)
        if action == 0:
            col = max(col - 1, 0)
        elif action == 1:
            row = min(row + 1, self.nrow - 1)
        elif action == 2:
            col = min(col + 1, self.ncol - 1)
        else:
            row = max(row - 1, 0)
        return row * self.ncol + col

    def step(self, action: int) -> StepResult:
        if not 0 <= action < 4:
            raise InvalidActionError(f"FrozenLake action must be in 0..3, got {action!r}")
        if self.terminal:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if self.slippery:
            action = (action + int(self.rng.integers(3)) - 1) % 4
        cell = self._move(self.state.cell_index, action)
        self.state.cell_index = cell
        self.state.step_count += 1
        tile = self.desc[cell // self.ncol][cell % self.ncol]
        reward, done, events = 0.0, False, frozenset()
        if tile == "G":
            reward, done, events = 1.0, True, frozenset({GOAL_REACHED})
        elif tile == "H":
            done = True
        truncated = not done and self.state.step_count >= self.max_steps
        self.terminal = done or truncated
        return StepResult(self._observe(events), reward, done, truncated)

    def clone(self) -> "FrozenLake":
        return copy.deepcopy(self)

    def view_glyphs(self, obs_key: str) -> str:
        """Local 3x3 neighborhood around the cell encoded by ``obs_key``."""
        (cell,) = decode_key(obs_key)
        row, col = divmod(cell, self.ncol)
        lines = []
        for r in range(row - 1, row + 2):
            line = ""
            for c in range(col - 1, col + 2):
                if (r, c) == (row, col):
                    line += "A"
                elif 0 <= r < self.nrow and 0 <= c < self.ncol:
                    line += self.desc[r][c]
                else:
                    line += "#"
            lines.append(line)
        return "\n".join(lines)

    def render_text(self) -> str:
        rows = [list(r) for r in self.desc]
        row, col = divmod(self.state.cell_index, self.ncol)
        rows[row][col] = "A"
        return "\n".join("".join(r) for r in rows)


# DoorKey object kinds; cell code = 2 * kind + locked.
EMPTY, WALL, DOOR, KEY, GOAL = range(5)
N_KINDS = 5
VIEW = 5
# direction 0..3 = E, S, W, N as (drow, dcol)
DIR_VEC = ((0, 1), (1, 0), (0, -1), (-1, 0))
_CODE_FEATURES = np.zeros((2 * N_KINDS, N_KINDS + 1))
for _kind in range(N_KINDS):
    _CODE_FEATURES[2 * _kind, _kind] = 1.0
    _CODE_FEATURES[2 * _kind + 1, _kind] = 1.0
    _CODE_FEATURES[2 * _kind + 1, N_KINDS] = 1.0
_GLYPHS = {2 * EMPTY: ".", 2 * WALL: "#", 2 * DOOR: "/", 2 * DOOR + 1: "D", 2 * KEY: "K", 2 * GOAL: "G"}
_ARROWS = ">v<^"


@dataclass
class DoorKeyState:
    grid: np.ndarray  # (N, N) cell codes, 2 * kind + locked
    agent_pos: tuple[int, int]
    agent_dir: int
    carrying_key: bool = False
    step_count: int = 0
    door_pos: tuple[int, int] = (0, 0)
    events_seen: set = field(default_factory=set)


class DoorKey:
    """Key-door-goal gridworld with an egocentric 5x5 forward view.

    Actions: 0 turn left, 1 turn right, 2 forward, 3 pickup, 4 toggle.
    A vertical wall splits the grid; the key and agent start on the left,
    the goal sits in the bottom-right corner behind a locked door.
    """

    env_id = "doorkey"
    action_names = ("left", "right", "forward", "pickup", "toggle")
    n_actions = 5
    # smallest positive terminal reward: 1 - 0.9 * max_steps / max_steps
    success_threshold = 0.1

    def __init__(self, size: int = 6):
        if size < 5:
            raise ConfigError(f"DoorKey grid size must be >= 5, got {size}")
        self.size = size
        self.max_steps = 10 * size * size
        self.rng = np.random.default_rng(0)
        self.state: DoorKeyState | None = None
        self.terminal = False
        # view cell (i, j): i rows ahead of the agent's row (0 = farthest),
        # j columns across (agent at bottom center).
        half = VIEW // 2
        self._view_offsets = [(VIEW - 1 - i, j - half) for i in range(VIEW) for j in range(VIEW)]

    @property
    def n_features(self) -> int:
        return VIEW * VIEW * (N_KINDS + 1) + 1

    @property
    def grid_span(self) -> int:
        return 2 * self.size

    def _generate(self) -> DoorKeyState:
        n, rng = self.size, self.rng
        grid = np.zeros((n, n), dtype=np.int64)
        grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = 2 * WALL
        split = int(rng.integers(2, n - 2))
        grid[:, split] = 2 * WALL
        door_row = int(rng.integers(1, n - 1))
        grid[door_row, split] = 2 * DOOR + 1
        grid[n - 2, n - 2] = 2 * GOAL
        left = [(r, c) for r in range(1, n - 1) for c in range(1, split)]
        picks = rng.choice(len(left), size=2, replace=False)
        key_pos, agent_pos = left[int(picks[0])], left[int(picks[1])]
        grid[key_pos] = 2 * KEY
        return DoorKeyState(
            grid=grid,
            agent_pos=agent_pos,
            agent_dir=int(rng.integers(4)),
            door_pos=(door_row, split),
        )

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self._generate()
        self.terminal = False
        return self._observe(frozenset())

    def raw_view(self) -> tuple[int, ...]:
        st = self.state
        grid, n = st.grid, self.size
        r0, c0 = st.agent_pos
        fr, fc = DIR_VEC[st.agent_dir]
        # right-hand side of the facing direction
        rr, rc = DIR_VEC[(st.agent_dir + 1) % 4]
        codes = []
        for ahead, side in self._view_offsets:
            r = r0 + ahead * fr + side * rr
            c = c0 + ahead * fc + side * rc
            if 0 <= r < n and 0 <= c < n:
                codes.append(int(grid[r, c]))
            else:
                codes.append(2 * WALL)
        codes.append(int(st.carrying_key))
        return tuple(codes)

    def _observe(self, events: frozenset) -> Observation:
        view = self.raw_view()
        feats = np.empty(self.n_features)
        feats[:-1] = _CODE_FEATURES[list(view[:-1])].ravel()
        feats[-1] = view[-1]
        return Observation(feats, encode_key(view), events, self.state.agent_pos)

    def front_pos(self) -> tuple[int, int]:
        r, c = self.state.agent_pos
        dr, dc = DIR_VEC[self.state.agent_dir]
        return r + dr, c + dc

    def step(self, action: int) -> StepResult:
        if not 0 <= action < 5:
            raise InvalidActionError(f"DoorKey action must be in 0..4, got {action!r}")
        if self.terminal:
            raise RuntimeError("step() called on a finished episode; call reset()")
        st = self.state
        st.step_count += 1
        reward, done = 0.0, False
        events = set()
        front = self.front_pos()
        code = int(st.grid[front])
        kind, locked = code >> 1, code & 1
        if action == 0:
            st.agent_dir = (st.agent_dir - 1) % 4
        elif action == 1:
            st.agent_dir = (st.agent_dir + 1) % 4
        elif action == 2:
            if kind in (EMPTY, GOAL) or (kind == DOOR and not locked):
                st.agent_pos = front
                if kind == GOAL:
                    done = True
                    reward = 1.0 - 0.9 * (st.step_count / self.max_steps)
                    events.add(GOAL_REACHED)
        elif action == 3:
            if kind == KEY and not st.carrying_key:
                st.grid[front] = 2 * EMPTY
                st.carrying_key = True
                events.add(KEY_PICKED)
        elif action == 4:
            if kind == DOOR and locked and st.carrying_key:
                st.grid[front] = 2 * DOOR
                events.add(DOOR_OPENED)
        truncated = not done and st.step_count >= self.max_steps
        self.terminal = done or truncated
        st.events_seen |= events
        return StepResult(self._observe(frozenset(events)), reward, done, truncated)

    def clone(self) -> "DoorKey":
        return copy.deepcopy(self)

    def view_glyphs(self, obs_key: str) -> str:
        """Render the 5x5 forward view in ``obs_key``; agent shown as ``A``."""
        codes = decode_key(obs_key)
        lines = []
        for i in range(VIEW):
            row = "".join(_GLYPHS.get(codes[i * VIEW + j], "?") for j in range(VIEW))
            if i == VIEW - 1:
                row = row[: VIEW // 2] + "A" + row[VIEW // 2 + 1:]
            lines.append(row)
        lines.append("carrying key: " + ("yes" if codes[-1] else "no"))
        return "\n".join(lines)

    def render_text(self) -> str:
        st = self.state
        rows = [[_GLYPHS.get(int(code), "?") for code in row] for row in st.grid]
        r, c = st.agent_pos
        rows[r][c] = _ARROWS[st.agent_dir]
        return "\n".join("".join(r) for r in rows)


def make_env(env_id: str, **params):
    """Build an environment by id (``frozenlake`` or ``doorkey``)."""
    if env_id == "frozenlake":
        return FrozenLake(slippery=bool(params.get("slippery", False)))
    if env_id == "doorkey":
        return DoorKey(size=int(params.get("size", 6)))
    raise ConfigError(f"unknown environment {env_id!r}")


def shortest_solution(env: DoorKey | FrozenLake) -> list[int] | None:
    """Breadth-first search from the current state to the goal.

    Works on clones of ``env`` so it exercises the real transition rules.
    Returns the action list of a shortest successful episode, or None.
    FrozenLake is searched without slipping.
    """
    start = env.clone()
    if isinstance(start, FrozenLake):
        start.slippery = False

    def signature(e) -> tuple:
        if isinstance(e, FrozenLake):
            return (e.state.cell_index,)
        st = e.state
        return (st.agent_pos, st.agent_dir, st.carrying_key, int(st.grid[st.door_pos]))

    seen = {signature(start)}
    queue = deque([(start, [])])
    while queue:
        node, path = queue.popleft()
        for action in range(node.n_actions):
            child = node.clone()
            result = child.step(action)
            if result.done and result.reward > 0:
                return path + [action]
            if result.done or result.truncated:
                continue
            sig = signature(child)
            if sig not in seen:
                seen.add(sig)
                queue.append((child, path + [action]))
    return None
