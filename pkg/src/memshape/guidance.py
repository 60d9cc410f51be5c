"""Online guidance: query trigger, prompts, plan parsing and logit injection.

Providers implement ``query(prompt) -> str``. A reply is a short
line-oriented plan::

    MODE: inject            (or: MODE: add)
    SUBGOAL: pickup_key
    STEP: forward
    STEP: pickup

Malformed replies never raise; :func:`parse_plan` returns a
:class:`ParseFailure` and training simply continues unguided.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .exceptions import ConfigError, DanglingReferenceError
from .memory_graph import ONLINE_LLM, MemoryGraph, Step

logger = logging.getLogger(__name__)

ADD_TO_GRAPH = "add_to_graph"
INJECT = "inject"
API_KEY_ENV = "MEMSHAPE_LLM_API_KEY"
BASE_URL_ENV = "MEMSHAPE_LLM_BASE_URL"


@dataclass
class GuidancePlan:
    plan_id: int
    steps: list[tuple[str, object]]  # ("action", int) or ("subgoal", label)
    mode: str = ADD_TO_GRAPH
    beta: float = 1.0
    horizon: int = 50
    cursor: int = 0
    attempt_budget: int = 3
    attempts: int = 0
    elapsed: int = 0

    @property
    def actions(self) -> list[int]:
        return [v for kind, v in self.steps if kind == "action"]

    @property
    def subgoal_labels(self) -> list[str]:
        return [v for kind, v in self.steps if kind == "subgoal"]

    @property
    def active(self) -> bool:
        return (self.mode == INJECT and self.cursor < len(self.steps)
                and self.elapsed < self.horizon and self.steps[self.cursor][0] == "action")

    def suggested_action(self) -> int | None:
        return self.steps[self.cursor][1] if self.active else None

    def apply(self, logits: np.ndarray) -> np.ndarray:
        return inject_logits(logits, self, self.beta)

    def observe(self, action: int) -> None:
        """Advance bookkeeping after the agent sampled ``action``."""
        if not self.active:
            return
        self.elapsed += 1
        self.attempts += 1
        if action == self.steps[self.cursor][1] or self.attempts >= self.attempt_budget:
            self.cursor += 1
            self.attempts = 0


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    reply: str = ""

    def __bool__(self) -> bool:
        return False


def inject_logits(logits: np.ndarray, plan: GuidancePlan, beta: float) -> np.ndarray:
    """Add ``beta * (1 - cursor / H)`` to the suggested action's logit."""
    out = np.array(logits, dtype=float, copy=True)
    action = plan.suggested_action()
    if action is None or beta == 0:
        return out
    out[action] += beta * (1.0 - plan.cursor / plan.horizon)
    return out


def parse_plan(reply, action_names: Sequence[str], subgoal_labels: Sequence[str] = (),
               plan_id: int = 0, beta: float = 1.0, horizon: int = 50,
               attempt_budget: int = 3) -> GuidancePlan | ParseFailure:
    """Parse a reply into a plan; any problem yields a :class:`ParseFailure`."""
    try:
        if isinstance(reply, bytes):
            reply = reply.decode("utf-8", errors="replace")
        if not isinstance(reply, str):
            return ParseFailure("reply is not text", repr(reply)[:200])
        lookup = {name.lower(): i for i, name in enumerate(action_names)}
        known_subgoals = set(subgoal_labels)
        mode = ADD_TO_GRAPH
        steps: list[tuple[str, object]] = []
        for raw in reply.splitlines():
            line = raw.strip()
            if ":" not in line:
                continue
            tag, _, value = line.partition(":")
            tag, value = tag.strip().upper(), value.strip()
            if tag == "MODE":
                if value.lower() in ("add", ADD_TO_GRAPH):
                    mode = ADD_TO_GRAPH
                elif value.lower() == INJECT:
                    mode = INJECT
                else:
                    return ParseFailure(f"unknown mode {value!r}", reply)
            elif tag == "STEP":
                if value.lower() not in lookup:
                    return ParseFailure(f"unknown action {value!r}", reply)
                steps.append(("action", lookup[value.lower()]))
            elif tag == "SUBGOAL":
                if value not in known_subgoals:
                    return ParseFailure(f"unknown subgoal {value!r}", reply)
                steps.append(("subgoal", value))
        if not any(kind == "action" for kind, _ in steps):
            return ParseFailure("plan has no steps", reply)
        if mode == INJECT and any(kind == "subgoal" for kind, _ in steps):
            return ParseFailure("inject plans may only contain actions", reply)
        return GuidancePlan(plan_id, steps, mode, beta, horizon, attempt_budget=attempt_budget)
    except Exception as exc:  # parsing must never stop training
        return ParseFailure(f"unparseable reply ({type(exc).__name__})", "")


@dataclass(frozen=True)
class TriggerState:
    consecutive_starved_episodes: int = 0
    cooldown_remaining: int = 0
    queries_issued: int = 0


def update_trigger(state: TriggerState, episode_mean_utility: float, u_min: float = 0.05,
                   patience: int = 10, cooldown: int = 20) -> tuple[TriggerState, bool]:
    """Advance the trigger by one finished episode; returns (state, fire)."""
    starved = episode_mean_utility < u_min
    counter = state.consecutive_starved_episodes + 1 if starved else 0
    remaining = max(state.cooldown_remaining - 1, 0)
    if counter >= patience and remaining == 0:
        return TriggerState(0, cooldown, state.queries_issued + 1), True
    return replace(state, consecutive_starved_episodes=counter, cooldown_remaining=remaining), False


def build_prompt(views: Sequence[str], action_names: Sequence[str], goal_label: str,
                 subgoal_labels: Sequence[str] = ()) -> str:
    """Prompt holding only agent-visible views, the action legend and labels."""
    if not views:
        raise ValueError("need at least one observation to build a prompt")
    parts = [
        "You are advising a reinforcement-learning agent in a gridworld.",
        "You see exactly what the agent sees; nothing else is known.",
        f"Goal: {goal_label}",
    ]
    if subgoal_labels:
        parts.append("Subgoals: " + ", ".join(subgoal_labels))
    parts.append("Actions: " + ", ".join(action_names))
    parts.append("Recent observations (oldest first; A marks the agent):")
    for i, view in enumerate(views):
        parts.append(f"[{i}]\n{view}")
    parts.append(
        "Reply with a short plan, one item per line, using only:\n"
        "MODE: add | inject\nSUBGOAL: <subgoal label>\nSTEP: <action name>"
    )
    return "\n".join(parts) + "\n"


class GuidanceProvider(Protocol):
    def query(self, prompt: str) -> str: ...


class ProviderError(RuntimeError):
    """A provider could not produce a reply (timeout, HTTP error...)."""


class MockProvider:
    """Replays scripted replies in order, repeating the last one."""

    def __init__(self, script: Sequence[str]):
        if not script:
            raise ConfigError("mock provider script must not be empty")
        self.script = list(script)
        self.prompts: list[str] = []

    @classmethod
    def from_file(cls, path) -> "MockProvider":
        script = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(script, list) or not all(isinstance(s, str) for s in script):
            raise ConfigError(f"{path}: expected a JSON list of strings")
        return cls(script)

    def query(self, prompt: str) -> str:
        reply = self.script[min(len(self.prompts), len(self.script) - 1)]
        self.prompts.append(prompt)
        return reply


class HttpProvider:
    """OpenAI-compatible ``/v1/chat/completions`` client."""

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str = "gpt-4o-mini", temperature: float = 0.0, timeout: float = 30.0,
                 transport: httpx.BaseTransport | None = None):
        base_url = base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ConfigError(f"HTTP provider needs a base URL (set {BASE_URL_ENV})")
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self._transport = transport

    def request_body(self, prompt: str) -> dict:
        return {"model": self.model, "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature}

    def query(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                resp = client.post(self.url, json=self.request_body(prompt), headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
        except httpx.TimeoutException as exc:
            raise ProviderError(f"guidance request timed out after {self.timeout}s") from exc
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"guidance request failed: {exc}") from exc


@dataclass
class GuidanceState:
    """Trainer-side guidance bookkeeping."""
    trigger: TriggerState = field(default_factory=TriggerState)
    active_plan: GuidancePlan | None = None
    queries: int = 0
    parse_failures: int = 0
    provider_failures: int = 0
    plans_added: int = 0


def plan_to_steps(plan: GuidancePlan, env=None, start_obs=None) -> list[Step]:
    """Ground a plan's actions into (obs_key, position, action) steps.

    The actions are replayed on a clone of ``env`` so every step gets the
    key and position the agent would observe; without an environment only
    the first action can be anchored to ``start_obs``.
    """
    actions = plan.actions
    if start_obs is None:
        return []
    if env is None:
        return [Step(start_obs.obs_key, actions[0], start_obs.position)]
    sim = env.clone()
    obs, steps = start_obs, []
    for action in actions:
        steps.append(Step(obs.obs_key, action, obs.position))
        result = sim.step(action)
        if result.done or result.truncated:
            break
        obs = result.observation
    return steps


def apply_plan(plan: GuidancePlan, graph: MemoryGraph, state: GuidanceState, env=None,
               start_obs=None, estimated_reward: float = 1.0) -> str:
    """Add the plan to the graph or make it the active injector.

    Returns a short description of the effect: ``"added"``, ``"injecting"``
    or ``"skipped"`` (add-mode plan that could not be grounded).
    """
    if plan.mode == INJECT:
        state.active_plan = plan
        return "injecting"
    goal_term = graph.goal.node_id
    labels = plan.subgoal_labels
    if labels:
        sg = graph.subgoal_by_label(labels[0])
        if sg is None:
            raise DanglingReferenceError(f"plan references unknown subgoal {labels[0]!r}")
        goal_term = sg.node_id
    steps = plan_to_steps(plan, env, start_obs)
    if not steps:
        return "skipped"
    graph.add_trajectory(steps, goal_term, estimated_reward, origin=ONLINE_LLM, pinned=False)
    state.plans_added += 1
    return "added"
