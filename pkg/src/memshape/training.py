"""The shaped-PPO training loop.

One iteration: collect -> utility -> GAE -> shape -> update -> graph
insert/prune -> guidance trigger.
"""
from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .gridworlds import FrozenLake, encode_key, make_env
from .guidance import (
    GuidanceState,
    HttpProvider,
    MockProvider,
    ParseFailure,
    ProviderError,
    apply_plan,
    build_prompt,
    parse_plan,
    update_trigger,
)
from .memory_graph import MemoryGraph, load_priors
from .neuralnet import PolicyParams
from .ppo import CollectorState, collect_rollout, compute_gae, ppo_update, shape_advantages, xi_schedule
from .utility import MatchState, compute_utility

logger = logging.getLogger(__name__)

METRICS_HEADER = (
    "iteration", "env_steps", "mean_return", "success_rate", "mean_U", "max_U", "match_rate",
    "xi", "max_shaping", "clip_fraction", "approx_kl", "policy_loss", "value_loss", "entropy",
    "graph_size", "llm_queries", "wall_ms",
)


def build_graph(cfg: ExperimentConfig, env) -> MemoryGraph:
    if cfg.prior:
        position_key = None
        if isinstance(env, FrozenLake):
            ncol = env.ncol
            position_key = lambda pos: encode_key((pos[0] * ncol + pos[1],))  # noqa: E731
        return load_priors(Path(cfg.prior), cap=cfg.memory_cap, decay=cfg.memory_decay,
                           position_key=position_key)
    return MemoryGraph.single_goal("reach_goal", cap=cfg.memory_cap, decay=cfg.memory_decay)


def build_provider(cfg: ExperimentConfig):
    if cfg.llm == "mock":
        return MockProvider.from_file(cfg.llm_script)
    if cfg.llm == "http":
        return HttpProvider(model=cfg.llm_model, timeout=cfg.llm_timeout)
    return None


class Trainer:
    """Owns one seed's environment, parameters, memory graph and RNG streams."""

    def __init__(self, cfg: ExperimentConfig, seed: int, graph: MemoryGraph | None = None,
                 provider=None):
        self.cfg = cfg
        self.seed = seed
        self.ppo = cfg.ppo_config().validate()
        init_ss, act_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(3)
        self.env = make_env(cfg.env, slippery=cfg.slippery, size=cfg.size)
        self.collector = CollectorState(obs=self.env.reset(seed=seed))
        self.params = PolicyParams.initialize(self.env.n_features, self.env.n_actions,
                                              np.random.default_rng(init_ss), hidden=self.ppo.hidden)
        self.params.metadata = {"env": cfg.env, "train_seeds": list(cfg.seeds), "size": cfg.size,
                                "slippery": cfg.slippery}
        self.act_rng = np.random.default_rng(act_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.graph = graph if graph is not None else build_graph(cfg, self.env)
        self.provider = provider if provider is not None else build_provider(cfg)
        self.guidance = GuidanceState()
        self.match_state = MatchState()
        self.iteration = 0
        self.env_steps = 0
        self._last_return = 0.0
        self._last_success = 0.0

    def _views(self, rollout) -> list[str]:
        keys = rollout.obs_keys[-(self.cfg.prompt_views - 1):] if self.cfg.prompt_views > 1 else []
        keys = list(keys) + [self.collector.obs.obs_key]
        return [self.env.view_glyphs(k) for k in keys]

    def _query(self, rollout) -> None:
        cfg, g = self.cfg, self.guidance
        prompt = build_prompt(self._views(rollout), self.env.action_names, self.graph.goal.label,
                              [s.label for s in self.graph.subgoals.values()])
        g.queries += 1
        try:
            reply = self.provider.query(prompt)
        except ProviderError as exc:
            g.provider_failures += 1
            logger.warning("guidance query failed: %s", exc)
            return
        labels = [s.label for s in self.graph.subgoals.values()]
        plan = parse_plan(reply, self.env.action_names, labels, plan_id=g.queries,
                          beta=cfg.inject_beta, horizon=cfg.inject_horizon,
                          attempt_budget=cfg.inject_attempts)
        if isinstance(plan, ParseFailure):
            g.parse_failures += 1
            logger.info("ignoring unparseable guidance: %s", plan.reason)
            return
        apply_plan(plan, self.graph, g, env=self.env, start_obs=self.collector.obs,
                   estimated_reward=cfg.online_estimated_reward)

    def step(self) -> dict:
        """Run one training iteration and return its metrics row."""
        cfg, ppo = self.cfg, self.ppo
        started = time.perf_counter()
        plan = self.guidance.active_plan
        injector = plan if plan is not None and plan.active else None
        rollout, self.collector = collect_rollout(self.params, self.env, ppo.horizon, self.act_rng,
                                                  self.collector, injector)
        if plan is not None and not plan.active:
            self.guidance.active_plan = None
        self.env_steps += len(rollout)

        ends = rollout.episode_ends
        if cfg.shaping:
            trace = compute_utility(self.graph, rollout.obs_keys, rollout.actions, rollout.positions,
                                    ends, self.match_state, d_max=self.env.grid_span,
                                    w_action=cfg.w_action, w_position=cfg.w_position)
            rollout.utilities = trace.utility
            match_rate = trace.match_rate
        else:
            match_rate = 0.0
        shaping_active = cfg.shaping and len(self.graph) > 0
        if injector is not None and not cfg.allow_concurrent_guidance:
            shaping_active = False

        adv, returns = compute_gae(rollout.rewards, rollout.values, ends, rollout.bootstrap_value,
                                   ppo.gamma, ppo.lam)
        batch = shape_advantages(adv, rollout.utilities, xi_schedule(self.iteration, ppo),
                                 ppo.normalize_advantages, enabled=shaping_active, returns=returns)
        stats = ppo_update(rollout, batch, self.params, ppo, self.shuffle_rng)

        if cfg.shaping:
            if cfg.insert_rollouts:
                for ep in rollout.episodes:
                    self.graph.insert_rollout(ep.steps, ep.episode_return, self.env.success_threshold,
                                              cfg.novelty_threshold)
            self.graph.prune()

        if self.provider is not None:
            start = 0
            for ep in rollout.episodes:
                end = ep.end_index + 1
                mean_u = float(np.mean(rollout.utilities[start:end]))
                start = end
                self.guidance.trigger, fire = update_trigger(
                    self.guidance.trigger, mean_u, cfg.trigger_u_min, cfg.trigger_patience,
                    cfg.trigger_cooldown)
                if fire:
                    self._query(rollout)

        if rollout.episodes:
            self._last_return = float(np.mean([ep.episode_return for ep in rollout.episodes]))
            self._last_success = float(np.mean([ep.success for ep in rollout.episodes]))
        row = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "mean_return": self._last_return,
            "success_rate": self._last_success,
            "mean_U": float(np.mean(rollout.utilities)),
            "max_U": float(np.max(rollout.utilities)),
            "match_rate": match_rate,
            "xi": batch.xi,
            "max_shaping": batch.max_abs_shaping,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "graph_size": len(self.graph),
            "llm_queries": self.guidance.queries,
            "wall_ms": round((time.perf_counter() - started) * 1000.0) if cfg.record_wall_time else 0,
        }
        self.iteration += 1
        return row

    def train(self, n_iterations: int | None = None, callback=None) -> list[dict]:
        rows = []
        for _ in range(self.cfg.n_iterations if n_iterations is None else n_iterations):
            row = self.step()
            rows.append(row)
            if callback is not None:
                callback(row)
        return rows
