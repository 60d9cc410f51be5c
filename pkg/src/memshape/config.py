"""Flat experiment configuration (JSON file + CLI overrides)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .ppo import PpoConfig

DEFAULT_HORIZON = {"frozenlake": 2048, "doorkey": 4096}
LLM_CHOICES = ("off", "mock", "http")


@dataclass
class ExperimentConfig:
    # environment
    env: str = "frozenlake"
    slippery: bool = False
    size: int = 6
    # run
    seeds: list = field(default_factory=lambda: [0])
    total_steps: int = 150_000
    eval_episodes: int = 100
    eval_seeds: list = field(default_factory=lambda: list(range(10_000, 10_100)))
    record_wall_time: bool = False
    # PPO (horizon None -> per-environment default)
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 64
    horizon: int | None = None
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    max_grad_norm: float = 0.5
    normalize_advantages: bool = False
    hidden: int = 64
    # shaping
    shaping: bool = True
    xi0: float = 0.5
    xi_min: float = 0.01
    xi_decay: bool = True
    xi_decay_horizon: int = 50
    w_action: float = 0.5
    w_position: float = 0.5
    # memory graph
    prior: str | None = None
    insert_rollouts: bool = True
    novelty_threshold: float = 0.5
    memory_cap: int = 256
    memory_decay: float = 0.99
    # guidance
    llm: str = "off"
    llm_script: str | None = None
    llm_model: str = "gpt-4o-mini"
    llm_timeout: float = 30.0
    trigger_u_min: float = 0.05
    trigger_patience: int = 10
    trigger_cooldown: int = 20
    inject_beta: float = 1.0
    inject_horizon: int = 50
    inject_attempts: int = 3
    online_estimated_reward: float = 1.0
    allow_concurrent_guidance: bool = True
    prompt_views: int = 3

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def override(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = set(changes) - self.keys()
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def effective_horizon(self) -> int:
        return self.horizon if self.horizon is not None else DEFAULT_HORIZON.get(self.env, 2048)

    @property
    def n_iterations(self) -> int:
        return self.total_steps // self.effective_horizon

    def ppo_config(self) -> PpoConfig:
        names = {f.name for f in dataclasses.fields(PpoConfig)}
        values = {k: v for k, v in self.to_dict().items() if k in names}
        values["horizon"] = self.effective_horizon
        return PpoConfig(**values)

    def validate(self) -> "ExperimentConfig":
        if self.env not in DEFAULT_HORIZON:
            raise ConfigError(f"unknown environment {self.env!r}")
        if self.env == "doorkey" and self.size < 5:
            raise ConfigError("DoorKey size must be >= 5")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if self.total_steps <= 0:
            raise ConfigError("total_steps (budget) must be > 0")
        if self.total_steps < self.effective_horizon:
            raise ConfigError("total_steps must cover at least one rollout horizon")
        if self.llm not in LLM_CHOICES:
            raise ConfigError(f"llm must be one of {LLM_CHOICES}")
        if self.llm == "mock" and not self.llm_script:
            raise ConfigError("llm=mock needs llm_script")
        for name in ("prior", "llm_script"):
            value = getattr(self, name)
            if value and not Path(value).is_file():
                raise ConfigError(f"{name} path does not exist: {value}")
        if not 0 <= self.novelty_threshold <= 1:
            raise ConfigError("novelty_threshold must be in [0, 1]")
        if self.memory_cap < 1 or not 0 < self.memory_decay <= 1:
            raise ConfigError("memory_cap must be >= 1 and memory_decay in (0, 1]")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.inject_horizon < 1 or self.inject_attempts < 1 or self.inject_beta < 0:
            raise ConfigError("invalid injection parameters")
        self.ppo_config().validate()
        return self
