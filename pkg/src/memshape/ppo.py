"""Rollouts, GAE, shaped advantages and the clipped-surrogate update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError, TrainingDivergenceError
from .memory_graph import Step
from .neuralnet import PolicyParams, adam_step, clip_by_global_norm, log_softmax, sample_action


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 64
    horizon: int = 2048
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    max_grad_norm: float = 0.5
    normalize_advantages: bool = False
    hidden: int = 64
    xi0: float = 0.5
    xi_min: float = 0.01
    xi_decay: bool = True
    xi_decay_horizon: int = 50

    def validate(self) -> "PpoConfig":
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must be in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must be in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1 or self.horizon < 1 or self.hidden < 1:
            raise ConfigError("epochs, minibatch_size, horizon and hidden must be >= 1")
        if not 0 < self.xi_min <= self.xi0 <= 1:
            raise ConfigError("need 0 < xi_min <= xi0 <= 1")
        if self.xi_decay and self.xi_decay_horizon < 1:
            raise ConfigError("xi_decay_horizon must be >= 1")
        return self


def xi_schedule(iteration: int, cfg: PpoConfig) -> float:
    """Linearly decaying shaping coefficient with a positive floor."""
    if not cfg.xi_decay:
        return cfg.xi0
    return max(cfg.xi_min, cfg.xi0 * (1.0 - iteration / cfg.xi_decay_horizon))


@dataclass
class Episode:
    """A finished episode, possibly begun in an earlier rollout."""
    steps: list[Step]
    episode_return: float
    success: bool
    end_index: int  # index in this rollout of the final step


@dataclass
class CollectorState:
    """What carries over between rollouts: the live observation and episode."""
    obs: object = None
    steps: list[Step] = field(default_factory=list)
    episode_return: float = 0.0


@dataclass
class Rollout:
    features: np.ndarray
    obs_keys: list[str]
    positions: list
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    truncateds: np.ndarray
    events: list[frozenset]
    bootstrap_value: float
    episodes: list[Episode]
    utilities: np.ndarray = None

    def __post_init__(self):
        if self.utilities is None:
            self.utilities = np.zeros(len(self.actions))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def episode_ends(self) -> np.ndarray:
        return self.dones | self.truncateds

    def episode_bounds(self) -> list[tuple[int, int]]:
        """[start, end) index pairs of episode pieces inside this rollout."""
        bounds, start = [], 0
        for t in np.flatnonzero(self.episode_ends):
            bounds.append((start, int(t) + 1))
            start = int(t) + 1
        if start < len(self):
            bounds.append((start, len(self)))
        return bounds


def collect_rollout(params: PolicyParams, env, horizon: int, rng: np.random.Generator,
                    state: CollectorState | None = None, injector=None) -> tuple[Rollout, CollectorState]:
    """Run the current policy for exactly ``horizon`` steps with auto-reset.

    ``injector`` (optional) must expose ``active``, ``apply(logits)`` and
    ``observe(action)``; it biases sampling only. The stored log-probability
    is always that of the unbiased policy.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if state is None or state.obs is None:
        state = CollectorState(obs=env.reset())
    success_threshold = getattr(env, "success_threshold", 1e-12)
    n_features = len(state.obs.features)
    features = np.empty((horizon, n_features))
    obs_keys, positions, events = [], [], []
    actions = np.empty(horizon, dtype=np.int64)
    logprobs = np.empty(horizon)
    rewards = np.empty(horizon)
    dones = np.zeros(horizon, dtype=bool)
    truncs = np.zeros(horizon, dtype=bool)
    episodes = []
    actor = params.actor
    obs = state.obs
    for t in range(horizon):
        x = obs.features
        features[t] = x
        logits = actor.predict(x)
        if injector is not None and injector.active:
            action, _ = sample_action(injector.apply(logits), rng)
            injector.observe(action)
            logp = float(log_softmax(logits)[action])
        else:
            action, logp = sample_action(logits, rng)
        result = env.step(action)
        obs_keys.append(obs.obs_key)
        positions.append(obs.position)
        actions[t] = action
        logprobs[t] = logp
        rewards[t] = result.reward
        dones[t] = result.done
        truncs[t] = result.truncated
        events.append(result.observation.events)
        state.steps.append(Step(obs.obs_key, action, obs.position))
        state.episode_return += result.reward
        if result.done or result.truncated:
            success = result.done and result.reward >= success_threshold
            episodes.append(Episode(state.steps, state.episode_return, success, t))
            state.steps, state.episode_return = [], 0.0
            obs = env.reset()
        else:
            obs = result.observation
    state.obs = obs
    values = params.critic.predict(features)[:, 0]
    bootstrap = float(params.critic.predict(obs.features)[0])
    rollout = Rollout(features, obs_keys, positions, actions, logprobs, rewards, values, dones,
                      truncs, events, bootstrap, episodes)
    return rollout, state


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimates and returns (= advantages + values).

    ``dones[t]`` marks the last step of an episode; nothing is bootstrapped
    across it. The final step bootstraps from ``bootstrap_value`` unless done.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise DimensionError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = values[t + 1] if t + 1 < n else bootstrap_value
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


@dataclass
class ShapedBatch:
    advantages: np.ndarray  # A_t after optional normalization
    utilities: np.ndarray
    xi: float
    shaped: np.ndarray
    returns: np.ndarray = None

    @property
    def max_abs_shaping(self) -> float:
        return float(np.max(np.abs(self.shaped - self.advantages))) if len(self.shaped) else 0.0


def shape_advantages(advantages, utilities, xi: float, normalize: bool = True,
                     enabled: bool = True, returns=None) -> ShapedBatch:
    """Return ``A + xi * U``, normalizing ``A`` first when requested.

    With shaping disabled (or all-zero utilities) the shaped advantages are
    the very same array as ``A``.
    """
    a = np.asarray(advantages, dtype=float)
    u = np.asarray(utilities, dtype=float)
    if a.shape != u.shape:
        raise DimensionError(f"advantages {a.shape} and utilities {u.shape} differ in shape")
    if normalize and len(a) > 0:
        a = (a - a.mean()) / (a.std() + 1e-8)
    if not enabled or not np.any(u):
        return ShapedBatch(a, u, xi if enabled else 0.0, a, returns)
    if not 0.0 < xi <= 1.0:
        raise ConfigError(f"shaping coefficient must lie in (0, 1], got {xi}")
    return ShapedBatch(a, u, xi, a + xi * u, returns)


def surrogate_terms(ratio, shaped_adv, clip_eps: float) -> np.ndarray:
    """Per-sample clipped surrogate ``min(r*A, clip(r, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=float)
    shaped_adv = np.asarray(shaped_adv, dtype=float)
    return np.minimum(ratio * shaped_adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * shaped_adv)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    mean_utility: float
    max_abs_shaping: float


def ppo_update(rollout: Rollout, batch: ShapedBatch, params: PolicyParams, cfg: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """K epochs of minibatch Adam on the clipped surrogate; updates ``params`` in place."""
    n = len(rollout)
    if len(batch.shaped) != n or batch.returns is None or len(batch.returns) != n:
        raise DimensionError("shaped batch is not aligned with the rollout")
    X, acts, old_logp = rollout.features, rollout.actions, rollout.logprobs
    adv, ret = batch.shaped, batch.returns
    actor, critic = params.actor, params.critic
    eps = cfg.clip_eps
    pl, vl, ent_sum, clipped, kl, count = 0.0, 0.0, 0.0, 0.0, 0.0, 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = order[lo:lo + cfg.minibatch_size]
            b = len(idx)
            x, a = X[idx], acts[idx]
            logits, atrace = actor.forward(x)
            logp_all = log_softmax(logits)
            probs = np.exp(logp_all)
            rows = np.arange(b)
            logp = logp_all[rows, a]
            ratio = np.exp(logp - old_logp[idx])
            mb_adv = adv[idx]
            surr1 = ratio * mb_adv
            surr2 = np.clip(ratio, 1 - eps, 1 + eps) * mb_adv
            objective = np.minimum(surr1, surr2)
            entropy = -np.sum(probs * logp_all, axis=1)
            policy_loss = -(objective.mean() + cfg.ent_coef * entropy.mean())

            d_logp = np.where(surr1 <= surr2, ratio * mb_adv, 0.0) / b
            g = -probs * d_logp[:, None]
            g[rows, a] += d_logp
            g += (cfg.ent_coef / b) * (-probs * (logp_all + entropy[:, None]))
            actor_grads = clip_by_global_norm(actor.backward(atrace, -g), cfg.max_grad_norm)

            values, ctrace = critic.forward(x)
            err = values[:, 0] - ret[idx]
            value_loss = cfg.vf_coef * np.mean(err * err)
            if not (np.isfinite(policy_loss) and np.isfinite(value_loss)):
                raise TrainingDivergenceError("non-finite PPO loss")
            critic_grads = clip_by_global_norm(
                critic.backward(ctrace, (2.0 * cfg.vf_coef / b) * err[:, None]), cfg.max_grad_norm)

            adam_step(actor, params.actor_opt, actor_grads, cfg.actor_lr)
            adam_step(critic, params.critic_opt, critic_grads, cfg.critic_lr)

            pl += float(policy_loss)
            vl += float(value_loss)
            ent_sum += float(entropy.mean())
            clipped += float(np.mean(np.abs(ratio - 1.0) > eps))
            kl += float(np.mean((ratio - 1.0) - (logp - old_logp[idx])))
            count += 1
    return UpdateStats(pl / count, vl / count, ent_sum / count, clipped / count, kl / count,
                       float(np.mean(batch.utilities)) if n else 0.0, batch.max_abs_shaping)
