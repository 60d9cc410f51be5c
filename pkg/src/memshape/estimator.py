"""Estimator-style wrapper around one shaped-PPO training run."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ExperimentConfig
from .experiment import evaluate_policy, greedy_policy
from .gridworlds import make_env
from .neuralnet import softmax
from .training import Trainer


class ShapedPPO(BaseEstimator):
    """Train a policy with ``fit``; map observation features to actions with ``predict``.

    ``fit`` takes no data (the agent generates its own by acting), so ``X``
    and ``y`` are accepted and ignored. Hyperparameters not listed here can
    be passed through ``extra`` as a dict of config keys.

    >>> agent = ShapedPPO(env="frozenlake", total_steps=4096, horizon=2048).fit()
    >>> agent.predict(np.eye(64)[:2]).shape
    (2,)
    """

    def __init__(self, env="frozenlake", total_steps=150_000, horizon=None, shaping=True,
                 prior=None, xi0=0.5, xi_min=0.01, ent_coef=0.01, seed=0, extra=None):
        self.env = env
        self.total_steps = total_steps
        self.horizon = horizon
        self.shaping = shaping
        self.prior = prior
        self.xi0 = xi0
        self.xi_min = xi_min
        self.ent_coef = ent_coef
        self.seed = seed
        self.extra = extra

    def _config(self) -> ExperimentConfig:
        params = dict(env=self.env, total_steps=self.total_steps, horizon=self.horizon,
                      shaping=self.shaping, prior=self.prior, xi0=self.xi0, xi_min=self.xi_min,
                      ent_coef=self.ent_coef, seeds=[self.seed])
        params.update(self.extra or {})
        return ExperimentConfig.from_dict(params).validate()

    def fit(self, X=None, y=None):
        cfg = self._config()
        trainer = Trainer(cfg, self.seed)
        self.history_ = trainer.train()
        self.params_ = trainer.params
        self.graph_ = trainer.graph
        self.config_ = cfg
        self.n_features_in_ = trainer.env.n_features
        self.n_actions_ = trainer.env.n_actions
        return self

    def _features(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._features(X)
        return softmax(self.params_.actor.predict(X))

    def predict(self, X) -> np.ndarray:
        X = self._features(X)
        return np.argmax(self.params_.actor.predict(X), axis=1)

    def score(self, X=None, y=None, seeds=range(10_000, 10_020)) -> float:
        """Greedy mean return on evaluation seeds."""
        check_is_fitted(self, "params_")
        cfg = self.config_
        env = make_env(cfg.env, slippery=cfg.slippery, size=cfg.size)
        return evaluate_policy(greedy_policy(self.params_), env, list(seeds)).mean_return
