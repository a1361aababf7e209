"""scikit-learn style wrapper around one training run."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import env
from .codecs import StateEncoder
from .policy import ChunkPolicy
from .train import STATE_KINDS, Trainer, evaluate_params, preset_config


class VLAPolicy(BaseEstimator):
    """Chunked action policy trained from demonstration records.

    ``fit`` takes the dataset records (dicts as produced by the data
    generator), ``predict`` maps observations to raw action chunks and
    ``score`` returns the mean closed-loop score on the given episode seeds.
    """

    def __init__(self, preset: str = "ours", steps: int = 3000, batch_size: int = 32, lr: float = 3e-4,
                 alpha: float = 1.0, warm_start_steps: int = 1000, eval_every: int = 250,
                 eval_episodes: int = 100, ood_episodes: int = 100, n_flow_steps: int = 10,
                 mode: str | None = None, model: dict | None = None, random_state: int = 0):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.alpha = alpha
        self.warm_start_steps = warm_start_steps
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.ood_episodes = ood_episodes
        self.n_flow_steps = n_flow_steps
        self.mode = mode
        self.model = model
        self.random_state = random_state

    def _config(self):
        return preset_config(
            self.preset, steps=self.steps, batch_size=self.batch_size, lr=self.lr, alpha=self.alpha,
            warm_start_steps=self.warm_start_steps, eval_every=self.eval_every,
            eval_episodes=self.eval_episodes, ood_episodes=self.ood_episodes, n_flow_steps=self.n_flow_steps,
            model=dict(self.model or {}), seed=self.random_state,
        )

    def fit(self, X: Sequence[dict], y=None):
        cfg = self._config()
        trainer = Trainer(cfg, records=list(X))
        params, rows = trainer.fit()
        self.config_ = cfg
        self.params_ = params
        self.codec_ = trainer.codec
        self.history_ = rows
        return self

    def _policy(self) -> ChunkPolicy:
        check_is_fitted(self, "params_")
        cfg = self.config_
        return ChunkPolicy(cfg.model_config(), self.params_, self.codec_, StateEncoder(STATE_KINDS[cfg.state_encoding]),
                           mode=self.mode, n_flow_steps=cfg.n_flow_steps, seed=cfg.seed)

    def predict(self, X: Sequence[env.Observation]) -> np.ndarray:
        """Raw action chunks, shape ``(n, H, 3)``."""
        return self._policy()(list(X))

    def score(self, X: Sequence[int], y=None) -> float:
        """Mean closed-loop score on ambiguous scenes with the given reset seeds."""
        res = env.evaluate_rollout(self._policy(), list(X), "ambiguous")
        return float(np.mean([r.score for r in res]))

    def evaluate(self, n_episodes: int = 100, ood_episodes: int = 100):
        check_is_fitted(self, "params_")
        return evaluate_params(self.config_, self.params_, self.codec_, n_episodes, ood_episodes, mode=self.mode,
                               seed=self.config_.seed)
