"""Scikit-learn style wrapper around the tracker.

``fit`` takes a list of recorded events instead of an ``(X, y)`` pair: the labels live inside
the traces. Hyperparameters are plain constructor arguments so ``get_params``/``set_params``
and ``sklearn.base.clone`` work as usual.
"""
from __future__ import annotations

import json
from pathlib import Path
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .agent import AgentConfig, init_params, n_actions_of
from .boosting import TrainConfig, adapt_on_event, split_event, train_global, train_gels_star
from .diffnum import ParamStore
from .evaluation import EvalReport, LabeledScore, TrackerPolicy, score_split, summarize
from .graph import EventTrace
from .sim.env import EnvConfig


def check_events(events) -> list[EventTrace]:
    if isinstance(events, EventTrace):
        events = [events]
    events = list(events)
    if not events:
        raise ValueError("need at least one event")
    for e in events:
        if not isinstance(e, EventTrace):
            raise TypeError(f"expected EventTrace, got {type(e).__name__}")
    return events


class GELSTracker(BaseEstimator):
    """Graph actor-critic tracker trained across events.

    With ``boosting=False`` the estimator is the single-event ablation: ``fit`` then expects
    exactly one event and only adapts fresh parameters on it.
    """

    def __init__(
        self,
        embed_dim: int = 128,
        state_dim: int = 32,
        hidden_dim: int = 64,
        gamma: float = 0.96,
        epsilon: float = 0.2,
        buffer_k: int = 64,
        eta: float = 1e-3,
        clip_norm: float | None = None,
        self_term: bool = True,
        actor_scale: float = 1.0,
        entropy_weight: float = 0.0,
        boost_eta: float = 1e-3,
        epochs: int = 1,
        adapt_epochs: int = 1,
        cut: int = 30,
        boosting: bool = True,
        value_init: bool = True,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.state_dim = state_dim
        self.hidden_dim = hidden_dim
        self.gamma = gamma
        self.epsilon = epsilon
        self.buffer_k = buffer_k
        self.eta = eta
        self.clip_norm = clip_norm
        self.self_term = self_term
        self.actor_scale = actor_scale
        self.entropy_weight = entropy_weight
        self.boost_eta = boost_eta
        self.epochs = epochs
        self.adapt_epochs = adapt_epochs
        self.cut = cut
        self.boosting = boosting
        self.value_init = value_init
        self.seed = seed

    def agent_config(self) -> AgentConfig:
        return AgentConfig(
            embed_dim=self.embed_dim,
            state_dim=self.state_dim,
            hidden_dim=self.hidden_dim,
            gamma=self.gamma,
            epsilon=self.epsilon,
            buffer_k=self.buffer_k,
            eta=self.eta,
            clip_norm=self.clip_norm,
            self_term=self.self_term,
            actor_scale=self.actor_scale,
            entropy_weight=self.entropy_weight,
        )

    def train_config(self, env: EnvConfig = EnvConfig()) -> TrainConfig:
        return TrainConfig(
            agent=self.agent_config(),
            env=env,
            eta=self.boost_eta,
            epochs=self.epochs,
            adapt_epochs=self.adapt_epochs,
            cut=self.cut,
            seed=self.seed,
            value_init=self.value_init,
        )

    def fit(self, events, y=None, env: EnvConfig = EnvConfig(), on_epoch=None):
        events = check_events(events)
        for e in events:
            if not 1 <= self.cut < e.T:
                raise ValueError(f"cut={self.cut} does not split an event of {e.T} minutes")
        cfg = self.train_config(env)
        self.env_ = env
        if self.boosting:
            result = train_global(events, cfg, on_epoch=on_epoch)
            self.params_ = result.params
            self.training_log_ = result.log
        else:
            if len(events) != 1:
                raise ValueError("the single-event tracker is fitted on exactly one event")
            self.params_ = train_gels_star(events[0], cfg)
            self.training_log_ = []
        self.n_actions_ = n_actions_of(self.params_)
        return self

    def adapt(self, event: EventTrace) -> ParamStore:
        """Parameters fine-tuned on the training minutes of ``event``."""
        check_is_fitted(self, "params_")
        (event,) = check_events(event)
        if not self.boosting:
            return self.params_.copy()
        return adapt_on_event(self.params_, split_event(event, self.cut), self.train_config(self.env_))

    def predict_scores(self, event: EventTrace, adapt: bool = True) -> list[LabeledScore]:
        check_is_fitted(self, "params_")
        (event,) = check_events(event)
        params = self.adapt(event) if adapt else self.params_
        return score_split(params, split_event(event, self.cut), self.agent_config(), self.env_.qoe)

    def predict(self, event: EventTrace, adapt: bool = True) -> np.ndarray:
        """Predicted label of every viewer for each held-out minute, shape (minutes, n)."""
        scores = self.predict_scores(event, adapt)
        (event,) = check_events(event)
        return np.array([int(s.predicted) for s in scores]).reshape(-1, event.n)

    def evaluate(self, event: EventTrace, adapt: bool = True) -> EvalReport:
        return summarize(self.predict_scores(event, adapt))

    def score(self, event: EventTrace, y=None) -> float:
        """Macro-averaged one-vs-rest AUC on the held-out minutes."""
        return self.evaluate(event).overall["macro_auc"]

    def policy(self) -> TrackerPolicy:
        check_is_fitted(self, "params_")
        return TrackerPolicy(self.params_, self.self_term)

    # ------------------------------------------------------------ checkpoints

    def to_json(self) -> dict:
        check_is_fitted(self, "params_")
        return {"estimator": self.get_params(), "params": self.params_.to_json()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, data: dict, env: EnvConfig = EnvConfig()) -> "GELSTracker":
        est = cls(**data["estimator"])
        est.params_ = ParamStore.from_json(data["params"])
        est.n_actions_ = n_actions_of(est.params_)
        est.training_log_ = []
        est.env_ = env
        return est

    @classmethod
    def load(cls, path, env: EnvConfig = EnvConfig()) -> "GELSTracker":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(data, dict) or "estimator" not in data or "params" not in data:
            raise ValueError(f"{path} is not a tracker checkpoint")
        return cls.from_json(data, env)

    def init_untrained(self, n_actions: int) -> "GELSTracker":
        """Fresh parameters without training, mostly for tests and smoke runs."""
        self.params_ = init_params(n_actions, self.agent_config(), self.seed)
        self.n_actions_ = n_actions
        self.training_log_ = []
        self.env_ = EnvConfig()
        return self
