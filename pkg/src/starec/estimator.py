"""scikit-learn compatible wrapper around the trainer."""
from __future__ import annotations

from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainConfig
from .data import Task, UserHistory
from .search import SearchConfig
from .training import Trainer


def _tasks(X, histories: Mapping[int, UserHistory]) -> list[Task]:
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] != 2:
        raise ValueError(f"X must have two columns (user_id, position), got {X.shape[1]}")
    tasks = []
    for user, pos in X:
        h = histories.get(int(user))
        if h is None:
            raise ValueError(f"unknown user {user}")
        if not 0 <= pos < len(h):
            raise ValueError(f"position {pos} out of range for user {user} (length {len(h)})")
        tasks.append(Task(int(user), int(pos)))
    return tasks


class STARecClassifier(ClassifierMixin, BaseEstimator):
    """Click-through classifier over (user, target position) rows.

    ``X`` has two integer columns: a user id and the 0-based position of
    the target event in that user's history. Histories are passed to
    :meth:`fit` and kept for prediction; only events before the target are
    used as context.
    """

    def __init__(self, *, dim: int = 64, epochs: int = 10, batch_size: int = 100,
                 lr_start: float = 1e-2, lr_end: float = 1e-6, l2: float = 4e-5,
                 dropout: float = 0.5, mlp_hidden: tuple[int, ...] = (128, 64),
                 tau_start: float = 0.99, tau_end: float = 0.01, optimizer: str = "sgd",
                 decay_mode: str = "log", init_scale: float = 0.05, patience: int = 3,
                 use_time_decay: bool = True, use_recent_half: bool = True,
                 use_label_trick: bool = False, use_search: bool = True,
                 search_mode: str = "adaptive", seq_len: int = 30, recent_fraction: float = 0.5,
                 n_similar_users: int = 2, seed: int = 0):
        self.dim = dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.l2 = l2
        self.dropout = dropout
        self.mlp_hidden = mlp_hidden
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.optimizer = optimizer
        self.decay_mode = decay_mode
        self.init_scale = init_scale
        self.patience = patience
        self.use_time_decay = use_time_decay
        self.use_recent_half = use_recent_half
        self.use_label_trick = use_label_trick
        self.use_search = use_search
        self.search_mode = search_mode
        self.seq_len = seq_len
        self.recent_fraction = recent_fraction
        self.n_similar_users = n_similar_users
        self.seed = seed

    def _configs(self) -> tuple[TrainConfig, SearchConfig]:
        p = self.get_params()
        search = SearchConfig(mode=p.pop("search_mode"), seq_len=p.pop("seq_len"),
                              recent_fraction=p.pop("recent_fraction"),
                              n_similar_users=p.pop("n_similar_users"))
        return TrainConfig(**p), search

    def fit(self, X, y=None, *, histories: Mapping[int, UserHistory], eval_set=None):
        """Train on the rows of ``X``. ``y``, when given, must agree with the
        labels recorded in ``histories``; ``eval_set=(X_val, y_val)`` enables
        early stopping."""
        tasks = _tasks(X, histories)
        train_cfg, search = self._configs()
        self.trainer_ = Trainer(histories, train_cfg, search)
        recorded = self.trainer_.labels(tasks)
        if np.isnan(recorded).any():
            raise ValueError("training targets must have observed labels")
        if y is not None:
            y = np.asarray(y, dtype=np.float64).ravel()
            if y.shape != recorded.shape or not np.array_equal(y, recorded):
                raise ValueError("y must match the labels recorded in histories")
        val = _tasks(eval_set[0], histories) if eval_set is not None else []
        self.report_ = self.trainer_.fit(tasks, val)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = 2
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        p = self.trainer_.predict(_tasks(X, self.trainer_.histories))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= threshold).astype(np.int64)
