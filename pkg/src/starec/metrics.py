"""Click-prediction metrics: AUC, accuracy and mean log loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

PROB_EPS = 1e-12


@dataclass(frozen=True)
class MetricReport:
    auc: float | None  # None when only one class is present
    acc: float
    logloss: float
    n: int
    threshold: float = 0.5
    n_pos: int = 0
    n_neg: int = 0

    def as_dict(self) -> dict:
        return {"AUC": self.auc, "ACC": self.acc, "LogLoss": self.logloss, "n": self.n,
                "threshold": self.threshold, "n_pos": self.n_pos, "n_neg": self.n_neg}


def _check(y_true, y_pred, probabilities: bool = True) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape[0]} labels vs {p.shape[0]} predictions")
    if y.size == 0:
        raise ValueError("no predictions to score")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(p)):
        raise ValueError("predictions must be finite")
    if probabilities and (p.min() < 0 or p.max() > 1):
        raise ValueError("predictions must be probabilities in [0, 1]")
    return y, p


def auc_score(y_true, y_pred) -> float | None:
    """Mann-Whitney AUC of arbitrary real scores; tied scores count one half."""
    y, p = _check(y_true, y_pred, probabilities=False)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(y_true, y_pred, threshold: float = 0.5) -> float:
    y, p = _check(y_true, y_pred)
    return float(np.mean((p >= threshold) == (y == 1)))


def log_loss(y_true, y_pred) -> float:
    y, p = _check(y_true, y_pred)
    p = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def compute_metrics(y_true, y_pred, threshold: float = 0.5) -> MetricReport:
    y, p = _check(y_true, y_pred)
    n_pos = int(y.sum())
    return MetricReport(auc_score(y, p), accuracy(y, p, threshold), log_loss(y, p), int(y.size),
                        float(threshold), n_pos, int(y.size) - n_pos)
