"""Sequence aggregation and the final prediction head."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad


class Aggregator:
    """Attention pooling: ``sigmoid(W_m (sum_t a_t h_t W_t) + b_m)``, ``a = softmax(h_t w_a)``."""

    def __init__(self, store: ad.ParameterStore, prefix: str, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator, scale: float = 0.05):
        self.prefix = prefix
        self.out_dim = out_dim
        self.w_alpha = store.add(f"{prefix}.w_alpha", rng.uniform(-scale, scale, size=(hidden_dim, 1)))
        self.W_t = store.add(f"{prefix}.W_t", rng.uniform(-scale, scale, size=(hidden_dim, hidden_dim)))
        self.W_m = store.add(f"{prefix}.W_m", rng.uniform(-scale, scale, size=(hidden_dim, out_dim)))
        self.b_m = store.add(f"{prefix}.b_m", np.zeros(out_dim))

    def weights(self, hidden: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
        n, length, _ = hidden.shape
        logits = ad.reshape(ad.matmul(hidden, self.w_alpha), (n, length))
        return ad.softmax(logits, mask=mask)

    def __call__(self, hidden: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
        n, length, _ = hidden.shape
        alpha = ad.reshape(self.weights(hidden, mask), (n, length, 1))
        pooled = ad.reduce_sum(ad.mul(ad.matmul(hidden, self.W_t), alpha), axis=1)
        e = ad.sigmoid(ad.add(ad.matmul(pooled, self.W_m), self.b_m))
        # sequences with no real position contribute a zero vector
        valid = mask.any(axis=1).astype(np.float64)[:, None]
        return ad.mul(e, valid)


def aggregate_sequence(hidden: ad.Tensor, mask: np.ndarray, weights: Aggregator) -> ad.Tensor:
    return weights(hidden, mask)


class MLPHead:
    """Rectifier MLP producing one logit per row."""

    def __init__(self, store: ad.ParameterStore, prefix: str, in_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, scale: float = 0.05):
        self.in_dim = in_dim
        self.layers = []
        width = in_dim
        for k, size in enumerate(hidden):
            W = store.add(f"{prefix}.W{k}", rng.uniform(-scale, scale, size=(width, size)))
            b = store.add(f"{prefix}.b{k}", np.zeros(size))
            self.layers.append((W, b))
            width = size
        self.w_out = store.add(f"{prefix}.w_out", rng.uniform(-scale, scale, size=(width, 1)))
        self.b_out = store.add(f"{prefix}.b_out", np.zeros(1))

    def __call__(self, x: ad.Tensor, *, dropout: float = 0.0, training: bool = False,
                 rng: np.random.Generator | None = None) -> ad.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"MLP expects width {self.in_dim}, got {x.shape[-1]}")
        h = ad.dropout(x, dropout, rng, training)
        for W, b in self.layers:
            h = ad.relu(ad.add(ad.matmul(h, W), b))
        logit = ad.add(ad.matmul(h, self.w_out), self.b_out)
        return ad.reshape(logit, (x.shape[0],))
