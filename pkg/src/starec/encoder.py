"""Product-based encoder turning categorical feature fields into one vector.

For fields ``x_1..x_P`` (each an embedding row) and per-field weight
vectors ``v_1..v_P``::

    e = sum_p v_p * x_p + sum_{p<p'} (v_p * v_p') <x_p, x_p'>

Index values outside a field's vocabulary map to that field's OOV row.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad


class FieldEmbeddings:
    """Per-field embedding tables and weight vectors registered in a store."""

    def __init__(self, store: ad.ParameterStore, prefix: str, vocab_sizes: Sequence[int],
                 dim: int, rng: np.random.Generator, scale: float = 0.05):
        if not vocab_sizes:
            raise ValueError("at least one field is required")
        self.prefix = prefix
        self.vocab_sizes = [int(v) for v in vocab_sizes]
        self.dim = dim
        self.tables = [
            store.add(f"{prefix}.x{p}", rng.uniform(-scale, scale, size=(v + 1, dim)))
            for p, v in enumerate(self.vocab_sizes)
        ]
        self.weights = [
            store.add(f"{prefix}.v{p}", rng.uniform(-scale, scale, size=dim))
            for p in range(len(self.vocab_sizes))
        ]

    @property
    def n_fields(self) -> int:
        return len(self.tables)

    def clip_index(self, idx: np.ndarray) -> np.ndarray:
        """Map each field's out-of-vocabulary indices to its OOV row."""
        idx = np.asarray(idx, dtype=np.int64)
        out = idx.copy()
        for p, v in enumerate(self.vocab_sizes[: idx.shape[-1]]):
            col = out[..., p]
            col[(col < 0) | (col >= v)] = v
        return out

    def lookup(self, field: int, idx: np.ndarray) -> ad.Tensor:
        return ad.take_rows(self.tables[field], idx)

    def __call__(self, idx: np.ndarray) -> ad.Tensor:
        """Encode an index array of shape (..., P) into (..., dim)."""
        idx = self.clip_index(idx)
        n = idx.shape[-1]
        if n == 0:
            raise ValueError("encode_features needs at least one field")
        if n > self.n_fields:
            raise ad.ShapeError(f"{self.prefix}: got {n} fields, encoder has {self.n_fields}")
        xs = [self.lookup(p, idx[..., p]) for p in range(n)]
        out = ad.mul(xs[0], self.weights[0])
        for p in range(1, n):
            out = ad.add(out, ad.mul(xs[p], self.weights[p]))
        for p in range(n):
            for q in range(p + 1, n):
                inner = ad.reduce_sum(ad.mul(xs[p], xs[q]), axis=-1, keepdims=True)
                out = ad.add(out, ad.mul(inner, ad.mul(self.weights[p], self.weights[q])))
        return out

    def encode_numpy(self, idx: np.ndarray) -> np.ndarray:
        """Same as ``__call__`` without recording; used by retrieval."""
        idx = self.clip_index(idx)
        xs = [self.tables[p].value[idx[..., p]] for p in range(idx.shape[-1])]
        vs = [w.value for w in self.weights]
        out = sum(v * x for v, x in zip(vs, xs))
        for p in range(len(xs)):
            for q in range(p + 1, len(xs)):
                out = out + (xs[p] * xs[q]).sum(-1, keepdims=True) * (vs[p] * vs[q])
        return out


def encode_features(fields: Sequence[int], tables: FieldEmbeddings) -> ad.Tensor:
    """Encode one entity's categorical fields into a ``tables.dim`` vector."""
    if len(fields) == 0:
        raise ValueError("encode_features needs at least one field")
    return tables(np.asarray(fields, dtype=np.int64))
