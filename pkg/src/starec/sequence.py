"""Time-aware recurrent encoder with attention-modulated output gate.

One step, with ``x = [item embedding, label embedding]``::

    f' = sigmoid(W_f x + U_f h'_prev)
    i' = sigmoid(W_i x + U_i h'_prev)
    c' = tanh(W_c' x + i' * (U_c' h'_prev))
    h' = f' * c' + (1 - f') * h'_prev

    c_short = tanh(W_c c' + b_c)
    c       = c' - c_short + c_short * de(dt)
    a'      = softmax_over_positions(h' W_a' x_pos)[this position]
    f       = a' * f'
    h       = f * c + (1 - f) * h'

The recurrence carries ``h'``; ``h`` is the per-position output consumed by
the aggregator. Without time awareness (no decay, no attention) the cell is
a standard gated recurrence whose output is ``h'`` itself.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

LABEL_NEG, LABEL_POS, LABEL_UNKNOWN = 0, 1, 2
DECAY_MODES = ("reciprocal", "log")


def decay_factor(dt, mode: str) -> np.ndarray:
    """Heuristic decay ``1/dt`` or ``1/log(e + dt - 1)``, with dt clamped to >= 1.

    Both modes give exactly 1 at (and below) a unit gap.
    """
    dt = np.maximum(np.asarray(dt, dtype=np.float64), 1.0)
    if mode == "reciprocal":
        return 1.0 / dt
    if mode == "log":
        return 1.0 / np.log(math.e + dt - 1.0)
    raise ValueError(f"decay mode must be one of {DECAY_MODES}, got {mode!r}")


class LabelEmbedding:
    """Three learnable rows: negative, positive, unknown."""

    def __init__(self, store: ad.ParameterStore, dim: int, rng: np.random.Generator,
                 name: str = "label.y", scale: float = 0.05):
        self.table = store.add(name, rng.uniform(-scale, scale, size=(3, dim)))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, weights: np.ndarray) -> ad.Tensor:
        """Mix the rows with ``weights`` of shape (..., 3)."""
        return ad.matmul(ad.Tensor(weights), self.table)


def label_weights(labels: np.ndarray, use_labels: bool) -> np.ndarray:
    """Row weights over (neg, pos, unknown) for observed label values.

    A value in [0, 1] becomes ``[1 - v, v, 0]`` (hard labels are one-hot,
    imputed probabilities give a convex mixture); NaN or ``use_labels``
    false gives the unknown row.
    """
    labels = np.asarray(labels, dtype=np.float64)
    w = np.zeros(labels.shape + (3,))
    if not use_labels:
        w[..., LABEL_UNKNOWN] = 1.0
        return w
    known = ~np.isnan(labels)
    v = np.where(known, labels, 0.0)
    w[..., LABEL_NEG] = np.where(known, 1.0 - v, 0.0)
    w[..., LABEL_POS] = np.where(known, v, 0.0)
    w[..., LABEL_UNKNOWN] = np.where(known, 0.0, 1.0)
    return w


def target_label_weights(n: int, use_labels: bool, rng: np.random.Generator | None) -> np.ndarray:
    """Target-position label rows: a fresh uniform {0, 1} draw per row in label
    mode, the unknown row otherwise."""
    w = np.zeros((n, 3))
    if use_labels:
        b = rng.integers(0, 2, size=n)
        w[np.arange(n), b] = 1.0
    else:
        w[:, LABEL_UNKNOWN] = 1.0
    return w


def label_input(item_embedding: np.ndarray, label: int | None, table: np.ndarray, *,
                is_target: bool, use_labels: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    """Concatenate one position's item embedding with its label embedding."""
    if not use_labels:
        row = LABEL_UNKNOWN
    elif is_target:
        row = int(rng.integers(0, 2))
    else:
        row = LABEL_UNKNOWN if label is None else int(label)
    return np.concatenate([np.asarray(item_embedding, dtype=np.float64), table[row]])


class TimeAwareWeights:
    """Parameters of one time-aware recurrent network."""

    def __init__(self, store: ad.ParameterStore, prefix: str, input_dim: int, hidden_dim: int,
                 rng: np.random.Generator, scale: float = 0.05):
        def u(*shape):
            return rng.uniform(-scale, scale, size=shape)

        self.prefix = prefix
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.W_f = store.add(f"{prefix}.W_f", u(input_dim, hidden_dim))
        self.U_f = store.add(f"{prefix}.U_f", u(hidden_dim, hidden_dim))
        self.W_i = store.add(f"{prefix}.W_i", u(input_dim, hidden_dim))
        self.U_i = store.add(f"{prefix}.U_i", u(hidden_dim, hidden_dim))
        self.W_cp = store.add(f"{prefix}.W_cp", u(input_dim, hidden_dim))
        self.U_cp = store.add(f"{prefix}.U_cp", u(hidden_dim, hidden_dim))
        self.W_c = store.add(f"{prefix}.W_c", u(hidden_dim, hidden_dim))
        self.b_c = store.add(f"{prefix}.b_c", np.zeros(hidden_dim))
        # attention logits are h'_t W_att^T x_s; stored as (input, hidden) so the keys x_s W_att are one matmul
        self.W_att = store.add(f"{prefix}.W_att", u(input_dim, hidden_dim))


class CellState(NamedTuple):
    h: ad.Tensor         # time-aware output
    c: ad.Tensor         # decayed cell
    h_prime: ad.Tensor   # recurrent state carried to the next step
    c_prime: ad.Tensor
    attention: ad.Tensor | None  # (N, L) attention of this step's query; None without time awareness


def time_aware_cell(w: TimeAwareWeights, x_proj: tuple[ad.Tensor, ad.Tensor, ad.Tensor],
                    h_prev: ad.Tensor, decay: np.ndarray, inputs: ad.Tensor, mask: np.ndarray,
                    position: int, time_aware: bool = True, keys: ad.Tensor | None = None) -> CellState:
    """Advance one step.

    ``x_proj`` holds ``(W_f x, W_i x, W_c' x)`` for this position, ``decay``
    the per-row factor ``de(dt)`` and ``inputs``/``mask`` the whole
    sequence, which forms the attention context. ``keys`` may carry the
    precomputed ``inputs @ W_att`` shared by every step of a sequence.
    """
    xf, xi, xc = x_proj
    f_p = ad.sigmoid(ad.add(xf, ad.matmul(h_prev, w.U_f)))
    i_p = ad.sigmoid(ad.add(xi, ad.matmul(h_prev, w.U_i)))
    c_p = ad.tanh(ad.add(xc, ad.mul(i_p, ad.matmul(h_prev, w.U_cp))))
    h_p = ad.add(ad.mul(f_p, c_p), ad.mul(ad.sub(1.0, f_p), h_prev))

    if not time_aware:
        # a standard gated recurrence: the output is the carried state
        return CellState(h_p, c_p, h_p, c_p, None)
    if keys is None:
        keys = ad.matmul(inputs, w.W_att)
    att = ad.softmax(ad.batched_dot(keys, h_p), mask=mask)
    c_short = ad.tanh(ad.add(ad.matmul(c_p, w.W_c), w.b_c))
    c = ad.sub(c_p, ad.mul(c_short, (1.0 - decay)[:, None]))
    gate = ad.mul(ad.index(att, (slice(None), slice(position, position + 1))), f_p)
    h = ad.add(ad.mul(gate, c), ad.mul(ad.sub(1.0, gate), h_p))
    return CellState(h, c, h_p, c_p, att)


def encode_sequence(w: TimeAwareWeights, inputs: ad.Tensor, decay: np.ndarray, mask: np.ndarray,
                    time_aware: bool = True) -> ad.Tensor:
    """Run the network over ``inputs`` (N, L, D); returns hidden outputs (N, L, H).

    Padding positions (``mask`` false) must carry zero inputs; their
    outputs are zeroed and they are excluded from every attention softmax.
    """
    n, length, _ = inputs.shape
    if length == 0:
        raise ValueError("cannot encode an empty sequence")
    xf_all = ad.unstack(ad.matmul(inputs, w.W_f))
    xi_all = ad.unstack(ad.matmul(inputs, w.W_i))
    xc_all = ad.unstack(ad.matmul(inputs, w.W_cp))
    keys = ad.matmul(inputs, w.W_att) if time_aware else None
    h_prev = ad.Tensor(np.zeros((n, w.hidden_dim)))
    outs = []
    for t in range(length):
        proj = (xf_all[t], xi_all[t], xc_all[t])
        state = time_aware_cell(w, proj, h_prev, decay[:, t], inputs, mask, t, time_aware, keys)
        if not (np.isfinite(state.h.value).all() and np.isfinite(state.h_prime.value).all()):
            raise FloatingPointError(f"{w.prefix}: non-finite cell state at position {t}")
        h_prev = state.h_prime
        outs.append(state.h)
    hidden = ad.stack(outs, axis=1)
    return ad.mul(hidden, mask[:, :, None].astype(np.float64))


def sequence_decay(timestamps: np.ndarray, mask: np.ndarray, mode: str, enabled: bool = True) -> np.ndarray:
    """Per-position ``de(dt)`` with dt measured from the preceding position.

    Sequences are left-padded, so real positions form a suffix. The first
    real position (no predecessor) and padding get factor 1.
    """
    out = np.ones(timestamps.shape)
    if not enabled or timestamps.shape[1] < 2:
        return out
    both = mask[:, 1:] & mask[:, :-1]
    gaps = np.where(both, timestamps[:, 1:] - timestamps[:, :-1], 0.0)
    out[:, 1:] = np.where(both, decay_factor(gaps, mode), 1.0)
    return out
