"""Retrieval of relevant history items and similar users for a target item.

Three scoring modes are supported for both items and users:

``hard``
    one-hot L1 distance on the category (items) or on the same-category
    count (users): 0 when equal, -2 otherwise, kept when ``>= epsilon``.
``soft``
    cosine similarity of learned embeddings.
``adaptive``
    ``-sgn(|c' - c|) / (1 - tau) + softmax_tau(cos)``, where the softmax
    runs over the whole candidate pool. Because ``1 / (1 - tau) > 1`` and
    the softmax term lies in (0, 1), every exact match outranks every
    mismatch for any ``tau`` in (0, 1).

Ties are always broken in favour of the more recent candidate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import Interaction, UserHistory

MODES = ("hard", "soft", "adaptive")


@dataclass
class SearchConfig:
    mode: str = "adaptive"
    epsilon: float = 0.0
    eta: float = 0.0
    tau: float = 0.99
    iota: float = 0.99
    seq_len: int = 30
    recent_fraction: float = 0.5
    n_similar_users: int = 2
    user_bucket_radius: int = 2
    max_user_pool: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.tau < 1 or not 0 < self.iota < 1:
            raise ValueError("tau and iota must lie in (0, 1)")
        if not 0 <= self.recent_fraction <= 1:
            raise ValueError("recent_fraction must lie in [0, 1]")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.n_similar_users < 0:
            raise ValueError("n_similar_users must be >= 0")

    @property
    def recent_budget(self) -> int:
        return min(self.seq_len, math.ceil(self.recent_fraction * self.seq_len - 1e-9))

    @property
    def searched_budget(self) -> int:
        return self.seq_len - self.recent_budget


@dataclass
class SearchEmbeddings:
    """Frozen embedding snapshot used for soft scores.

    ``category`` is indexed by category id (the last row is the OOV row);
    ``user`` maps user id to its encoded vector.
    """

    category: np.ndarray
    user: Mapping[int, np.ndarray] = field(default_factory=dict)

    def category_rows(self, cats: np.ndarray) -> np.ndarray:
        cats = np.asarray(cats, dtype=np.int64)
        oov = self.category.shape[0] - 1
        return self.category[np.where((cats < 0) | (cats >= oov), oov, cats)]


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of ``a`` (n, d) against vector ``b`` (d,); 0 for zero norms."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b)
    dot = a @ b
    ok = (na > 0) & (nb > 0)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def tempered_softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    if x.size == 0:
        return x.astype(np.float64)
    z = x / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def adaptive_scores(mismatch: np.ndarray, cos: np.ndarray, temperature: float) -> np.ndarray:
    """``-sgn(mismatch) / (1 - temperature) + softmax(cos / temperature)``."""
    hard = -(np.asarray(mismatch) != 0).astype(np.float64) / (1.0 - temperature)
    return hard + tempered_softmax(np.asarray(cos, dtype=np.float64), temperature)


def hard_scores(mismatch: np.ndarray) -> np.ndarray:
    # L1 distance between two one-hot vectors: 0 if equal, 2 otherwise
    return np.where(np.asarray(mismatch) != 0, -2.0, 0.0)


def item_scores(categories: np.ndarray, target_category: int, config: SearchConfig,
                emb: SearchEmbeddings | None) -> np.ndarray:
    """Scores of every candidate category against the target (vectorised)."""
    categories = np.asarray(categories, dtype=np.int64)
    mismatch = categories != target_category
    if config.mode == "hard":
        return hard_scores(mismatch)
    cos = cosine_rows(emb.category_rows(categories), emb.category_rows(np.array([target_category]))[0])
    if config.mode == "soft":
        return cos
    return adaptive_scores(mismatch, cos, config.tau)


def item_score(candidate: Interaction, target: Interaction, config: SearchConfig,
               emb: SearchEmbeddings | None = None, pool: Sequence[Interaction] | None = None) -> float:
    """Score one candidate. In adaptive mode the softmax runs over ``pool``
    (defaults to the candidate alone)."""
    if candidate.timestamp >= target.timestamp:
        raise ValueError("candidate must predate the target")
    pool = list(pool) if pool is not None else [candidate]
    if candidate not in pool:
        pool.append(candidate)
    cats = np.array([e.category_id for e in pool])
    scores = item_scores(cats, target.category_id, config, emb)
    return float(scores[pool.index(candidate)])


def top_k_recent(scores: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best scores, ties to the larger position, returned ascending."""
    if k <= 0 or len(positions) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((-positions, -scores))
    return np.sort(positions[order[:k]])


class RetrievedItems(NamedTuple):
    recent: np.ndarray    # positions into the history, ascending
    searched: np.ndarray  # positions into the history, ascending, disjoint from recent


def retrieve_items(history: UserHistory, target: Interaction, config: SearchConfig,
                   emb: SearchEmbeddings | None, limit: int | None = None,
                   allowed_categories: Sequence[int] | None = None) -> RetrievedItems:
    """Recent window plus top-scoring earlier events, all strictly before the target.

    ``limit`` caps the usable prefix (the target's own position when the
    target is part of ``history``). ``allowed_categories`` restricts the
    searched pool, as the serving index does with its relevance lists.
    """
    arr = history.arrays
    n = history.prefix_length(target.timestamp)
    if limit is not None:
        n = min(n, limit)
    rb, sb = config.recent_budget, config.searched_budget
    start = max(0, n - rb)
    recent = np.arange(start, n, dtype=np.int64)
    if sb == 0 or start == 0:
        return RetrievedItems(recent, np.empty(0, dtype=np.int64))
    cats = arr.categories[:n]
    if config.mode == "adaptive":
        # softmax normalised over the full pre-target history
        cos = cosine_rows(emb.category_rows(cats), emb.category_rows(np.array([target.category_id]))[0])
        scores = adaptive_scores(cats != target.category_id, cos, config.tau)[:start]
    else:
        scores = item_scores(cats[:start], target.category_id, config, emb)
    positions = np.arange(start, dtype=np.int64)
    keep = np.ones(start, dtype=bool)
    if config.mode == "hard":
        keep &= scores >= config.epsilon
    if allowed_categories is not None:
        keep &= np.isin(cats[:start], np.asarray(list(allowed_categories), dtype=np.int64))
    return RetrievedItems(recent, top_k_recent(scores[keep], positions[keep], sb))


# ---------------------------------------------------------------------------
# user search
# ---------------------------------------------------------------------------


class UserSearchIndex:
    """Population index answering "how many category-c events before t" for all users.

    Events are keyed ``row * span + timestamp`` so per-user prefix counts
    reduce to two vectorised ``searchsorted`` calls.
    """

    def __init__(self, histories: Mapping[int, UserHistory]):
        self.histories = histories
        self.user_ids = np.array(sorted(histories), dtype=np.int64)
        self.row_of = {int(u): i for i, u in enumerate(self.user_ids)}
        max_ts = max((h.arrays.timestamps.max() for h in histories.values() if len(h)), default=0.0)
        self.span = float(max_ts) + 2.0
        rows, ts, cats = [], [], []
        for i, u in enumerate(self.user_ids):
            a = histories[int(u)].arrays
            rows.append(np.full(len(a.timestamps), i))
            ts.append(a.timestamps)
            cats.append(a.categories)
        rows = np.concatenate(rows) if rows else np.empty(0)
        ts = np.concatenate(ts) if ts else np.empty(0)
        cats = np.concatenate(cats).astype(np.int64) if cats else np.empty(0, dtype=np.int64)
        keys = rows * self.span + ts
        self.all_keys = np.sort(keys)
        self.by_category: dict[int, np.ndarray] = {}
        order = np.argsort(cats, kind="stable")
        cs, ks = cats[order], keys[order]
        bounds = np.flatnonzero(np.diff(cs)) + 1
        for chunk_c, chunk_k in zip(np.split(cs, bounds), np.split(ks, bounds)):
            if len(chunk_c):
                self.by_category[int(chunk_c[0])] = np.sort(chunk_k)
        self.base = np.arange(len(self.user_ids)) * self.span

    def __len__(self) -> int:
        return len(self.user_ids)

    def category_counts(self, category: int, timestamp: float) -> np.ndarray:
        keys = self.by_category.get(int(category))
        if keys is None:
            return np.zeros(len(self.user_ids), dtype=np.int64)
        t = self._clamp(timestamp)
        return np.searchsorted(keys, self.base + t) - np.searchsorted(keys, self.base)

    def _clamp(self, timestamp: float) -> float:
        # keep each user's key window inside its own row; every event is earlier than span - 1
        return min(float(timestamp), self.span - 1.0)

    def last_activity(self, rows: np.ndarray, timestamp: float) -> np.ndarray:
        """Timestamp of each row's latest event before ``timestamp`` (-inf if none)."""
        base = self.base[rows]
        j = np.searchsorted(self.all_keys, base + self._clamp(timestamp)) - 1
        got = self.all_keys[np.maximum(j, 0)]
        ok = (j >= 0) & (got >= base)
        return np.where(ok, got - base, -np.inf)


class SimilarUser(NamedTuple):
    user_id: int
    score: float
    positions: np.ndarray  # retrieved positions in that user's history, ascending


def user_score(candidate_count: int, anchor_count: int, config: SearchConfig,
               candidate_vec: np.ndarray | None = None, anchor_vec: np.ndarray | None = None,
               pool_vecs: np.ndarray | None = None) -> float:
    """Score one candidate user. In adaptive mode the softmax runs over ``pool_vecs``
    (defaults to the candidate alone)."""
    mismatch = np.array([candidate_count != anchor_count])
    if config.mode == "hard":
        return float(hard_scores(mismatch)[0])
    cos_c = float(cosine_rows(candidate_vec[None, :], anchor_vec)[0])
    if config.mode == "soft":
        return cos_c
    pool = np.atleast_2d(pool_vecs) if pool_vecs is not None else candidate_vec[None, :]
    hit = np.flatnonzero(np.all(pool == candidate_vec, axis=1))
    if len(hit) == 0:
        pool = np.vstack([pool, candidate_vec])
        hit = [len(pool) - 1]
    soft = tempered_softmax(cosine_rows(pool, anchor_vec), config.iota)[hit[0]]
    return float(-float(mismatch[0]) / (1.0 - config.iota) + soft)


def retrieve_similar_users(anchor: UserHistory, target: Interaction, index: UserSearchIndex,
                           config: SearchConfig, emb: SearchEmbeddings | None,
                           limit: int | None = None) -> list[SimilarUser]:
    """Up to ``n_similar_users`` users, best first, each with its own retrieved items."""
    m_hat = config.n_similar_users
    if m_hat == 0 or index is None or len(index) <= 1:
        return []
    c, t = target.category_id, target.timestamp
    n_anchor = anchor.prefix_length(t) if limit is None else min(limit, anchor.prefix_length(t))
    k = int(np.count_nonzero(anchor.arrays.categories[:n_anchor] == c))
    counts = index.category_counts(c, t)
    radius = 0 if config.mode == "hard" else config.user_bucket_radius
    rows = np.flatnonzero(np.abs(counts - k) <= radius)
    anchor_row = index.row_of.get(anchor.user_id)
    if anchor_row is not None:
        rows = rows[rows != anchor_row]
    if len(rows) == 0:
        return []
    last = index.last_activity(rows, t)
    live = np.isfinite(last)
    rows, last = rows[live], last[live]
    if len(rows) == 0:
        return []
    if len(rows) > config.max_user_pool:
        # keep the most recently active part of the bucket range
        keep = np.lexsort((-rows, -last))[: config.max_user_pool]
        rows, last = rows[keep], last[keep]
    mismatch = counts[rows] != k
    if config.mode == "hard":
        scores = hard_scores(mismatch)
        ok = scores >= config.eta
        rows, last, scores = rows[ok], last[ok], scores[ok]
    else:
        uvecs = np.stack([emb.user[int(index.user_ids[r])] for r in rows])
        cos = cosine_rows(uvecs, emb.user[anchor.user_id])
        scores = cos if config.mode == "soft" else adaptive_scores(mismatch, cos, config.iota)
    order = np.lexsort((-rows, -last, -scores))[:m_hat]
    out = []
    for j in order:
        uid = int(index.user_ids[rows[j]])
        got = retrieve_items(index.histories[uid], target, config, emb)
        out.append(SimilarUser(uid, float(scores[j]), np.sort(np.concatenate([got.searched, got.recent]))))
    return out


# ---------------------------------------------------------------------------
# assembled context
# ---------------------------------------------------------------------------


@dataclass
class RetrievedContext:
    history: UserHistory
    target: Interaction
    recent_idx: np.ndarray
    searched_idx: np.ndarray
    recent_budget: int
    searched_budget: int
    similar: list[SimilarUser] = field(default_factory=list)
    n_similar_slots: int = 0
    similar_histories: Mapping[int, UserHistory] = field(default_factory=dict)

    @property
    def user_id(self) -> int:
        return self.history.user_id

    @property
    def is_empty(self) -> bool:
        """True when the user has no usable pre-target history (padding only)."""
        return len(self.recent_idx) == 0 and len(self.searched_idx) == 0

    def _padded(self, idx: np.ndarray, budget: int, history: UserHistory) -> list[Interaction | None]:
        return [None] * (budget - len(idx)) + [history.events[i] for i in idx]

    @property
    def recent_items(self) -> list[Interaction | None]:
        return self._padded(self.recent_idx, self.recent_budget, self.history)

    @property
    def searched_items(self) -> list[Interaction | None]:
        return self._padded(self.searched_idx, self.searched_budget, self.history)

    def similar_items(self, slot: int) -> list[Interaction | None]:
        s = self.similar[slot]
        h = self.similar_histories[s.user_id]
        return self._padded(s.positions, self.recent_budget + self.searched_budget, h)


def build_context(history: UserHistory, target: Interaction, config: SearchConfig,
                  emb: SearchEmbeddings | None, index: UserSearchIndex | None = None,
                  limit: int | None = None,
                  allowed_categories: Sequence[int] | None = None) -> RetrievedContext:
    items = retrieve_items(history, target, config, emb, limit=limit,
                           allowed_categories=allowed_categories)
    similar = []
    if index is not None and config.n_similar_users > 0:
        similar = retrieve_similar_users(history, target, index, config, emb, limit=limit)
    return RetrievedContext(
        history=history, target=target, recent_idx=items.recent, searched_idx=items.searched,
        recent_budget=config.recent_budget, searched_budget=config.searched_budget,
        similar=similar, n_similar_slots=config.n_similar_users,
        similar_histories=index.histories if index is not None else {},
    )
