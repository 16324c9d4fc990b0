"""Top-K serving over a two-level index with atomic version swaps.

Level 1 maps a user to level 2, which maps a category to that user's
postings ``(item_id, timestamp, label or None)`` in time order. A
relevance table lists, for each category, the categories whose adaptive
relatedness score clears a threshold; retrieval for a request is
restricted to the relevance list of the category its query maps to.
Similar-user retrieval is off in serving.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np

from .data import Interaction, UserHistory, with_label_values
from .model import STARecModel
from .search import SearchEmbeddings, adaptive_scores, build_context, cosine_rows

INDEX_FORMAT = 1
SCORE_FORMAT = "%.6f"


class Posting(NamedTuple):
    item_id: int
    timestamp: int
    label: int | None


@dataclass(frozen=True)
class ServingConfig:
    relevance_epsilon: float = 0.0
    imputed: bool = True


@dataclass(frozen=True)
class ServingIndex:
    """Immutable snapshot; readers may hold it while a new one is built."""

    version: int
    users: Mapping[int, Mapping[int, tuple[Posting, ...]]]
    histories: Mapping[int, UserHistory]
    relevance: Mapping[int, tuple[int, ...]]
    items: Mapping[int, tuple[int, ...]]  # item_id -> item features (category first)
    popularity: Mapping[int, float]
    now: int
    tau: float

    def postings(self, user_id: int, category: int) -> tuple[Posting, ...]:
        return self.users.get(user_id, {}).get(category, ())


@dataclass
class QueryMap:
    """Exact-match dictionary from normalised query strings to categories."""

    entries: dict[str, int] = field(default_factory=dict)
    fallback_window: int = 10

    def __post_init__(self):
        self.entries = {normalize_query(k): int(v) for k, v in self.entries.items()}

    @classmethod
    def load(cls, path, fallback_window: int = 10) -> "QueryMap":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    query, cat = line.rstrip("\n").split("\t")
                    entries[query] = int(cat)
        return cls(entries, fallback_window)


def normalize_query(query: str) -> str:
    return query.strip().lower()


def map_query(query: str | None, recent: Sequence[Interaction], qmap: QueryMap) -> int | None:
    """Category for a request: dictionary lookup when a query is given,
    otherwise the most frequent category of the last R events (ties to the
    most recent). ``None`` when nothing applies."""
    if query is not None and normalize_query(query) not in ("", "-"):
        return qmap.entries.get(normalize_query(query))
    window = list(recent)[-qmap.fallback_window:] if qmap.fallback_window > 0 else []
    if not window:
        return None
    counts = Counter(e.category_id for e in window)
    best = max(counts.values())
    for e in reversed(window):
        if counts[e.category_id] == best:
            return e.category_id
    return None


def relevance_table(category_emb: np.ndarray, tau: float, epsilon: float) -> dict[int, tuple[int, ...]]:
    """Per category, every category with adaptive relatedness >= ``epsilon``.

    The softmax of the soft term runs over all categories; the OOV row of
    ``category_emb`` is excluded.
    """
    n = category_emb.shape[0] - 1
    cats = np.arange(n)
    out = {}
    for c in range(n):
        cos = cosine_rows(category_emb[:n], category_emb[c])
        scores = adaptive_scores(cats != c, cos, tau)
        out[c] = tuple(int(x) for x in cats[scores >= epsilon])
    return out


def impute_missing_labels(history: UserHistory, model: STARecModel, emb: SearchEmbeddings,
                          tau: float | None = None) -> UserHistory:
    """Replace each missing label by the model's click probability for that event.

    The label channel then mixes the rows as ``p * y(1) + (1 - p) * y(0)``.
    Histories without missing labels are returned unchanged.
    """
    labels = history.arrays.labels
    missing = np.flatnonzero(np.isnan(labels))
    if len(missing) == 0:
        return history
    search = model.search if tau is None else _with_tau(model, tau)
    contexts = [build_context(history, history.events[i], search, emb, limit=int(i)) for i in missing]
    probs = model.predict_proba(contexts, target_label="average")
    values = labels.copy()
    values[missing] = probs
    return with_label_values(history, values)


def _with_tau(model: STARecModel, tau: float, **changes):
    return dataclasses.replace(model.search, tau=tau, iota=tau, **changes)


def build_index(histories: Mapping[int, UserHistory], model: STARecModel, tau: float,
                config: ServingConfig = ServingConfig(), version: int = 1) -> ServingIndex:
    """Populate the two-level index, the relevance table and imputed histories."""
    emb = model.search_embeddings()
    users: dict[int, Mapping[int, tuple[Posting, ...]]] = {}
    served: dict[int, UserHistory] = {}
    items: dict[int, tuple[int, ...]] = {}
    clicks: Counter = Counter()
    shows: Counter = Counter()
    now = 0
    for uid in sorted(histories):
        h = histories[uid]
        level2: dict[int, list[Posting]] = {}
        for e in h.events:
            level2.setdefault(e.category_id, []).append(Posting(e.item_id, e.timestamp, e.label))
            items[e.item_id] = tuple(e.item_features)
            shows[e.item_id] += 1
            clicks[e.item_id] += e.label or 0
            now = max(now, e.timestamp)
        users[uid] = MappingProxyType({c: tuple(p) for c, p in sorted(level2.items())})
        served[uid] = impute_missing_labels(h, model, emb, tau) if config.imputed else h
    popularity = {i: (clicks[i] + 1) / (shows[i] + 2) for i in sorted(shows)}
    return ServingIndex(
        version=version,
        users=MappingProxyType(users),
        histories=MappingProxyType(served),
        relevance=MappingProxyType(relevance_table(emb.category, tau, config.relevance_epsilon)),
        items=MappingProxyType(items),
        popularity=MappingProxyType(popularity),
        now=now + 1,
        tau=tau,
    )


class IndexStore:
    """Holds the current index; one writer publishes, many readers pin."""

    def __init__(self, index: ServingIndex | None = None):
        self._lock = threading.Lock()
        self._current = index

    def pin(self) -> ServingIndex:
        current = self._current
        if current is None:
            raise LookupError("no index published")
        return current

    @property
    def version(self) -> int:
        return self._current.version if self._current is not None else 0

    def publish(self, index: ServingIndex) -> None:
        with self._lock:
            if self._current is not None and index.version <= self._current.version:
                raise ValueError(f"version {index.version} does not advance {self._current.version}")
            self._current = index

    def rebuild(self, histories: Mapping[int, UserHistory], model: STARecModel, tau: float,
                config: ServingConfig = ServingConfig()) -> ServingIndex:
        """Full rebuild with the next version number, then an atomic swap."""
        with self._lock:
            version = self.version + 1
        index = build_index(histories, model, tau, config, version)
        self.publish(index)
        return index


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


class Recommendation(NamedTuple):
    ranked: list[tuple[int, float]]
    cold_start: bool
    version: int
    category: int | None


def _target(user_id: int, item_id: int, index: ServingIndex, timestamp: int) -> Interaction:
    feats = index.items.get(item_id)
    if feats is None:
        # unseen item: every field falls back to the out-of-vocabulary row
        return Interaction(user_id, item_id, -1, timestamp, None, item_features=(-1,))
    return Interaction(user_id, item_id, feats[0], timestamp, None, item_features=feats)


def score_candidates(user_id: int, candidates: Sequence[int], index: ServingIndex, model: STARecModel,
                     query: str | None = None, qmap: QueryMap | None = None,
                     timestamp: int | None = None) -> tuple[np.ndarray, bool, int | None]:
    """Click probabilities for ``candidates``, in input order, on one pinned index."""
    if not candidates:
        raise ValueError("no candidates")
    history = index.histories.get(user_id)
    cold = history is None or len(history) == 0
    if history is None:
        history = UserHistory(user_id, [])
    qmap = qmap or QueryMap()
    category = map_query(query, history.events, qmap)
    if cold and category is None:
        return np.array([index.popularity.get(i, 0.5) for i in candidates]), True, None
    allowed = index.relevance.get(category) if category is not None else None
    ts = index.now if timestamp is None else timestamp
    search = _with_tau(model, index.tau, n_similar_users=0)
    emb = model.search_embeddings()
    contexts = [build_context(history, _target(user_id, i, index, ts), search, emb,
                              allowed_categories=allowed) for i in candidates]
    return model.predict_proba(contexts, target_label="average"), cold, category


def rank(candidates: Sequence[int], scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Descending score, ties by ascending item id, truncated to ``k``."""
    order = sorted(range(len(candidates)), key=lambda j: (-scores[j], candidates[j]))
    return [(int(candidates[j]), float(scores[j])) for j in order[:max(k, 0)]]


def recommend_topk(user_id: int, candidates: Sequence[int], k: int, index: ServingIndex,
                   model: STARecModel, query: str | None = None, qmap: QueryMap | None = None,
                   timestamp: int | None = None) -> Recommendation:
    scores, cold, category = score_candidates(user_id, candidates, index, model, query, qmap, timestamp)
    return Recommendation(rank(candidates, scores, k), cold, index.version, category)


def format_score(score: float) -> str:
    return SCORE_FORMAT % score


# ---------------------------------------------------------------------------
# line protocol and persistence
# ---------------------------------------------------------------------------


def parse_request(line: str) -> tuple[int, str | None, int, list[int]]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise ValueError(f"expected 4 tab-separated fields, got {len(parts)}")
    user, query, k, cands = parts
    query = None if query in ("", "-") else query
    candidates = [int(c) for c in cands.split(",") if c.strip()]
    if not candidates:
        raise ValueError("no candidates")
    if int(k) < 0:
        raise ValueError("K must be >= 0")
    return int(user), query, int(k), candidates


def serve_lines(lines: Iterable[str], out: TextIO, store: IndexStore, model: STARecModel,
                qmap: QueryMap | None = None) -> int:
    """Answer each request line with ``item_id<TAB>score`` lines; malformed
    requests get one ``ERROR<TAB>message`` line. Returns the request count."""
    n = 0
    for line in lines:
        if not line.strip():
            continue
        n += 1
        try:
            user, query, k, candidates = parse_request(line)
            rec = recommend_topk(user, candidates, k, store.pin(), model, query, qmap)
            for item, score in rec.ranked:
                out.write(f"{item}\t{format_score(score)}\n")
        except (ValueError, LookupError) as exc:
            out.write(f"ERROR\t{exc}\n")
        out.flush()
    return n


def save_index(path, index: ServingIndex) -> None:
    """Versioned single-file container written atomically."""
    rows, feats, ufeats = [], [], []
    for uid, h in index.histories.items():
        values = h.arrays.labels
        for e, v in zip(h.events, values):
            raw = math.nan if e.label is None else float(e.label)
            rows.append((uid, e.item_id, e.category_id, e.timestamp, raw, v))
            feats.append(e.item_features)
            ufeats.append(e.user_features)
    width = max((len(f) for f in feats), default=1)
    uwidth = max((len(f) for f in ufeats), default=0)
    fmat = np.full((len(feats), width), -1, dtype=np.int64)
    umat = np.full((len(ufeats), uwidth), -1, dtype=np.int64)
    for i, (f, u) in enumerate(zip(feats, ufeats)):
        fmat[i, :len(f)] = f
        umat[i, :len(u)] = u
    table = np.array(rows, dtype=np.float64).reshape(-1, 6)
    meta = {
        "format": INDEX_FORMAT, "version": index.version, "now": index.now, "tau": index.tau,
        "relevance": {str(c): list(v) for c, v in index.relevance.items()},
        "items": {str(i): list(f) for i, f in index.items.items()},
        "popularity": {str(i): p for i, p in index.popularity.items()},
        "users": [int(u) for u in index.histories],
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             events=table, item_features=fmat, user_features=umat)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_index(path) -> ServingIndex:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != INDEX_FORMAT:
            raise ValueError(f"unsupported index format {meta.get('format')}")
        table, fmat, umat = z["events"], z["item_features"], z["user_features"]
    by_user: dict[int, list[tuple[Interaction, float]]] = {int(u): [] for u in meta["users"]}
    for row, f, u in zip(table, fmat, umat):
        uid, item, cat, ts, raw, value = row
        label = None if math.isnan(raw) else int(raw)
        e = Interaction(int(uid), int(item), int(cat), int(ts), label,
                        user_features=tuple(int(x) for x in u if x >= 0),
                        item_features=tuple(int(x) for x in f if x >= 0))
        by_user[int(uid)].append((e, value))
    users, histories = {}, {}
    for uid, pairs in by_user.items():
        h = UserHistory(uid, [e for e, _ in pairs])
        # events were saved in time order, so the stable sort keeps the label alignment
        histories[uid] = with_label_values(h, np.array([v for _, v in pairs]))
        level2: dict[int, list[Posting]] = {}
        for e in h.events:
            level2.setdefault(e.category_id, []).append(Posting(e.item_id, e.timestamp, e.label))
        users[uid] = MappingProxyType({c: tuple(p) for c, p in sorted(level2.items())})
    return ServingIndex(
        version=int(meta["version"]),
        users=MappingProxyType(users),
        histories=MappingProxyType(histories),
        relevance=MappingProxyType({int(c): tuple(v) for c, v in meta["relevance"].items()}),
        items=MappingProxyType({int(i): tuple(f) for i, f in meta["items"].items()}),
        popularity=MappingProxyType({int(i): float(p) for i, p in meta["popularity"].items()}),
        now=int(meta["now"]),
        tau=float(meta["tau"]),
    )
