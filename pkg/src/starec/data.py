"""Interaction logs, per-user histories, the temporal split and synthetic data."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "item_id", "category_id", "timestamp", "label")


class DataError(ValueError):
    """Malformed input data; ``line`` is the 1-based file line when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: int
    item_id: int
    category_id: int
    timestamp: int
    label: int | None = 0
    user_features: tuple[int, ...] = ()
    item_features: tuple[int, ...] = ()

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.timestamp < 0:
            raise DataError(f"timestamp must be nonnegative, got {self.timestamp}")
        if not self.item_features:
            object.__setattr__(self, "item_features", (self.category_id,))
        elif self.item_features[0] != self.category_id:
            raise DataError("item_features[0] must equal category_id")


class HistoryArrays(NamedTuple):
    """Column view of a history used by retrieval and batching."""

    items: np.ndarray        # (n,) int
    categories: np.ndarray   # (n,) int
    timestamps: np.ndarray   # (n,) float
    labels: np.ndarray       # (n,) float; NaN marks a missing label
    item_features: np.ndarray  # (n, P_i) int


@dataclass
class UserHistory:
    """Time-sorted events of one user. Ties keep input order (stable sort)."""

    user_id: int
    events: list[Interaction]
    recent_window: int = 0

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.timestamp)
        if self.recent_window > len(self.events):
            self.recent_window = len(self.events)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def user_features(self) -> tuple[int, ...]:
        return self.events[0].user_features if self.events else ()

    @property
    def recent(self) -> list[Interaction]:
        return self.events[len(self.events) - self.recent_window:] if self.recent_window else []

    @cached_property
    def arrays(self) -> HistoryArrays:
        ev = self.events
        width = max((len(e.item_features) for e in ev), default=1)
        feats = np.zeros((len(ev), width), dtype=np.int64)
        for i, e in enumerate(ev):
            feats[i, :len(e.item_features)] = e.item_features
        return HistoryArrays(
            items=np.array([e.item_id for e in ev], dtype=np.int64),
            categories=np.array([e.category_id for e in ev], dtype=np.int64),
            timestamps=np.array([e.timestamp for e in ev], dtype=np.float64),
            labels=np.array([np.nan if e.label is None else e.label for e in ev], dtype=np.float64),
            item_features=feats,
        )

    def prefix_length(self, timestamp: float) -> int:
        """Number of events strictly earlier than ``timestamp``."""
        return int(np.searchsorted(self.arrays.timestamps, timestamp, side="left"))


def with_label_values(history: UserHistory, labels: np.ndarray) -> UserHistory:
    """Copy of ``history`` whose array view carries ``labels`` (floats in
    [0, 1] or NaN), e.g. imputed click probabilities. Events are shared."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(history),):
        raise ValueError(f"expected {len(history)} label values, got shape {labels.shape}")
    known = labels[~np.isnan(labels)]
    if known.size and (known.min() < 0 or known.max() > 1):
        raise ValueError("label values must lie in [0, 1]")
    out = UserHistory(history.user_id, list(history.events), history.recent_window)
    out.__dict__["arrays"] = history.arrays._replace(labels=labels)
    return out


# ---------------------------------------------------------------------------
# TSV input/output
# ---------------------------------------------------------------------------


@dataclass
class LoadReport:
    n_rows: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def group_histories(interactions: Iterable[Interaction], recent_window: int = 0) -> dict[int, UserHistory]:
    by_user: dict[int, list[Interaction]] = {}
    for it in interactions:
        by_user.setdefault(it.user_id, []).append(it)
    return {u: UserHistory(u, ev, recent_window) for u, ev in sorted(by_user.items())}


def load_interactions(path, *, recent_window: int = 0, strict: bool = False):
    """Read a tab-separated log into ``{user_id: UserHistory}``.

    Returns ``(histories, report)``. Bad rows are skipped and listed in the
    report unless ``strict`` is set, in which case the first one raises
    :class:`DataError`.
    """
    path = Path(path)
    report = LoadReport()
    rows: list[Interaction] = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file: header required", line=1) from None
        header = [h.strip() for h in header]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"missing required column {col!r}", line=1)
        pos = {h: i for i, h in enumerate(header)}
        uf_cols = [pos[h] for h in header if h.startswith("uf_")]
        if_cols = [pos[h] for h in header if h.startswith("if_")]
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            report.n_rows += 1
            try:
                if len(row) != len(header):
                    raise DataError(f"expected {len(header)} fields, got {len(row)}", lineno)
                vals = {}
                for col in REQUIRED_COLUMNS:
                    text = row[pos[col]]
                    # an empty label cell marks delayed (not yet observed) feedback
                    vals[col] = None if col == "label" and not text.strip() else _parse_int(text, col, lineno)
                cat = vals["category_id"]
                rows.append(Interaction(
                    user_id=vals["user_id"],
                    item_id=vals["item_id"],
                    category_id=cat,
                    timestamp=vals["timestamp"],
                    label=vals["label"],
                    user_features=tuple(_parse_int(row[i], header[i], lineno) for i in uf_cols),
                    item_features=(cat,) + tuple(_parse_int(row[i], header[i], lineno) for i in if_cols),
                ))
            except DataError as exc:
                if exc.line is None:
                    exc = DataError(str(exc), lineno)
                if strict:
                    raise exc
                report.rejected.append((lineno, str(exc)))
    if report.rejected:
        logger.warning("%s: rejected %d of %d rows", path, report.n_rejected, report.n_rows)
    return group_histories(rows, recent_window), report


def _parse_int(text: str, column: str, line: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise DataError(f"column {column!r}: not an integer: {text!r}", line) from None


def write_interactions(path, histories: Mapping[int, UserHistory] | Iterable[UserHistory]) -> None:
    """Write histories in the loader's TSV format (events in stored order)."""
    hs = list(histories.values()) if isinstance(histories, Mapping) else list(histories)
    n_uf = max((len(h.user_features) for h in hs), default=0)
    n_if = max((len(e.item_features) - 1 for h in hs for e in h.events), default=0)
    header = list(REQUIRED_COLUMNS) + [f"uf_{i + 1}" for i in range(n_uf)] + [f"if_{i + 1}" for i in range(n_if)]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(header) + "\n")
        for h in hs:
            for e in h.events:
                label = "" if e.label is None else str(e.label)
                cells = [str(e.user_id), str(e.item_id), str(e.category_id), str(e.timestamp), label]
                cells += [str(v) for v in e.user_features]
                cells += [str(v) for v in e.item_features[1:]]
                fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# temporal split
# ---------------------------------------------------------------------------


class Task(NamedTuple):
    """Predict event ``position`` (0-based) of ``user_id`` from events ``[0, position)``."""

    user_id: int
    position: int


@dataclass
class DatasetSplit:
    histories: dict[int, UserHistory]
    train: list[Task]
    validation: list[Task]
    test: list[Task]
    excluded: int = 0

    def labels(self, tasks: Sequence[Task]) -> np.ndarray:
        return np.array([self.histories[t.user_id].events[t.position].label for t in tasks], dtype=np.float64)


def temporal_split(histories: Mapping[int, UserHistory], min_length: int = 4) -> DatasetSplit:
    """Last three events of each user become its train/validation/test targets.

    With ``T`` events (1-based), train predicts ``T-2`` from ``1..T-3``,
    validation predicts ``T-1`` from ``1..T-2`` and test predicts ``T``
    from ``1..T-1``. Users with fewer than ``min_length`` events are
    excluded and counted.
    """
    train, val, test = [], [], []
    excluded = 0
    for uid, h in histories.items():
        n = len(h)
        if n < min_length:
            excluded += 1
            continue
        train.append(Task(uid, n - 3))
        val.append(Task(uid, n - 2))
        test.append(Task(uid, n - 1))
    if excluded:
        logger.info("temporal_split: excluded %d users with fewer than %d events", excluded, min_length)
    return DatasetSplit(dict(histories), train, val, test, excluded)


# ---------------------------------------------------------------------------
# synthetic data with planted structure
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the planted-structure generator.

    Each category ``c`` has a repurchase period: an event in ``c`` is due
    (label 1 before noise) when at least ``period[c]`` time units have
    passed since the user's previous positive in ``c`` (or since time 0).
    With ``period_anchor="event"`` the clock restarts at every event in
    ``c`` instead, so the rule is visible without labels. With
    ``click_suppression`` a positive forces the next ``suppression_span``
    labels of that user to 0.

    Gaps between events are ``1 + Poisson(mean_gap - 1)``; a finite
    ``gap_shape`` mixes the Poisson rate over a gamma distribution of
    that shape, giving bursty sessions separated by long pauses, and
    ``user_gap_spread`` scales each user's rate by a log-normal factor
    with that log-scale deviation, so event counts and elapsed time
    diverge across users.
    """

    n_users: int = 1000
    n_items: int = 2000
    n_categories: int = 20
    period_per_category: dict[int, int] | None = None
    period_range: tuple[int, int] = (6, 40)
    click_suppression: bool = False
    suppression_span: int = 2
    events_per_user: tuple[int, int] = (50, 60)
    mean_gap: float = 3.0
    gap_shape: float | None = None
    user_gap_spread: float = 0.0
    period_anchor: str = "positive"
    noise: float = 0.1
    base_rate: float | None = None
    n_personas: int = 8
    persona_concentration: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_users <= 0 or self.n_items <= 0 or self.n_categories <= 0:
            raise ValueError("n_users, n_items and n_categories must be positive")
        if self.n_items < self.n_categories:
            raise ValueError("need at least one item per category")
        lo, hi = self.events_per_user
        if not 1 <= lo <= hi:
            raise ValueError(f"bad events_per_user {self.events_per_user}")
        if self.mean_gap < 1:
            raise ValueError("mean_gap must be >= 1")
        if self.gap_shape is not None and self.gap_shape <= 0:
            raise ValueError("gap_shape must be positive")
        if self.user_gap_spread < 0:
            raise ValueError("user_gap_spread must be >= 0")
        if self.period_anchor not in ("positive", "event"):
            raise ValueError("period_anchor must be 'positive' or 'event'")
        if not 0 <= self.noise < 0.5:
            raise ValueError("noise must be in [0, 0.5)")
        if self.base_rate is not None and not 0 < self.base_rate < 1:
            raise ValueError("base_rate must be in (0, 1)")
        if self.period_per_category is not None:
            for c, p in self.period_per_category.items():
                if p <= 0:
                    raise ValueError(f"period for category {c} must be positive")

    def periods(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1])
        lo, hi = self.period_range
        out = rng.integers(lo, hi + 1, size=self.n_categories).astype(np.float64)
        for c, p in (self.period_per_category or {}).items():
            out[int(c)] = p
        return out


def _planted_labels(cats, ts, lengths, periods, p_due, p_not, uniforms, span, anchor_all=False):
    """Vectorised over users: walk event positions left to right."""
    n_users, width = cats.shape
    last_pos = np.zeros((n_users, len(periods)))
    blocked = np.zeros(n_users, dtype=np.int64)
    labels = np.zeros((n_users, width), dtype=np.int64)
    rows = np.arange(n_users)
    for j in range(width):
        live = lengths > j
        c = cats[:, j]
        t = ts[:, j]
        due = (t - last_pos[rows, c]) >= periods[c]
        p = np.where(due, p_due, p_not)
        y = (uniforms[:, j] < p) & live
        if span:
            y &= blocked == 0
            blocked = np.where(live & (blocked > 0), blocked - 1, blocked)
            blocked = np.where(y, span, blocked)
        labels[:, j] = y
        hit = rows[live] if anchor_all else rows[y]
        last_pos[hit, c[hit]] = t[hit]
    return labels


def generate_synthetic(spec: SyntheticSpec) -> dict[int, UserHistory]:
    """Deterministic synthetic log with periodic repurchase structure."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_u, n_c = spec.n_users, spec.n_categories
    periods = spec.periods()

    persona_pref = rng.dirichlet(np.full(n_c, spec.persona_concentration), size=spec.n_personas)
    persona = rng.integers(0, spec.n_personas, size=n_u)
    lo, hi = spec.events_per_user
    lengths = rng.integers(lo, hi + 1, size=n_u)
    width = int(lengths.max())

    # per-user preference: persona mixture blurred with a little uniform mass
    pref = 0.85 * persona_pref[persona] + 0.15 / n_c
    cum = np.cumsum(pref, axis=1)
    cum[:, -1] = 1.0
    cats = (rng.random((n_u, width))[:, :, None] > cum[:, None, :]).sum(-1)
    sigma = spec.user_gap_spread
    user_scale = np.exp(sigma * rng.standard_normal(n_u) - 0.5 * sigma ** 2)
    rate = np.broadcast_to((spec.mean_gap - 1.0) * user_scale[:, None], (n_u, width))
    if spec.gap_shape is not None:
        rate = rng.gamma(spec.gap_shape, rate / spec.gap_shape)
    gaps = 1 + rng.poisson(rate)
    ts = np.cumsum(gaps, axis=1).astype(np.float64)
    per_cat = spec.n_items // n_c
    slot = rng.integers(0, per_cat, size=(n_u, width))
    items = cats + n_c * slot
    uniforms = rng.random((n_u, width))

    span = spec.suppression_span if spec.click_suppression else 0
    a, b = 1.0 - spec.noise, spec.noise

    def labels_for(shift: float) -> np.ndarray:
        return _planted_labels(cats, ts, lengths, periods, np.clip(a + shift, 0, 1),
                               np.clip(b + shift, 0, 1), uniforms, span,
                               spec.period_anchor == "event")

    if spec.base_rate is None:
        labels = labels_for(0.0)
    else:
        live = np.arange(width)[None, :] < lengths[:, None]
        lo_s, hi_s = -1.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo_s + hi_s)
            rate = labels_for(mid)[live].mean()
            if rate < spec.base_rate:
                lo_s = mid
            else:
                hi_s = mid
        labels = labels_for(0.5 * (lo_s + hi_s))

    histories = {}
    for u in range(n_u):
        uf = (int(persona[u]),)
        events = [
            Interaction(u, int(items[u, j]), int(cats[u, j]), int(ts[u, j]), int(labels[u, j]),
                        user_features=uf, item_features=(int(cats[u, j]), int(slot[u, j] % 4)))
            for j in range(lengths[u])
        ]
        histories[u] = UserHistory(u, events)
    return histories


def label_rate(histories: Mapping[int, UserHistory]) -> float:
    n = sum(len(h) for h in histories.values())
    pos = sum(e.label or 0 for h in histories.values() for e in h.events)
    return pos / n if n else math.nan
