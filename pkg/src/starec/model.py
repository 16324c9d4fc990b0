"""The assembled recommender: encoders, three time-aware networks, fusion head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .config import TrainConfig, effective_search
from .data import UserHistory
from .encoder import FieldEmbeddings
from .fusion import Aggregator, MLPHead
from .search import RetrievedContext, SearchConfig, SearchEmbeddings
from .sequence import LabelEmbedding, TimeAwareWeights, encode_sequence, label_weights, \
    sequence_decay, target_label_weights


def user_feature_row(history: UserHistory) -> tuple[int, ...]:
    """Categorical fields of a user; the user id when no features are given."""
    return tuple(history.user_features) or (history.user_id,)


@dataclass(frozen=True)
class Vocabulary:
    """Per-field vocabulary sizes. Unseen values map to each field's OOV row."""

    item_fields: tuple[int, ...]
    user_fields: tuple[int, ...]

    @classmethod
    def from_histories(cls, histories: Mapping[int, UserHistory]) -> "Vocabulary":
        item_max: list[int] = []
        user_max: list[int] = []
        for h in histories.values():
            if len(h):
                f = h.arrays.item_features
                cols = f.max(axis=0)
                item_max = [max(a, int(b)) for a, b in zip(item_max, cols)] + \
                    [int(b) for b in cols[len(item_max):]]
            row = user_feature_row(h)
            user_max = [max(a, b) for a, b in zip(user_max, row)] + list(row[len(user_max):])
        if not item_max:
            raise ValueError("no interactions to build a vocabulary from")
        return cls(tuple(m + 1 for m in item_max), tuple(m + 1 for m in user_max))


class SeqBatch(NamedTuple):
    features: np.ndarray  # (N, L, P) int
    labels: np.ndarray    # (N, L, 3) label-row weights
    decay: np.ndarray     # (N, L)
    mask: np.ndarray      # (N, L) bool


class Batch(NamedTuple):
    recent: SeqBatch | None
    searched: SeqBatch | None
    similar: SeqBatch | None
    slot_mask: np.ndarray  # (B, M) float, 1 where a similar user was found


class STARecModel:
    """Parameters and forward pass for a batch of retrieved contexts.

    Each personal sequence (recent window and searched items) ends with
    the target item; a half with zero budget is dropped. Similar users
    contribute one sequence each, zeroed in empty slots.
    """

    def __init__(self, vocab: Vocabulary, config: TrainConfig, search: SearchConfig):
        self.vocab = vocab
        self.config = config
        self.search = effective_search(config, search)
        rng = np.random.default_rng(config.seed)
        s = config.init_scale
        d, dh, dy = config.dim, config.d_hidden, config.d_label
        self.params = ad.ParameterStore()
        self.items = FieldEmbeddings(self.params, "item", vocab.item_fields, d, rng, s)
        self.users = FieldEmbeddings(self.params, "user", vocab.user_fields, d, rng, s)
        self.label_emb = LabelEmbedding(self.params, dy, rng, scale=s)
        self.streams = [name for name, budget in (("recent", self.search.recent_budget),
                                                  ("searched", self.search.searched_budget))
                        if budget > 0]
        self.n_similar = self.search.n_similar_users
        self.nets: dict[str, TimeAwareWeights] = {}
        self.aggs: dict[str, Aggregator] = {}
        for name in self.streams + (["similar"] if self.n_similar else []):
            self.nets[name] = TimeAwareWeights(self.params, name, d + dy, dh, rng, s)
            self.aggs[name] = Aggregator(self.params, f"agg_{name}", dh, dh, rng, s)
        width = (len(self.streams) + self.n_similar) * dh
        self.head = MLPHead(self.params, "mlp", width, config.mlp_hidden, rng, s)

    # ------------------------------------------------------------------
    # retrieval embeddings
    # ------------------------------------------------------------------

    def search_embeddings(self, histories: Mapping[int, UserHistory] | None = None,
                          users: Mapping[int, np.ndarray] | None = None) -> SearchEmbeddings:
        """Snapshot of the category table (item field 0) and encoded user vectors."""
        category = self.items.tables[0].value.copy()
        if users is None:
            users = self.user_vectors(histories or {})
        return SearchEmbeddings(category, users)

    def user_vectors(self, histories: Mapping[int, UserHistory]) -> dict[int, np.ndarray]:
        if not histories:
            return {}
        ids = list(histories)
        width = len(self.vocab.user_fields)
        rows = np.zeros((len(ids), width), dtype=np.int64)
        for i, u in enumerate(ids):
            r = user_feature_row(histories[u])[:width]
            rows[i, :len(r)] = r
        vecs = self.users.encode_numpy(rows)
        return {u: vecs[i] for i, u in enumerate(ids)}

    # ------------------------------------------------------------------
    # collation
    # ------------------------------------------------------------------

    def _personal(self, contexts: Sequence[RetrievedContext], stream: str,
                  target_w: np.ndarray) -> SeqBatch:
        budget = self.search.recent_budget if stream == "recent" else self.search.searched_budget
        n_fields = len(self.vocab.item_fields)
        B, L = len(contexts), budget + 1
        feats = np.zeros((B, L, n_fields), dtype=np.int64)
        labels = np.full((B, L), np.nan)
        ts = np.zeros((B, L))
        mask = np.zeros((B, L), dtype=bool)
        for b, ctx in enumerate(contexts):
            idx = ctx.recent_idx if stream == "recent" else ctx.searched_idx
            k = len(idx)
            if k:
                a = ctx.history.arrays
                w = min(n_fields, a.item_features.shape[1])
                feats[b, budget - k:budget, :w] = a.item_features[idx, :w]
                labels[b, budget - k:budget] = a.labels[idx]
                ts[b, budget - k:budget] = a.timestamps[idx]
                mask[b, budget - k:budget] = True
            tf = ctx.target.item_features[:n_fields]
            feats[b, budget, :len(tf)] = tf
            ts[b, budget] = ctx.target.timestamp
            mask[b, budget] = True
        lw = label_weights(labels, self.config.use_label_trick)
        lw[:, budget] = target_w
        decay = sequence_decay(ts, mask, self.config.decay_mode, self.config.use_time_decay)
        return SeqBatch(feats, lw, decay, mask)

    def _similar(self, contexts: Sequence[RetrievedContext]) -> tuple[SeqBatch, np.ndarray]:
        M, L = self.n_similar, self.search.seq_len
        n_fields = len(self.vocab.item_fields)
        B = len(contexts)
        feats = np.zeros((B, M, L, n_fields), dtype=np.int64)
        labels = np.full((B, M, L), np.nan)
        ts = np.zeros((B, M, L))
        mask = np.zeros((B, M, L), dtype=bool)
        slots = np.zeros((B, M))
        for b, ctx in enumerate(contexts):
            for m, su in enumerate(ctx.similar[:M]):
                a = ctx.similar_histories[su.user_id].arrays
                idx = su.positions[-L:]
                k = len(idx)
                if k == 0:
                    continue
                w = min(n_fields, a.item_features.shape[1])
                feats[b, m, L - k:, :w] = a.item_features[idx, :w]
                labels[b, m, L - k:] = a.labels[idx]
                ts[b, m, L - k:] = a.timestamps[idx]
                mask[b, m, L - k:] = True
                slots[b, m] = 1.0
        feats = feats.reshape(B * M, L, n_fields)
        mask = mask.reshape(B * M, L)
        ts = ts.reshape(B * M, L)
        lw = label_weights(labels.reshape(B * M, L), self.config.use_label_trick)
        decay = sequence_decay(ts, mask, self.config.decay_mode, self.config.use_time_decay)
        return SeqBatch(feats, lw, decay, mask), slots

    def collate(self, contexts: Sequence[RetrievedContext], rng: np.random.Generator | None,
                target_label: int | None = None) -> Batch:
        """Pad and stack contexts. ``target_label`` fixes the target's label row
        (label-trick models only) instead of drawing it from ``rng``."""
        if not contexts:
            raise ValueError("empty batch")
        if target_label is not None and self.config.use_label_trick:
            target_w = np.zeros((len(contexts), 3))
            target_w[:, target_label] = 1.0
        else:
            target_w = target_label_weights(len(contexts), self.config.use_label_trick, rng)
        recent = self._personal(contexts, "recent", target_w) if "recent" in self.streams else None
        searched = self._personal(contexts, "searched", target_w) if "searched" in self.streams else None
        similar, slots = (self._similar(contexts) if self.n_similar
                          else (None, np.zeros((len(contexts), 0))))
        return Batch(recent, searched, similar, slots)

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _encode(self, stream: str, seq: SeqBatch) -> ad.Tensor:
        x = ad.concat([self.items(seq.features), self.label_emb(seq.labels)], axis=-1)
        x = ad.mul(x, seq.mask[:, :, None].astype(np.float64))
        hidden = encode_sequence(self.nets[stream], x, seq.decay, seq.mask, self.config.use_time_decay)
        return self.aggs[stream](hidden, seq.mask)

    def forward(self, batch: Batch, *, training: bool = False,
                rng: np.random.Generator | None = None) -> ad.Tensor:
        """Logits of shape (B,)."""
        parts = []
        for stream in self.streams:
            parts.append(self._encode(stream, getattr(batch, stream)))
        if batch.similar is not None:
            B, M = batch.slot_mask.shape
            e = self._encode("similar", batch.similar)
            e = ad.mul(e, batch.slot_mask.reshape(B * M, 1))
            parts.append(ad.reshape(e, (B, M * self.config.d_hidden)))
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        return self.head(x, dropout=self.config.dropout, training=training, rng=rng)

    def loss(self, contexts: Sequence[RetrievedContext], labels: np.ndarray,
             rng: np.random.Generator | None, training: bool = True) -> ad.Tensor:
        """Summed log loss over the batch."""
        batch = self.collate(contexts, rng)
        return ad.log_loss_from_logits(self.forward(batch, training=training, rng=rng), labels)

    def predict_pair(self, context: RetrievedContext, rng: np.random.Generator | None = None,
                     target_label: str = "sample") -> float:
        """Click probability of a single retrieved context."""
        return float(self.predict_proba([context], rng, target_label=target_label)[0])

    def predict_proba(self, contexts: Sequence[RetrievedContext],
                      rng: np.random.Generator | None = None, n_samples: int | None = None,
                      target_label: str = "sample") -> np.ndarray:
        """Click probabilities.

        With the label trick the random target label is averaged over
        ``n_samples`` draws, or over both label values exactly when
        ``target_label="average"`` (batch-independent, used in serving).
        """
        if not contexts:
            return np.empty(0)

        def prob(batch: Batch) -> np.ndarray:
            logits = self.forward(batch, training=False).value
            return expit(np.clip(logits, -ad.LOGIT_CLAMP, ad.LOGIT_CLAMP))

        if self.config.use_label_trick and target_label == "average":
            return 0.5 * (prob(self.collate(contexts, None, 0)) + prob(self.collate(contexts, None, 1)))
        if rng is None:
            rng = np.random.default_rng(self.config.eval_seed)
        n = n_samples or (self.config.eval_label_samples if self.config.use_label_trick else 1)
        total = np.zeros(len(contexts))
        for _ in range(n):
            total += prob(self.collate(contexts, rng))
        return total / n
