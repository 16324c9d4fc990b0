"""Mini-batch training with temperature annealing, early stopping and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import DataError, DatasetSplit, Task, UserHistory
from .metrics import MetricReport, compute_metrics
from .model import STARecModel, Vocabulary
from .search import RetrievedContext, SearchConfig, SearchEmbeddings, UserSearchIndex, build_context

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when the loss or the parameters stop being finite.

    ``state`` holds the parameters of the last completed epoch.
    """

    def __init__(self, message: str, epoch: int, batch: int, state: dict[str, np.ndarray]):
        super().__init__(message)
        self.epoch, self.batch, self.state = epoch, batch, state


def anneal_temperature(epoch: int, n_epochs: int, start: float, end: float) -> float:
    """Geometric schedule from ``start`` (first epoch) to ``end`` (last epoch)."""
    if n_epochs <= 1:
        return start
    return start * (end / start) ** (min(epoch, n_epochs - 1) / (n_epochs - 1))


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return anneal_temperature(epoch, config.epochs, config.lr_start, config.lr_end)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    tau: float
    train_loss: float  # mean per example
    validation: MetricReport | None
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    best_tau: float = 0.99
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def _score(report: MetricReport | None) -> float:
    if report is None:
        return -math.inf
    return report.auc if report.auc is not None else -report.logloss


class Trainer:
    """Holds the model, the population index and the retrieval state."""

    def __init__(self, histories: Mapping[int, UserHistory], config: TrainConfig,
                 search: SearchConfig, model: STARecModel | None = None,
                 vocab: Vocabulary | None = None):
        self.histories = histories
        self.config = config
        self.model = model or STARecModel(vocab or Vocabulary.from_histories(histories), config, search)
        self.search = self.model.search
        self.index = UserSearchIndex(histories) if self.search.n_similar_users > 0 else None
        self.optimizer = ad.Adam() if config.optimizer == "adam" else None
        self.tau = config.tau_start
        self._user_vecs: dict[int, np.ndarray] | None = None

    # ------------------------------------------------------------------

    def set_temperature(self, tau: float) -> None:
        self.tau = tau
        self.search = dataclasses.replace(self.model.search, tau=tau, iota=tau)

    def embeddings(self, refresh_users: bool = False) -> SearchEmbeddings:
        if self._user_vecs is None or refresh_users:
            self._user_vecs = (self.model.user_vectors(self.histories)
                               if self.search.mode != "hard" and self.index is not None else {})
        return self.model.search_embeddings(users=self._user_vecs)

    def contexts(self, tasks: Sequence[Task], emb: SearchEmbeddings | None = None) -> list[RetrievedContext]:
        emb = emb or self.embeddings()
        out = []
        for task in tasks:
            h = self.histories[task.user_id]
            out.append(build_context(h, h.events[task.position], self.search, emb,
                                     index=self.index, limit=task.position))
        return out

    def labels(self, tasks: Sequence[Task]) -> np.ndarray:
        return np.array([self.histories[t.user_id].events[t.position].label for t in tasks], dtype=np.float64)

    def predict(self, tasks: Sequence[Task], batch_size: int = 500) -> np.ndarray:
        emb = self.embeddings()
        rng = np.random.default_rng(self.config.eval_seed)
        out = [self.model.predict_proba(self.contexts(tasks[i:i + batch_size], emb), rng)
               for i in range(0, len(tasks), batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def evaluate(self, tasks: Sequence[Task], threshold: float = 0.5) -> MetricReport:
        return compute_metrics(self.labels(tasks), self.predict(tasks), threshold)

    # ------------------------------------------------------------------

    def train_step(self, tasks: Sequence[Task], lr: float, rng: np.random.Generator,
                   emb: SearchEmbeddings) -> float:
        contexts = self.contexts(tasks, emb)
        with ad.Tape() as tape:
            loss = self.model.loss(contexts, self.labels(tasks), rng, training=True)
        value = float(loss.value)
        if not math.isfinite(value):
            return value
        ad.backward_gradients(tape, loss)
        params = list(self.model.params.values())
        if self.optimizer is None:
            ad.sgd_update(params, lr, self.config.l2)
        else:
            self.optimizer.step(params, lr, self.config.l2)
        return value

    def fit(self, train: Sequence[Task], validation: Sequence[Task] = (),
            callback: Callable[[EpochRecord], None] | None = None) -> TrainReport:
        cfg = self.config
        for name, tasks in (("train", train), ("validation", validation)):
            missing = int(np.isnan(self.labels(tasks)).sum()) if tasks else 0
            if missing:
                raise DataError(f"{missing} {name} targets have no observed label")
        rng = np.random.default_rng(cfg.seed + 1)
        report = TrainReport(best_tau=self.tau)
        best_state = self.model.params.state_dict()
        last_good = best_state
        stale = 0
        train = list(train)
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr = learning_rate(cfg, epoch)
            self.set_temperature(anneal_temperature(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end))
            self.embeddings(refresh_users=True)
            order = rng.permutation(len(train))
            total = 0.0
            for b, start in enumerate(range(0, len(train), cfg.batch_size)):
                batch = [train[i] for i in order[start:start + cfg.batch_size]]
                try:
                    value = self.train_step(batch, lr, rng, self.embeddings())
                except FloatingPointError as exc:
                    log.error("%s", exc)
                    value = math.nan
                if not math.isfinite(value) or not self._params_finite():
                    self.model.params.load_state_dict(last_good)
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b, last_good)
                total += value
            last_good = self.model.params.state_dict()
            val = self.evaluate(validation) if validation else None
            rec = EpochRecord(epoch, lr, self.tau, total / max(len(train), 1), val,
                              time.perf_counter() - started)
            report.epochs.append(rec)
            log.info("epoch %d loss %.4f val %s", epoch, rec.train_loss, val)
            if callback:
                callback(rec)
            score = _score(val)
            if score > report.best_score or not validation:
                report.best_score, report.best_epoch, report.best_tau = score, epoch, self.tau
                best_state = last_good
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    report.stopped_early = True
                    break
        self.model.params.load_state_dict(best_state)
        self.set_temperature(report.best_tau)
        return report

    def _params_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.model.params.values())


def train(split: DatasetSplit, config: TrainConfig, search: SearchConfig,
          callback: Callable[[EpochRecord], None] | None = None) -> tuple[Trainer, TrainReport]:
    """Fit on ``split.train`` with early stopping on ``split.validation``."""
    trainer = Trainer(split.histories, config, search)
    report = trainer.fit(split.train, split.validation, callback)
    return trainer, report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _jsonable(obj):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(obj).items()}


def save_checkpoint(path, model: STARecModel, tau: float | None = None) -> None:
    """Write parameters and configuration to ``path`` atomically."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "train": _jsonable(model.config),
        "search": _jsonable(model.search),
        "vocab": {"item": list(model.vocab.item_fields), "user": list(model.vocab.user_fields)},
        "tau": model.search.tau if tau is None else tau,
    }
    arrays = {f"p:{k}": v for k, v in model.params.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[STARecModel, float]:
    """Rebuild the model stored at ``path``; returns it with its temperature."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
    train_cfg = TrainConfig(**meta["train"])
    search = SearchConfig(**meta["search"])
    vocab = Vocabulary(tuple(meta["vocab"]["item"]), tuple(meta["vocab"]["user"]))
    model = STARecModel(vocab, train_cfg, search)
    model.params.load_state_dict(state)
    return model, float(meta["tau"])
