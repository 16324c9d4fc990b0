"""Training configuration and variant-flag resolution."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .search import SearchConfig
from .sequence import DECAY_MODES

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    batch_size: int = 100
    lr_start: float = 1e-2
    lr_end: float = 1e-6
    l2: float = 4e-5
    dropout: float = 0.5
    dim: int = 64
    hidden_dim: int | None = None
    label_dim: int | None = None
    mlp_hidden: tuple[int, ...] = (128, 64)
    epochs: int = 10
    tau_start: float = 0.99
    tau_end: float = 0.01
    seed: int = 0
    eval_seed: int = 12345
    use_time_decay: bool = True
    use_recent_half: bool = True
    use_label_trick: bool = False
    use_search: bool = True
    decay_mode: str = "log"
    optimizer: str = "sgd"
    patience: int = 3
    eval_label_samples: int = 1
    init_scale: float = 0.05

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        self.validate()

    def validate(self) -> None:
        if self.batch_size <= 0 or self.epochs <= 0 or self.dim <= 0:
            raise ValueError("batch_size, epochs and dim must be positive")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 < self.tau_end < self.tau_start < 1:
            raise ValueError("need 0 < tau_end < tau_start < 1")
        if self.l2 < 0 or not 0 <= self.dropout < 1:
            raise ValueError("l2 must be >= 0 and dropout in [0, 1)")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.eval_label_samples < 1:
            raise ValueError("eval_label_samples must be >= 1")

    @property
    def d_hidden(self) -> int:
        return self.hidden_dim or self.dim

    @property
    def d_label(self) -> int:
        return self.label_dim or self.dim


def effective_search(train: TrainConfig, search: SearchConfig) -> SearchConfig:
    """Apply the variant flags to a search configuration.

    Without search the whole budget goes to the recent window and no
    similar users are retrieved; without the recent half the searched
    items fill the whole budget.
    """
    changes = {}
    if not train.use_search:
        changes.update(recent_fraction=1.0, n_similar_users=0)
    elif not train.use_recent_half:
        changes.update(recent_fraction=0.0)
    return dataclasses.replace(search, **changes) if changes else search


@dataclass(frozen=True)
class Variant:
    name: str
    flags: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)


VARIANTS = (
    Variant("STARec"),
    Variant("STARec-time", {"use_time_decay": False}),
    Variant("STARec-recent", {"use_recent_half": False}),
    Variant("STARec+label", {"use_label_trick": True}),
    Variant("GRU", {"use_search": False, "use_time_decay": False}),
    Variant("GRU+label", {"use_search": False, "use_time_decay": False, "use_label_trick": True}),
)

RATIO_SWEEP = (0.25, 0.5, 0.75)


def variant_configs(variant: Variant, train: TrainConfig, search: SearchConfig):
    return (dataclasses.replace(train, **variant.flags),
            dataclasses.replace(search, **variant.search) if variant.search else search)
