"""Search-based time-aware click-through prediction for sequential recommendation."""
from .config import TrainConfig, effective_search
from .data import (DataError, DatasetSplit, Interaction, SyntheticSpec, Task, UserHistory,
                   generate_synthetic, load_interactions, temporal_split, write_interactions)
from .metrics import MetricReport, compute_metrics
from .model import STARecModel, Vocabulary
from .search import SearchConfig
from .training import DivergenceError, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
