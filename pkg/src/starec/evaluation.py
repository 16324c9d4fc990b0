"""Variant ablation matrix and composition-ratio sweep."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .config import RATIO_SWEEP, VARIANTS, TrainConfig, Variant, variant_configs
from .data import DatasetSplit
from .metrics import MetricReport
from .search import SearchConfig
from .training import TrainReport, Trainer

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("variant", "AUC", "ACC", "LogLoss", "n", "best_epoch", "status")


@dataclass
class AblationRow:
    name: str
    test: MetricReport | None
    report: TrainReport | None = None
    error: str | None = None

    def cells(self) -> list[str]:
        if self.test is None:
            return [self.name, "", "", "", "", "", f"failed: {self.error}"]
        auc = "" if self.test.auc is None else f"{self.test.auc:.6f}"
        best = str(self.report.best_epoch) if self.report else ""
        return [self.name, auc, f"{self.test.acc:.6f}", f"{self.test.logloss:.6f}",
                str(self.test.n), best, "ok"]


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def __getitem__(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def to_tsv(self) -> str:
        lines = ["\t".join(TABLE_COLUMNS)] + ["\t".join(r.cells()) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv())


def ratio_variants(ratios: Iterable[float] = RATIO_SWEEP) -> list[Variant]:
    return [Variant(f"STARec@recent={r:g}", search={"recent_fraction": float(r)}) for r in ratios]


def run_variant(split: DatasetSplit, variant: Variant, train: TrainConfig, search: SearchConfig,
                threshold: float = 0.5) -> AblationRow:
    try:
        tc, sc = variant_configs(variant, train, search)
        trainer = Trainer(split.histories, tc, sc)
        report = trainer.fit(split.train, split.validation)
        return AblationRow(variant.name, trainer.evaluate(split.test, threshold), report)
    except Exception as exc:  # a failed variant leaves a marked row, not a lost table
        log.exception("variant %s failed", variant.name)
        return AblationRow(variant.name, None, None, f"{type(exc).__name__}: {exc}")


def run_ablation(split: DatasetSplit, train: TrainConfig, search: SearchConfig, *,
                 variants: Sequence[Variant] = VARIANTS, ratios: Iterable[float] = RATIO_SWEEP,
                 threshold: float = 0.5, out_dir=None, plot: bool = False) -> AblationTable:
    """Train and test every variant with a shared seed and schedule."""
    table = AblationTable()
    for variant in list(variants) + ratio_variants(ratios):
        row = run_variant(split, variant, train, search, threshold)
        log.info("%s: %s", variant.name, row.cells())
        table.rows.append(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        table.write(os.path.join(out_dir, "ablation.tsv"))
        if plot:
            plot_ablation(table, os.path.join(out_dir, "ablation.png"))
    return table


def plot_ablation(table: AblationTable, path) -> None:
    """Validation AUC per epoch for every variant, and test AUC bars for the ratio sweep."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    for row in table.rows:
        if row.report and row.report.epochs and not row.name.startswith("STARec@"):
            aucs = [e.validation.auc if e.validation else None for e in row.report.epochs]
            left.plot(range(len(aucs)), aucs, marker="o", label=row.name)
    left.set_xlabel("epoch")
    left.set_ylabel("validation AUC")
    if left.get_lines():
        left.legend(fontsize=7)
    sweep = [r for r in table.rows if r.name.startswith("STARec@") and r.test and r.test.auc is not None]
    right.bar([r.name.split("=")[1] for r in sweep], [r.test.auc for r in sweep])
    right.set_xlabel("recent fraction")
    right.set_ylabel("test AUC")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def summarize(reports: Sequence[MetricReport]) -> dict[str, float]:
    """Mean of each metric over seed replicates."""
    aucs = [r.auc for r in reports if r.auc is not None]
    return {
        "AUC": sum(aucs) / len(aucs) if aucs else float("nan"),
        "ACC": sum(r.acc for r in reports) / len(reports),
        "LogLoss": sum(r.logloss for r in reports) / len(reports),
    }


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(config, seed=seed)
