"""Command-line entry point: synth, ingest, train, evaluate, ablate, index, serve.

Exit status: 0 success, 2 bad configuration, 3 data error, 4 numeric
divergence, 1 anything else. Relative paths resolve against the run root
given by ``$STAREC_RUN_ROOT`` (default: the working directory).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Sequence

from .config import TrainConfig
from .data import DataError, SyntheticSpec, generate_synthetic, load_interactions, temporal_split, \
    write_interactions
from .evaluation import run_ablation
from .search import SearchConfig
from .serving import IndexStore, QueryMap, ServingConfig, build_index, load_index, save_index, serve_lines
from .training import DivergenceError, Trainer, load_checkpoint, save_checkpoint

RUN_ROOT_ENV = "STAREC_RUN_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

log = logging.getLogger("starec")


class ConfigError(ValueError):
    pass


@dataclass
class DataOptions:
    path: str | None = None
    recent_window: int = 0
    strict: bool = False
    min_length: int = 4


@dataclass
class MetricOptions:
    acc_threshold: float = 0.5


@dataclass
class ServingOptions:
    relevance_epsilon: float = 0.0
    fallback_window: int = 10
    query_map: str | None = None
    imputed: bool = True


SECTIONS = {
    "train": TrainConfig,
    "search": SearchConfig,
    "data": DataOptions,
    "synth": SyntheticSpec,
    "metrics": MetricOptions,
    "serving": ServingOptions,
}

_TUPLE_FIELDS = {"mlp_hidden", "period_range", "events_per_user"}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    data: DataOptions = field(default_factory=DataOptions)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    serving: ServingOptions = field(default_factory=ServingOptions)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of sections")
        sections = {}
        for name, value in raw.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config key {name!r}")
            kind = SECTIONS[name]
            known = {f.name for f in dataclasses.fields(kind)}
            for key in value:
                if key not in known:
                    raise ConfigError(f"unknown config key {name}.{key}")
            kwargs = {k: _coerce(k, v) for k, v in value.items()}
            try:
                sections[name] = kind(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value in section {name!r}: {exc}") from exc
        return cls(**sections)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        raw = self.to_dict()
        for item in overrides:
            key, sep, text = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            if section not in raw or name not in raw[section]:
                raise ConfigError(f"unknown config key {key}")
            try:
                raw[section][name] = json.loads(text)
            except json.JSONDecodeError:
                raw[section][name] = text
        return RunConfig.from_dict(raw)


def _coerce(key: str, value):
    if key in _TUPLE_FIELDS and isinstance(value, list):
        return tuple(value)
    if key == "period_per_category" and isinstance(value, dict):
        return {int(c): int(p) for c, p in value.items()}
    return value


def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = RunConfig.from_dict(raw)
    return cfg.with_overrides(overrides) if overrides else cfg


# ---------------------------------------------------------------------------


def run_root() -> str:
    return os.environ.get(RUN_ROOT_ENV, os.getcwd())


def resolve(path: str | None) -> str | None:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(run_root(), path)


def _prepare_out(args, cfg: RunConfig) -> str:
    """Create the run directory, echo the resolved config and the
    invocation into it, and start its log file."""
    out = resolve(args.out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    invocation = {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_")}
    with open(os.path.join(out, "invocation.json"), "w", encoding="utf-8") as fh:
        json.dump(invocation, fh, indent=2)
        fh.write("\n")
    handler = logging.FileHandler(os.path.join(out, "log.txt"), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    args._log_handler = handler
    return out


def _load_histories(cfg: RunConfig, data_path: str | None):
    path = resolve(data_path or cfg.data.path)
    if path is None:
        raise ConfigError("data.path is required (config key data.path or --data)")
    try:
        histories, report = load_interactions(path, recent_window=cfg.data.recent_window,
                                              strict=cfg.data.strict)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return histories, report, path


def _load_split(cfg: RunConfig, data_path: str | None):
    histories, report, path = _load_histories(cfg, data_path)
    for line, msg in report.rejected:
        log.warning("rejected line %d: %s", line, msg)
    split = temporal_split(histories, min_length=cfg.data.min_length)
    if not split.train:
        raise DataError(f"no user in {path} has at least {cfg.data.min_length} events")
    return split, report


def _write_metrics(path: str, rows: list[tuple[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("split\tAUC\tACC\tLogLoss\tn\tthreshold\n")
        for name, m in rows:
            auc = "" if m.auc is None else f"{m.auc:.6f}"
            fh.write(f"{name}\t{auc}\t{m.acc:.6f}\t{m.logloss:.6f}\t{m.n}\t{m.threshold:g}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = dataclasses.replace(cfg.synth, seed=args.seed) if args.seed is not None else cfg.synth
    cfg = dataclasses.replace(cfg, synth=spec)
    out = _prepare_out(args, cfg)
    write_interactions(os.path.join(out, "interactions.tsv"), generate_synthetic(spec))
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    split, report = _load_split(cfg, args.data)
    write_interactions(os.path.join(out, "interactions.tsv"), split.histories)
    summary = {"rows": report.n_rows, "rejected": report.n_rejected, "users": len(split.histories),
               "excluded_short": split.excluded, "train": len(split.train),
               "validation": len(split.validation), "test": len(split.test),
               "rejected_lines": [{"line": ln, "error": msg} for ln, msg in report.rejected]}
    with open(os.path.join(out, "ingest_report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    split, _ = _load_split(cfg, args.data)
    trainer = Trainer(split.histories, cfg.train, cfg.search)
    try:
        report = trainer.fit(split.train, split.validation)
    except DivergenceError:
        save_checkpoint(os.path.join(out, "last_good.npz"), trainer.model, trainer.tau)
        raise
    save_checkpoint(os.path.join(out, "checkpoint.npz"), trainer.model, trainer.tau)
    with open(os.path.join(out, "train_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write("epoch\tlr\ttau\ttrain_loss\tval_AUC\tval_ACC\tval_LogLoss\n")
        for e in report.epochs:
            v = e.validation
            auc = "" if v is None or v.auc is None else f"{v.auc:.6f}"
            acc = "" if v is None else f"{v.acc:.6f}"
            ll = "" if v is None else f"{v.logloss:.6f}"
            fh.write(f"{e.epoch}\t{e.lr:.6g}\t{e.tau:.6g}\t{e.train_loss:.6f}\t{auc}\t{acc}\t{ll}\n")
    log.info("best epoch %d", report.best_epoch)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    split, _ = _load_split(cfg, args.data)
    model, tau = load_checkpoint(resolve(args.checkpoint))
    trainer = Trainer(split.histories, model.config, model.search, model=model)
    trainer.set_temperature(tau)
    t = cfg.metrics.acc_threshold
    rows = [("validation", trainer.evaluate(split.validation, t)), ("test", trainer.evaluate(split.test, t))]
    _write_metrics(os.path.join(out, "metrics.tsv"), rows)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    split, _ = _load_split(cfg, args.data)
    run_ablation(split, cfg.train, cfg.search, threshold=cfg.metrics.acc_threshold,
                 out_dir=out, plot=args.plot)
    return 0


def cmd_index(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    histories, _, _ = _load_histories(cfg, args.data)
    model, tau = load_checkpoint(resolve(args.checkpoint))
    scfg = ServingConfig(relevance_epsilon=cfg.serving.relevance_epsilon, imputed=cfg.serving.imputed)
    index = build_index(histories, model, tau, scfg, version=args.version)
    save_index(os.path.join(out, "index.npz"), index)
    return 0


def cmd_serve(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(resolve(args.checkpoint))
    store = IndexStore(load_index(resolve(args.index)))
    qpath = resolve(args.queries or cfg.serving.query_map)
    qmap = (QueryMap.load(qpath, cfg.serving.fallback_window) if qpath
            else QueryMap({}, cfg.serving.fallback_window))
    serve_lines(sys.stdin, sys.stdout, store, model, qmap)
    return 0


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "index": cmd_index, "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, *, out: bool = True, data: bool = False, ckpt: bool = False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        if out:
            p.add_argument("--out", required=True, help="run directory")
        if data:
            p.add_argument("--data", help="interaction TSV (overrides data.path)")
        if ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        return p

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    add("ingest", "load, validate and split an interaction log", data=True)
    add("train", "train a model", data=True)
    add("evaluate", "score a checkpoint on validation and test", data=True, ckpt=True)
    p = add("ablate", "run the variant matrix and ratio sweep", data=True)
    p.add_argument("--plot", action="store_true", help="also write ablation.png")
    p = add("index", "build the serving index", data=True, ckpt=True)
    p.add_argument("--version", type=int, default=1)
    p = add("serve", "answer requests on stdin", out=False, ckpt=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", help="TSV of query<TAB>category_id")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(resolve(args.config) if args.config else None, args.set)
        if getattr(args, "data", None):
            # record the dataset actually used so the echoed config replays the run
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, path=args.data))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        # the message already carries the line number when one is known
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        handler = getattr(args, "_log_handler", None)
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
