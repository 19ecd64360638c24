"""Command-line experiment driver.

Subcommands: ``gen-data``, ``pretrain``, ``adapt``, ``sweep-tau``,
``eval-retrieval`` and ``import-csv``. Every subcommand is deterministic given
its config and seed; only the run ledger and the ``wall_time`` summary field
carry wall-clock information.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .adapt import (
    EPOCH_CSV_HEADER,
    AdaptationError,
    AdaptMonitor,
    EpochRecord,
    pretrain_source,
    run_adaptation,
    train_target_supervised,
)
from .config import ConfigError, ExperimentConfig, RuntimeSettings, load_config
from .data import (
    Dataset,
    DatasetError,
    DomainTag,
    dataset_stats,
    generate_shift_splits,
    read_csv_dataset,
    read_dataset,
    write_dataset,
)
from .evaluation import EvaluationError, cross_domain_retrieval, top1_accuracy
from .model import ModelError, StreamMode, TwoStreamModel, load_checkpoint, save_checkpoint
from .numerics import NumericsError
from .observability.ledger import LedgerEvent, RunLedger, load_ledger

__all__ = [
    "RunSummary",
    "CommandContext",
    "EXIT_CODES",
    "SWEEP_CSV_HEADER",
    "build_parser",
    "configure_logging",
    "cmd_gen_data",
    "cmd_pretrain",
    "cmd_adapt",
    "cmd_sweep_tau",
    "cmd_eval_retrieval",
    "cmd_import_csv",
    "main",
]

LOGGER = logging.getLogger("cleanadapt.cli")

SOURCE_FILE = "source.cadd"
TARGET_FILE = "target.cadd"
TARGET_VAL_FILE = "target_val.cadd"
SOURCE_CHECKPOINT_FILE = "source_only.cadp"
ADAPTED_CHECKPOINT_FILE = "adapted.cadp"
STUDENT_CHECKPOINT_FILE = "student.cadp"
EPOCHS_CSV_FILE = "epochs.csv"
SUMMARY_FILE = "summary.json"
PRETRAIN_METRICS_FILE = "pretrain_metrics.json"
SWEEP_CSV_FILE = "sweep.csv"
RETRIEVAL_FILE = "retrieval.json"

SWEEP_CSV_HEADER: Tuple[str, ...] = ("tau", "mode", "source_only_acc", "adapted_acc", "gain")

# Exception family -> process exit code; first match wins.
EXIT_CODES: Tuple[Tuple[type, int], ...] = (
    (ConfigError, 2),
    (DatasetError, 3),
    (ModelError, 4),
    (AdaptationError, 5),
    (NumericsError, 5),
    (EvaluationError, 6),
    (OSError, 7),
)


@dataclass(frozen=True)
class RunSummary:
    """Outcome of one adaptation run as written to ``summary.json``."""

    mode: str
    tau: float
    seed: int
    source_only_acc: Optional[float]
    adapted_acc: Optional[float]
    gain: Optional[float]
    records_path: str
    config: Mapping[str, str]
    wall_time: float
    student_acc: Optional[float] = None
    target_supervised_acc: Optional[float] = None
    retrieval: Optional[Mapping[str, Any]] = None

    @classmethod
    def build(
        cls,
        *,
        source_only_acc: Optional[float],
        adapted_acc: Optional[float],
        **kwargs: Any,
    ) -> "RunSummary":
        gain = None
        if source_only_acc is not None and adapted_acc is not None:
            gain = adapted_acc - source_only_acc
        return cls(source_only_acc=source_only_acc, adapted_acc=adapted_acc, gain=gain, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CommandContext:
    config: ExperimentConfig
    settings: RuntimeSettings
    ledger: RunLedger

    @property
    def out_dir(self) -> Path:
        return self.config.output_dir

    def data_path(self, key: str, default_name: str) -> Path:
        explicit = self.config.get(key)
        return Path(explicit) if explicit is not None else self.out_dir / default_name

    def checkpoint_path(self) -> Path:
        explicit = self.config.get("model.checkpoint")
        return Path(explicit) if explicit is not None else self.out_dir / SOURCE_CHECKPOINT_FILE


def _write_json(path: Path, payload: Mapping[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_epoch_csv(records: Sequence[EpochRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EPOCH_CSV_HEADER)
        for record in records:
            writer.writerow(record.csv_row())
    return path


# ----------------------------------------------------------------------
# Subcommands


def cmd_gen_data(ctx: CommandContext) -> Dict[str, Path]:
    """Generate the synthetic source/target (and optional validation) files."""

    splits = generate_shift_splits(ctx.config.shift_spec())
    paths = {
        "source": write_dataset(splits.source, ctx.data_path("data.source", SOURCE_FILE)),
        "target": write_dataset(splits.target, ctx.data_path("data.target", TARGET_FILE)),
    }
    if splits.target_val is not None:
        paths["target_val"] = write_dataset(
            splits.target_val, ctx.data_path("data.target_val", TARGET_VAL_FILE)
        )
    for dataset in (splits.source, splits.target, splits.target_val):
        if dataset is not None:
            print(dataset_stats(dataset))
    ctx.ledger.log(
        LedgerEvent.DATA_GENERATED,
        {"paths": {name: str(path) for name, path in paths.items()}, "seed": ctx.config.seed},
    )
    return paths


def cmd_pretrain(ctx: CommandContext) -> Path:
    """Train the source-only model and write its checkpoint."""

    source = read_dataset(ctx.data_path("data.source", SOURCE_FILE), domain=DomainTag.SOURCE)
    cfg = ctx.config.pretrain_config()

    def on_epoch(epoch: int, lr: float, loss: float) -> None:
        ctx.ledger.log(LedgerEvent.PRETRAIN_EPOCH, {"epoch": epoch, "lr": lr, "loss": loss})

    model = pretrain_source(source, cfg, cfg.rng(), on_epoch=on_epoch)
    checkpoint = save_checkpoint(model, ctx.checkpoint_path())
    source_acc = top1_accuracy(model, source)
    metrics = {"checkpoint": str(checkpoint), "seed": cfg.seed, "epochs": cfg.epochs, "source_acc": source_acc}
    _write_json(ctx.out_dir / PRETRAIN_METRICS_FILE, metrics)
    ctx.ledger.log(LedgerEvent.PRETRAIN_COMPLETED, metrics)
    print(f"source_acc={source_acc:.4f} checkpoint={checkpoint}")
    return checkpoint


@dataclass(frozen=True)
class _AdaptInputs:
    source_model: TwoStreamModel
    target: Dataset
    target_val: Optional[Dataset]

    def monitor(self) -> Optional[AdaptMonitor]:
        if not self.target.has_labels and self.target_val is None:
            return None
        return AdaptMonitor(true_labels=self.target.labels, val_set=self.target_val)


def _load_adapt_inputs(ctx: CommandContext) -> _AdaptInputs:
    source_model = load_checkpoint(ctx.checkpoint_path())
    target = read_dataset(ctx.data_path("data.target", TARGET_FILE), domain=DomainTag.TARGET)
    val_path = ctx.data_path("data.target_val", TARGET_VAL_FILE)
    target_val = None
    if ctx.config.get("data.target_val") is not None or val_path.exists():
        target_val = read_dataset(val_path, domain=DomainTag.TARGET)
    for name, dataset in (("target", target), ("target_val", target_val)):
        if dataset is None:
            continue
        expected = (source_model.appearance.input_dim, source_model.motion.input_dim, source_model.num_classes)
        found = (dataset.dim_a, dataset.dim_m, dataset.num_classes)
        if expected != found:
            raise ModelError(f"checkpoint expects (d_a, d_m, |C|)={expected}, {name} data has {found}")
    return _AdaptInputs(source_model=source_model, target=target, target_val=target_val)


def _adapt_once(
    ctx: CommandContext,
    inputs: _AdaptInputs,
    tau: Optional[float] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Any, Optional[float], Optional[float], Optional[float]]:
    cfg = ctx.config.adapt_config(tau=tau)
    monitor = inputs.monitor()
    view = inputs.target.unlabeled()
    outcome = run_adaptation(inputs.source_model, view, cfg, cfg.rng(), monitor, on_epoch)
    source_only_acc = adapted_acc = student_acc = None
    if monitor is not None:
        source_only_acc = monitor.accuracy(inputs.source_model, view, cfg.stream_mode)
        adapted_acc = monitor.accuracy(outcome.model, view, cfg.stream_mode)
        if outcome.student is not None:
            student_acc = monitor.accuracy(outcome.student, view, cfg.stream_mode)
    return outcome, source_only_acc, adapted_acc, student_acc


def _retrieval_report(
    ctx: CommandContext,
    inputs: _AdaptInputs,
    adapted: TwoStreamModel,
    stream_mode: StreamMode,
) -> Optional[Dict[str, Any]]:
    # Evaluation only: the source gallery is read after adaptation has finished.
    gallery_path = ctx.data_path("data.source", SOURCE_FILE)
    if not gallery_path.exists():
        LOGGER.warning("Skipping retrieval: source gallery %s is not available", gallery_path)
        return None
    gallery = read_dataset(gallery_path, domain=DomainTag.SOURCE)
    return {
        "source_only": cross_domain_retrieval(
            inputs.source_model, inputs.target, gallery, stream_mode=stream_mode
        ).to_dict(),
        "adapted": cross_domain_retrieval(adapted, inputs.target, gallery, stream_mode=stream_mode).to_dict(),
    }


def cmd_adapt(ctx: CommandContext) -> RunSummary:
    """Adapt the source-only checkpoint to the target data; write checkpoints, CSV and summary."""

    started = time.perf_counter()
    inputs = _load_adapt_inputs(ctx)
    cfg = ctx.config.adapt_config()

    def on_epoch(record: EpochRecord) -> None:
        ctx.ledger.log(LedgerEvent.ADAPT_EPOCH, {"mode": cfg.mode.value, **record.to_payload()})

    outcome, source_only_acc, adapted_acc, student_acc = _adapt_once(ctx, inputs, on_epoch=on_epoch)

    target_supervised_acc = None
    if ctx.config.get("eval.target_supervised"):
        monitor = inputs.monitor()
        if monitor is None:
            raise EvaluationError("target-supervised reference needs labeled target data")
        pretrain_cfg = ctx.config.pretrain_config()
        reference = train_target_supervised(inputs.target, pretrain_cfg, pretrain_cfg.rng())
        target_supervised_acc = monitor.accuracy(reference, inputs.target.unlabeled(), cfg.stream_mode)

    retrieval = None
    if ctx.config.get("eval.retrieval"):
        retrieval = _retrieval_report(ctx, inputs, outcome.model, cfg.stream_mode)

    save_checkpoint(outcome.model, ctx.out_dir / ADAPTED_CHECKPOINT_FILE)
    if outcome.student is not None:
        save_checkpoint(outcome.student, ctx.out_dir / STUDENT_CHECKPOINT_FILE)
    records_path = write_epoch_csv(outcome.records, ctx.out_dir / EPOCHS_CSV_FILE)
    summary = RunSummary.build(
        source_only_acc=source_only_acc,
        adapted_acc=adapted_acc,
        mode=cfg.mode.value,
        tau=cfg.tau,
        seed=cfg.seed,
        records_path=str(records_path),
        config=ctx.config.echo(),
        wall_time=time.perf_counter() - started,
        student_acc=student_acc,
        target_supervised_acc=target_supervised_acc,
        retrieval=retrieval,
    )
    _write_json(ctx.out_dir / SUMMARY_FILE, summary.to_dict())
    ctx.ledger.log(LedgerEvent.ADAPT_COMPLETED, summary.to_dict())
    if summary.gain is not None:
        print(
            f"mode={summary.mode} source_only_acc={summary.source_only_acc:.4f} "
            f"adapted_acc={summary.adapted_acc:.4f} gain={summary.gain:+.4f}"
        )
    else:
        print(f"mode={summary.mode} adapted checkpoint={ctx.out_dir / ADAPTED_CHECKPOINT_FILE}")
    return summary


def cmd_sweep_tau(ctx: CommandContext, taus: Optional[Sequence[float]] = None) -> List[Tuple[str, ...]]:
    """Final target accuracy per keep-rate; rows keep the input order of ``taus``."""

    tau_list = tuple(ctx.config.get("sweep.taus") if taus is None else taus)
    if not tau_list:
        raise ConfigError("sweep.taus must list at least one keep-rate")
    inputs = _load_adapt_inputs(ctx)
    if inputs.monitor() is None:
        raise EvaluationError("a keep-rate sweep needs labeled target data")
    mode = ctx.config.adapt_config().mode.value

    def run_one(tau: float) -> Tuple[str, ...]:
        _, source_only_acc, adapted_acc, _ = _adapt_once(ctx, inputs, tau=tau)
        assert source_only_acc is not None and adapted_acc is not None
        row = (repr(float(tau)), mode, repr(source_only_acc), repr(adapted_acc), repr(adapted_acc - source_only_acc))
        ctx.ledger.log(LedgerEvent.SWEEP_ROW, dict(zip(SWEEP_CSV_HEADER, row)))
        LOGGER.info("tau=%s adapted_acc=%s", row[0], row[3])
        return row

    workers = min(ctx.settings.threads, len(tau_list))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(run_one, tau_list))

    path = ctx.out_dir / SWEEP_CSV_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SWEEP_CSV_HEADER)
        writer.writerows(rows)
    for row in rows:
        print(",".join(row))
    return rows


def cmd_eval_retrieval(ctx: CommandContext) -> List[Dict[str, Any]]:
    """Recall@k of target queries against the source gallery, one report per checkpoint."""

    ctx.config.require("retrieval.checkpoint")
    queries = read_dataset(ctx.data_path("data.target", TARGET_FILE), domain=DomainTag.TARGET)
    gallery = read_dataset(ctx.data_path("data.source", SOURCE_FILE), domain=DomainTag.SOURCE)
    stream_mode = ctx.config.get("adapt.stream_mode")
    reports = []
    for checkpoint in ctx.config.get("retrieval.checkpoint"):
        model = load_checkpoint(checkpoint)
        report = cross_domain_retrieval(model, queries, gallery, stream_mode=stream_mode)
        reports.append({"checkpoint": str(checkpoint), **report.to_dict()})
        recall = ", ".join(f"R@{k}={value:.4f}" for k, value in sorted(report.recall_at.items()))
        print(f"{checkpoint}: {recall}")
    _write_json(ctx.out_dir / RETRIEVAL_FILE, {"reports": reports})
    ctx.ledger.log(LedgerEvent.RETRIEVAL_COMPLETED, {"reports": reports})
    return reports


def cmd_import_csv(
    csv_path: Path, output: Path, num_classes: Optional[int], domain: DomainTag
) -> Path:
    dataset = read_csv_dataset(csv_path, num_classes=num_classes, domain=domain)
    written = write_dataset(dataset, output)
    print(dataset_stats(dataset))
    return written


# ----------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cleanadapt", description="Source-free domain adaptation experiments"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-data", "Generate the synthetic source/target datasets"),
        ("pretrain", "Train the source-only model"),
        ("adapt", "Adapt the source-only model to the target data"),
        ("sweep-tau", "Final accuracy for several keep-rates"),
        ("eval-retrieval", "Cross-domain retrieval recall for checkpoints"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, required=True, help="Path to the key=value config")
        sub.add_argument("--out", type=Path, default=None, help="Output directory (overrides output.dir)")
        sub.add_argument("--seed", type=int, default=None, help="Seed (overrides the config seed)")
        if name == "sweep-tau":
            sub.add_argument(
                "--taus", default=None, help="Comma-separated keep-rates (overrides sweep.taus)"
            )

    importer = commands.add_parser("import-csv", help="Convert a feature CSV to a binary dataset")
    importer.add_argument("--input", type=Path, required=True, help="CSV with id,label,a_*,m_* columns")
    importer.add_argument("--output", type=Path, required=True, help="Destination dataset file")
    importer.add_argument("--num-classes", type=int, default=None, help="Class count (required when unlabeled)")
    importer.add_argument(
        "--domain", choices=[tag.value for tag in DomainTag], default=DomainTag.TARGET.value
    )
    return parser


def configure_logging(level: int | str = logging.INFO) -> None:
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_taus(raw: Optional[str]) -> Optional[Tuple[float, ...]]:
    if raw is None:
        return None
    try:
        return tuple(float(item) for item in raw.split(",") if item.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid --taus value: {raw!r}") from exc


def _dispatch(args: argparse.Namespace, settings: RuntimeSettings) -> None:
    if args.command == "import-csv":
        cmd_import_csv(args.input, args.output, args.num_classes, DomainTag(args.domain))
        return
    config = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    ledger = load_ledger(settings.ledger_path or config.output_dir / "ledger.jsonl")
    ctx = CommandContext(config=config, settings=settings, ledger=ledger)
    LOGGER.info("Starting %s run %s (seed=%d)", args.command, ledger.run_id, config.seed)
    if args.command == "gen-data":
        cmd_gen_data(ctx)
    elif args.command == "pretrain":
        cmd_pretrain(ctx)
    elif args.command == "adapt":
        cmd_adapt(ctx)
    elif args.command == "sweep-tau":
        cmd_sweep_tau(ctx, _parse_taus(args.taus))
    else:
        cmd_eval_retrieval(ctx)


def exit_code_for(error: BaseException) -> Optional[int]:
    for family, code in EXIT_CODES:
        if isinstance(error, family):
            return code
    return None


def main(argv: Optional[Iterable[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(None if argv is None else list(argv))
    try:
        settings = RuntimeSettings.from_env()
        configure_logging(settings.log_level)
        _dispatch(args, settings)
    except Exception as error:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(error)
        if code is None:
            raise
        LOGGER.debug("command failed", exc_info=True)
        print(f"error: {error}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
