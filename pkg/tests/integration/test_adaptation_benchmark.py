"""
Adaptation Benchmark
Version: 1.0.0
Date: 2026-10-18
Tests: five-seed acceptance runs on configs/benchmark.conf

Opt-in: ``pytest -m benchmark`` (or ``nox -s benchmark``).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from statistics import mean
from typing import Dict, List

import pytest

from cleanadapt.adapt import AdaptMode, AdaptMonitor, EpochRecord, pretrain_source, run_adaptation
from cleanadapt.config import load_config
from cleanadapt.data import generate_shift_splits
from cleanadapt.evaluation import cross_domain_retrieval, top1_accuracy

pytestmark = [pytest.mark.benchmark, pytest.mark.integration, pytest.mark.timeout(3600)]

SEEDS = (0, 1, 2, 3, 4)
SWEEP_TAUS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class SeedRun:
    source_only: float
    accuracy: Dict[str, float]
    tau_accuracy: Dict[float, float]
    records: List[EpochRecord]
    recall_source_only: float
    recall_adapted: float


def _run_seed(config_path: Path, seed: int) -> SeedRun:
    config = load_config(config_path).with_overrides(seed=seed)
    splits = generate_shift_splits(config.shift_spec())
    pretrain_cfg = config.pretrain_config()
    source_model = pretrain_source(splits.source, pretrain_cfg, pretrain_cfg.rng())
    target = splits.target
    monitor = AdaptMonitor(true_labels=target.labels)
    base = config.adapt_config()

    def adapt(mode: AdaptMode, tau: float):
        cfg = replace(base, mode=mode, tau=tau)
        return run_adaptation(source_model, target.unlabeled(), cfg, cfg.rng(), monitor)

    clean = adapt(AdaptMode.CLEANADAPT, base.tau)
    accuracy = {
        "cleanadapt": top1_accuracy(clean.model, target),
        "cleanadapt_ts": top1_accuracy(adapt(AdaptMode.CLEANADAPT_TS, base.tau).model, target),
        "highloss": top1_accuracy(adapt(AdaptMode.HIGHLOSS_ABLATION, base.tau).model, target),
    }
    tau_accuracy = {
        tau: accuracy["cleanadapt"] if tau == base.tau else top1_accuracy(adapt(AdaptMode.CLEANADAPT, tau).model, target)
        for tau in SWEEP_TAUS
    }
    return SeedRun(
        source_only=top1_accuracy(source_model, target),
        accuracy=accuracy,
        tau_accuracy=tau_accuracy,
        records=clean.records,
        recall_source_only=cross_domain_retrieval(source_model, target, splits.source).recall_at[1],
        recall_adapted=cross_domain_retrieval(clean.model, target, splits.source).recall_at[1],
    )


@pytest.fixture(scope="module")
def runs(project_root: Path) -> List[SeedRun]:
    config_path = project_root / "configs" / "benchmark.conf"
    return [_run_seed(config_path, seed) for seed in SEEDS]


def _gains(runs: List[SeedRun], key: str) -> List[float]:
    return [run.accuracy[key] - run.source_only for run in runs]


def test_cleanadapt_improves_on_source_only(runs: List[SeedRun]) -> None:
    gains = _gains(runs, "cleanadapt")

    assert mean(gains) >= 0.05
    assert min(gains) >= 0.02


def test_teacher_student_is_not_worse(runs: List[SeedRun]) -> None:
    assert mean(_gains(runs, "cleanadapt_ts")) >= mean(_gains(runs, "cleanadapt")) - 0.01


def test_partial_keep_rate_beats_keeping_everything(runs: List[SeedRun]) -> None:
    margins = [max(run.tau_accuracy[tau] for tau in SWEEP_TAUS if tau < 1.0) - run.tau_accuracy[1.0] for run in runs]

    assert mean(margins) >= 0.01


def test_high_loss_selection_hurts(runs: List[SeedRun]) -> None:
    clean = mean(run.accuracy["cleanadapt"] for run in runs)
    high = mean(run.accuracy["highloss"] for run in runs)

    assert high <= clean - 0.03


def test_noisy_pseudo_labels_carry_larger_losses(runs: List[SeedRun]) -> None:
    for run in runs:
        for record in run.records[1:]:
            if record.mean_loss_noisy_true is None:
                continue
            assert record.mean_loss_noisy_true > record.mean_loss_clean_true


def test_small_loss_selection_is_cleaner_than_average(runs: List[SeedRun]) -> None:
    cells = [record.selection_precision > record.pseudo_label_accuracy for run in runs for record in run.records]

    assert sum(cells) >= 0.95 * len(cells)


def test_adaptation_does_not_hurt_retrieval(runs: List[SeedRun]) -> None:
    assert mean(run.recall_adapted for run in runs) >= mean(run.recall_source_only for run in runs)
