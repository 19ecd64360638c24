"""
Pytest Configuration
Version: 1.0.0
Date: 2026-10-18
Owner: Platform.Engineering

Shared fixtures and configuration for all test modules.
Ensures repository root is in sys.path for cleanadapt package imports.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

# Add repository root to Python path for cleanadapt package imports
repo_root = Path(__file__).resolve().parent.parent
if str(repo_root) not in sys.path:
    sys.path.insert(0, str(repo_root))

from cleanadapt.adapt import AdaptConfig, pretrain_source  # noqa: E402
from cleanadapt.data import ShiftSpec, ShiftSplits, diagonal_translation, generate_shift_splits  # noqa: E402
from cleanadapt.model import (  # noqa: E402
    StreamClassifier,
    TwoStreamModel,
    checkpoint_bytes,
    model_from_bytes,
)
from cleanadapt.numerics import LrSchedule, RngState  # noqa: E402


@pytest.fixture(scope="session")
def project_root() -> Path:
    """Return repository root for locating fixtures and assets."""
    return repo_root


@pytest.fixture(scope="session")
def small_spec() -> ShiftSpec:
    """Three-class shift small enough for sub-second training runs."""
    return ShiftSpec(
        num_classes=3,
        source_per_class=30,
        target_per_class=30,
        val_per_class=10,
        latent_dim=4,
        dim_a=5,
        dim_m=6,
        rotation=0.4,
        translation=diagonal_translation(0.5, 4),
        noise_std=0.6,
        view_noise_std=0.1,
        seed=11,
    )


@pytest.fixture(scope="session")
def small_splits(small_spec: ShiftSpec) -> ShiftSplits:
    return generate_shift_splits(small_spec)


@pytest.fixture
def fast_cfg() -> AdaptConfig:
    """Short schedule shared by training and adaptation tests."""
    return AdaptConfig(
        tau=0.6,
        epsilon=0.9,
        epochs=3,
        batch_size=8,
        lr_schedule=LrSchedule(0.05),
        momentum=0.9,
        seed=5,
        hidden_dim=8,
    )


@pytest.fixture(scope="session")
def _pretrained_blob(small_splits: ShiftSplits) -> bytes:
    cfg = AdaptConfig(epochs=8, batch_size=8, lr_schedule=LrSchedule(0.05), seed=3, hidden_dim=8)
    return checkpoint_bytes(pretrain_source(small_splits.source, cfg, RngState(3)))


@pytest.fixture
def source_model(_pretrained_blob: bytes) -> TwoStreamModel:
    """Fresh copy of the session's source-only model; safe to mutate."""
    return model_from_bytes(_pretrained_blob)


def _one_hot_stream(num_classes: int) -> StreamClassifier:
    """Stream whose logits are ``tanh(x)`` for ``x`` of length ``num_classes``."""
    eye = np.eye(num_classes)
    return StreamClassifier(
        w_hidden=eye.copy(),
        b_hidden=np.zeros(num_classes),
        w_out=eye.copy(),
        b_out=np.zeros(num_classes),
    )


def _zero_stream(input_dim: int, hidden_dim: int, num_classes: int) -> StreamClassifier:
    return StreamClassifier(
        w_hidden=np.zeros((input_dim, hidden_dim)),
        b_hidden=np.zeros(hidden_dim),
        w_out=np.zeros((hidden_dim, num_classes)),
        b_out=np.zeros(num_classes),
    )


@pytest.fixture
def make_one_hot_model() -> Callable[[int, int], TwoStreamModel]:
    """Factory: appearance stream maps one-hot inputs to their index; motion adds zero logits."""

    def build(num_classes: int, motion_dim: int = 2) -> TwoStreamModel:
        return TwoStreamModel(
            appearance=_one_hot_stream(num_classes),
            motion=_zero_stream(motion_dim, 3, num_classes),
        )

    return build
