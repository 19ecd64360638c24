"""Unit tests for datasets, the shift generator, augmentations and file formats."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from cleanadapt.data import (
    DATASET_MAGIC,
    AugmentationSpec,
    Dataset,
    DatasetError,
    DomainTag,
    ShiftSpec,
    StrongTransform,
    dataset_bytes,
    dataset_from_bytes,
    dataset_stats,
    diagonal_translation,
    generate_shift_pair,
    generate_shift_splits,
    mirror,
    read_csv_dataset,
    read_dataset,
    select_transforms,
    strong_augment,
    weak_augment,
    weak_augment_pair,
    write_dataset,
)
from cleanadapt.evaluation import top1_accuracy
from cleanadapt.numerics import RngState


def test_generator_is_a_pure_function_of_the_spec(small_spec: ShiftSpec) -> None:
    source, target = generate_shift_pair(small_spec)
    again_source, again_target = generate_shift_pair(small_spec)

    np.testing.assert_array_equal(source.features_a, again_source.features_a)
    np.testing.assert_array_equal(target.features_m, again_target.features_m)
    np.testing.assert_array_equal(target.labels, again_target.labels)
    assert dataset_bytes(source) == dataset_bytes(again_source)

    reseeded, _ = generate_shift_pair(replace(small_spec, seed=small_spec.seed + 1))
    assert not np.array_equal(reseeded.features_a, source.features_a)


def test_generator_sizes_and_balanced_labels(small_spec: ShiftSpec) -> None:
    splits = generate_shift_splits(small_spec)

    assert len(splits.source) == 3 * 30
    assert len(splits.target) == 3 * 30
    assert splits.target_val is not None and len(splits.target_val) == 3 * 10
    assert Counter(splits.source.labels.tolist()) == {0: 30, 1: 30, 2: 30}
    assert splits.source.domain is DomainTag.SOURCE
    assert splits.target.domain is DomainTag.TARGET
    assert (splits.target.dim_a, splits.target.dim_m) == (5, 6)


def test_validation_split_is_optional_and_independent(small_spec: ShiftSpec) -> None:
    without = generate_shift_splits(replace(small_spec, val_per_class=0))
    with_val = generate_shift_splits(small_spec)

    assert without.target_val is None
    np.testing.assert_array_equal(without.target.features_a, with_val.target.features_a)
    assert not np.array_equal(with_val.target_val.features_a, with_val.target.features_a[:30])


def test_half_turn_swaps_two_opposite_classes() -> None:
    """With no noise, rotating by pi maps each class mean onto the other one."""

    spec = ShiftSpec(
        num_classes=2,
        source_per_class=5,
        target_per_class=5,
        latent_dim=3,
        dim_a=4,
        dim_m=4,
        rotation=math.pi,
        noise_std=0.0,
        view_noise_std=0.0,
        seed=3,
        mirror_probability=0.0,
    )
    source, target = generate_shift_pair(spec)

    for label in (0, 1):
        source_row = source.features_a[source.labels == 1 - label][0]
        target_row = target.features_a[target.labels == label][0]
        np.testing.assert_allclose(target_row, source_row, atol=1e-9)


def test_zero_shift_keeps_the_class_geometry() -> None:
    spec = ShiftSpec(
        num_classes=4,
        source_per_class=3,
        target_per_class=3,
        noise_std=0.0,
        view_noise_std=0.0,
        mirror_probability=0.0,
    )
    source, target = generate_shift_pair(spec)

    for label in range(4):
        np.testing.assert_allclose(
            target.features_m[target.labels == label][0], source.features_m[source.labels == label][0]
        )


def test_mirrored_generator_keeps_some_samples_unmirrored(small_spec: ShiftSpec) -> None:
    plain = generate_shift_splits(replace(small_spec, mirror_probability=0.0)).target
    mixed = generate_shift_splits(small_spec).target

    same = np.all(np.isclose(plain.features_a, mixed.features_a), axis=1)
    flipped = np.all(np.isclose(mirror(plain.features_a), mixed.features_a), axis=1)

    np.testing.assert_array_equal(plain.labels, mixed.labels)
    assert np.all(same | flipped)
    assert 0 < np.count_nonzero(flipped) < len(mixed)


def test_flipped_views_classify_like_plain_ones(source_model, small_spec: ShiftSpec) -> None:
    """Mirroring every target sample leaves the source model's accuracy unchanged."""

    target = generate_shift_splits(replace(small_spec, target_per_class=1000)).target
    flipped = Dataset(
        features_a=mirror(target.features_a),
        features_m=mirror(target.features_m),
        num_classes=target.num_classes,
        labels=target.labels,
    )

    assert top1_accuracy(source_model, flipped) == pytest.approx(top1_accuracy(source_model, target), abs=0.05)


@pytest.mark.parametrize(
    "overrides",
    [
        {"num_classes": 1},
        {"source_per_class": 0},
        {"latent_dim": 1},
        {"noise_std": -0.1},
        {"translation": (1.0, 2.0)},
        {"rotation": math.inf},
        {"val_per_class": -1},
        {"mirror_probability": 1.5},
    ],
)
def test_invalid_shift_spec_is_rejected(overrides: dict) -> None:
    arguments = {"num_classes": 3, "source_per_class": 2, "target_per_class": 2, "latent_dim": 4}
    arguments.update(overrides)

    with pytest.raises(DatasetError) as excinfo:
        ShiftSpec(**arguments)

    assert excinfo.value.code == "invalid_spec"


def test_diagonal_translation_has_requested_norm() -> None:
    vector = diagonal_translation(1.0, 8)

    assert len(vector) == 8
    assert math.sqrt(sum(value * value for value in vector)) == pytest.approx(1.0)


def test_dataset_is_immutable_and_copies_inputs() -> None:
    features = np.ones((2, 3))
    dataset = Dataset(features_a=features, features_m=np.zeros((2, 1)), num_classes=2, labels=[0, 1])

    features[0, 0] = 5.0

    assert dataset.features_a[0, 0] == 1.0
    with pytest.raises(ValueError):
        dataset.features_a[0, 0] = 2.0


def test_dataset_validation_codes() -> None:
    with pytest.raises(DatasetError) as mismatch:
        Dataset(features_a=np.ones((2, 3)), features_m=np.ones((3, 3)), num_classes=2)
    with pytest.raises(DatasetError) as bad_label:
        Dataset(features_a=np.ones((2, 3)), features_m=np.ones((2, 3)), num_classes=2, labels=[0, 2])

    assert mismatch.value.code == "dim_mismatch"
    assert bad_label.value.code == "bad_label"
    with pytest.raises(DatasetError) as non_finite:
        Dataset(features_a=np.array([[0.0, np.nan]]), features_m=np.ones((1, 2)), num_classes=2)
    assert non_finite.value.code == "non_finite"


def test_unlabeled_view_carries_no_ground_truth(small_splits) -> None:
    view = small_splits.target.unlabeled()

    assert not hasattr(view, "labels")
    assert len(view) == len(small_splits.target)
    np.testing.assert_array_equal(view.features_a, small_splits.target.features_a)
    with pytest.raises(DatasetError) as excinfo:
        small_splits.target.with_labels(None).require_labels()
    assert excinfo.value.code == "missing_labels"


def test_binary_round_trip(tmp_path: Path, small_splits) -> None:
    for dataset in (small_splits.source, small_splits.target.with_labels(None)):
        path = write_dataset(dataset, tmp_path / f"{dataset.domain.value}.cadd")
        restored = read_dataset(path, domain=dataset.domain)

        assert path.read_bytes().startswith(DATASET_MAGIC)
        np.testing.assert_array_equal(restored.features_a, dataset.features_a)
        np.testing.assert_array_equal(restored.features_m, dataset.features_m)
        assert restored.has_labels == dataset.has_labels
        if dataset.has_labels:
            np.testing.assert_array_equal(restored.labels, dataset.labels)
        assert dataset_bytes(restored) == path.read_bytes()


def test_binary_decoding_error_codes(small_splits) -> None:
    payload = dataset_bytes(small_splits.source)

    cases = {
        "bad_magic": b"NOPE1" + payload[5:],
        "truncated": payload[:-3],
        "dim_mismatch": payload + b"\x00" * 4,
    }
    for code, broken in cases.items():
        with pytest.raises(DatasetError) as excinfo:
            dataset_from_bytes(broken)
        assert excinfo.value.code == code
    with pytest.raises(DatasetError) as header:
        dataset_from_bytes(payload[:10])
    assert header.value.code == "truncated"


def test_dataset_stats_line(small_splits) -> None:
    assert dataset_stats(small_splits.source) == "source: n=90 classes=3 d_a=5 d_m=6 labels=yes"


# ----------------------------------------------------------------------
# Augmentation


def test_weak_augment_flip_and_identity() -> None:
    x = np.arange(1.0, 7.0)
    rng = np.random.default_rng(0)

    always = AugmentationSpec(weak_noise_std=0.0, flip_probability=1.0)
    never = AugmentationSpec(weak_noise_std=0.0, flip_probability=0.0)

    np.testing.assert_array_equal(weak_augment(x, always, rng), [-1.0, -2.0, -3.0, 4.0, 5.0, 6.0])
    np.testing.assert_array_equal(weak_augment(x, never, rng), x)


def test_weak_augment_pair_flips_both_views_together() -> None:
    spec = AugmentationSpec(weak_noise_std=0.0, flip_probability=0.5)
    for seed in range(20):
        x_a, x_m = weak_augment_pair(np.ones(4), np.ones(2), spec, np.random.default_rng(seed))
        assert (x_a[0] < 0) == (x_m[0] < 0)


def test_weak_augment_is_reproducible_per_stream() -> None:
    spec = AugmentationSpec()
    rng = RngState(7)
    x = np.linspace(-1.0, 1.0, 5)

    first = weak_augment(x, spec, rng.stream("augment", 0, 2, 11))
    second = weak_augment(x, spec, rng.stream("augment", 0, 2, 11))

    np.testing.assert_array_equal(first, second)


def test_strong_augment_without_transforms_is_identity() -> None:
    spec = AugmentationSpec(transforms_per_strong=0)
    x = np.array([0.5, -0.25, 3.0])

    np.testing.assert_array_equal(strong_augment(x, spec, np.random.default_rng(1)), x)


def test_coordinate_dropout_zeroes_ceil_fraction() -> None:
    """With only dropout enabled, exactly ceil(0.3 * 10) = 3 coordinates vanish."""

    spec = AugmentationSpec(dropout_fraction=0.3, transforms_per_strong=3, strong_noise_std=0.0, scale_range=(1.0, 1.0))
    out = strong_augment(np.ones(10), spec, np.random.default_rng(4))

    assert int(np.count_nonzero(out == 0.0)) == 3
    assert set(out.tolist()) <= {0.0, 1.0}


def test_select_transforms_subsets_are_uniform() -> None:
    spec = AugmentationSpec(transforms_per_strong=2)
    rng = np.random.default_rng(99)

    counts = Counter(select_transforms(spec, rng) for _ in range(3000))

    assert set(counts) == {
        (StrongTransform.GAUSSIAN_NOISE, StrongTransform.COORDINATE_DROPOUT),
        (StrongTransform.GAUSSIAN_NOISE, StrongTransform.GLOBAL_SCALE),
        (StrongTransform.COORDINATE_DROPOUT, StrongTransform.GLOBAL_SCALE),
    }
    _, p_value = stats.chisquare(list(counts.values()))
    assert p_value > 1e-4


def test_invalid_augmentation_spec() -> None:
    with pytest.raises(DatasetError):
        AugmentationSpec(scale_range=(1.2, 0.8))
    with pytest.raises(DatasetError):
        AugmentationSpec(transforms_per_strong=4)
    with pytest.raises(DatasetError):
        AugmentationSpec(flip_probability=1.5)


# ----------------------------------------------------------------------
# CSV import


def _write_csv(path: Path, rows: list[str], header: str = "id,label,a_0,a_1,m_0") -> Path:
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def test_read_csv_dataset_labeled_and_reordered(tmp_path: Path) -> None:
    path = _write_csv(tmp_path / "feats.csv", ["1,0,1.0,2.0,3.0", "0,1,-1.0,-2.0,-3.0"])

    dataset = read_csv_dataset(path, num_classes=2, domain=DomainTag.SOURCE)

    assert len(dataset) == 2 and (dataset.dim_a, dataset.dim_m) == (2, 1)
    np.testing.assert_array_equal(dataset.labels, [1, 0])
    np.testing.assert_array_equal(dataset.features_a[0], [-1.0, -2.0])
    assert dataset.domain is DomainTag.SOURCE


def test_read_csv_dataset_unlabeled_needs_class_count(tmp_path: Path) -> None:
    path = _write_csv(tmp_path / "feats.csv", ["0,-1,1.0,2.0,3.0", "1,-1,0.0,0.0,1.0"])

    assert not read_csv_dataset(path, num_classes=3).has_labels
    with pytest.raises(DatasetError, match="num_classes"):
        read_csv_dataset(path)


@pytest.mark.parametrize(
    "header, rows",
    [
        ("label,id,a_0,a_1,m_0", ["0,0,1,2,3"]),
        ("id,label,a_0,a_1,m_0", ["0,0,1,2,3", "0,1,1,2,3"]),
        ("id,label,a_0,a_1,m_0", ["0,0,1,2,3", "2,1,1,2,3"]),
        ("id,label,a_0,a_1,m_0", ["0,0,1,2,3", "1,-1,1,2,3"]),
        ("id,label,a_0,a_1,m_0", ["0,0,1,two,3"]),
        ("id,label,a_0,a_1,m_0", ["0,0,1,2"]),
    ],
)
def test_read_csv_dataset_rejects_malformed_files(tmp_path: Path, header: str, rows: list[str]) -> None:
    path = _write_csv(tmp_path / "bad.csv", rows, header=header)

    with pytest.raises(DatasetError) as excinfo:
        read_csv_dataset(path, num_classes=2)

    assert excinfo.value.code == "bad_csv"


def test_read_csv_dataset_rejects_negative_class_labels(tmp_path: Path) -> None:
    path = _write_csv(tmp_path / "bad.csv", ["0,-5,1,2,3", "1,-5,1,2,3"])

    with pytest.raises(DatasetError) as excinfo:
        read_csv_dataset(path, num_classes=2)

    assert excinfo.value.code == "bad_label"
