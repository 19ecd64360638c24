"""Unit tests for accuracy, selection quality, loss separation and retrieval."""
from __future__ import annotations

import math

import numpy as np
import pytest

from cleanadapt.adapt import PseudoLabelStore, SelectionResult, generate_pseudo_labels, select_clean
from cleanadapt.data import Dataset, DomainTag
from cleanadapt.evaluation import (
    EvaluationError,
    LossSeparation,
    RetrievalReport,
    accuracy_against,
    cosine_similarity,
    cross_domain_retrieval,
    loss_separation,
    selection_quality,
    stream_loss_separation,
    top1_accuracy,
)
from cleanadapt.model import Stream, StreamMode, init_model
from cleanadapt.numerics import RngState


def _zero_model(dim_a: int = 2, dim_m: int = 2, classes: int = 3):
    model = init_model(dim_a, dim_m, classes, RngState(0).stream("init"), hidden_dim=3)
    model.assign({name: np.zeros_like(value) for name, value in model.parameters().items()})
    return model


def test_uniform_model_scores_perfectly_on_class_zero() -> None:
    dataset = Dataset(features_a=np.ones((4, 2)), features_m=np.ones((4, 2)), num_classes=3, labels=[0, 0, 0, 0])

    assert top1_accuracy(_zero_model(), dataset) == 1.0
    assert top1_accuracy(_zero_model(), dataset.with_labels([1, 0, 2, 0])) == 0.5


def test_top1_accuracy_requires_labels() -> None:
    dataset = Dataset(features_a=np.ones((2, 2)), features_m=np.ones((2, 2)), num_classes=3)

    with pytest.raises(EvaluationError, match="labeled"):
        top1_accuracy(_zero_model(), dataset)


def test_accuracy_against_random_predictions_is_near_chance(make_one_hot_model) -> None:
    """Binomial check: random labels against fixed one-hot predictions over 5 classes."""

    rng = np.random.default_rng(17)
    n, classes = 5000, 5
    hot = rng.integers(0, classes, size=n)
    truth = rng.integers(0, classes, size=n)
    samples = Dataset(features_a=np.eye(classes)[hot], features_m=np.zeros((n, 2)), num_classes=classes)

    accuracy = accuracy_against(make_one_hot_model(classes), samples, truth)

    sigma = math.sqrt(0.2 * 0.8 / n)
    assert abs(accuracy - 0.2) <= 4 * sigma


def test_accuracy_against_checks_label_shape() -> None:
    dataset = Dataset(features_a=np.ones((3, 2)), features_m=np.ones((3, 2)), num_classes=3)

    with pytest.raises(EvaluationError):
        accuracy_against(_zero_model(), dataset, [0, 1])


def _store_with_truth():
    store = PseudoLabelStore(
        pseudo_labels=np.array([0, 0, 0, 1, 1, 1]),
        losses=np.array([0.1, 0.2, 0.9, 0.3, 0.4, 1.5]),
        num_classes=2,
    )
    truth = np.array([0, 1, 0, 1, 1, 0])
    return store, truth


def test_selection_quality_against_known_truth() -> None:
    store, truth = _store_with_truth()
    selection = select_clean(store, 0.67)

    quality = selection_quality(selection, store, truth)

    # kept: ids 0, 1 (class 0) and 3, 4 (class 1); clean overall: 0, 2, 3, 4
    assert quality.precision == pytest.approx(3 / 4)
    assert quality.recall == pytest.approx(3 / 4)
    assert quality.clean_rate == pytest.approx(4 / 6)


def test_selection_quality_with_no_clean_samples() -> None:
    store = PseudoLabelStore(pseudo_labels=np.array([0, 0]), losses=np.array([0.1, 0.2]), num_classes=2)

    quality = selection_quality(select_clean(store, 0.5), store, [1, 1])

    assert quality.precision == 0.0
    assert quality.recall == 1.0
    assert quality.clean_rate == 0.0


def test_selection_quality_rejects_wrong_label_count() -> None:
    store, _ = _store_with_truth()

    with pytest.raises(EvaluationError):
        selection_quality(SelectionResult({0: (0,)}, {}, 0.5), store, [0, 1])


def test_loss_separation_from_recorded_losses() -> None:
    store, truth = _store_with_truth()

    separation = loss_separation(None, None, store, truth)

    assert separation == LossSeparation(
        mean_clean=pytest.approx((0.1 + 0.9 + 0.3 + 0.4) / 4),
        mean_noisy=pytest.approx((0.2 + 1.5) / 2),
        num_clean=4,
        num_noisy=2,
    )


def test_loss_separation_empty_partition_is_none() -> None:
    store, truth = _store_with_truth()

    separation = loss_separation(None, None, store, store.pseudo_labels)

    assert separation.mean_noisy is None
    assert separation.num_noisy == 0
    assert truth.size == separation.num_clean


def test_loss_separation_recomputes_from_a_model(source_model, small_splits) -> None:
    target = small_splits.target.unlabeled()
    store = generate_pseudo_labels(source_model, target)

    recomputed = loss_separation(source_model, target, store, small_splits.target.labels)
    recorded = loss_separation(None, None, store, small_splits.target.labels)

    assert recomputed.mean_clean == pytest.approx(recorded.mean_clean, rel=1e-12)
    assert recomputed.num_noisy == recorded.num_noisy


def test_stream_loss_separation_covers_both_modalities(source_model, small_splits) -> None:
    target = small_splits.target.unlabeled()
    store = generate_pseudo_labels(source_model, target)

    per_stream = stream_loss_separation(source_model, target, store, small_splits.target.labels)

    assert set(per_stream) == {Stream.APPEARANCE, Stream.MOTION}
    assert all(value.num_clean + value.num_noisy == len(target) for value in per_stream.values())


def test_cosine_similarity_with_zero_vectors() -> None:
    queries = np.array([[1.0, 0.0], [0.0, 0.0]])
    gallery = np.array([[2.0, 0.0], [0.0, -3.0], [0.0, 0.0]])

    sims = cosine_similarity(queries, gallery)

    np.testing.assert_allclose(sims[0], [1.0, 0.0, -1.0])
    np.testing.assert_allclose(sims[1], [-1.0, -1.0, -1.0])


def _retrieval_sets():
    """Queries and gallery whose one-hot appearance features encode the class."""

    gallery_labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2])
    query_labels = np.array([2, 0, 1])
    gallery = Dataset(
        features_a=np.eye(3)[gallery_labels],
        features_m=np.zeros((12, 2)),
        num_classes=3,
        labels=gallery_labels,
        domain=DomainTag.SOURCE,
    )
    queries = Dataset(
        features_a=np.eye(3)[query_labels],
        features_m=np.zeros((3, 2)),
        num_classes=3,
        labels=query_labels,
    )
    return queries, gallery


def test_retrieval_recall_is_perfect_for_class_aligned_features(make_one_hot_model) -> None:
    queries, gallery = _retrieval_sets()

    report = cross_domain_retrieval(
        make_one_hot_model(3), queries, gallery, stream_mode=StreamMode.APPEARANCE_ONLY
    )

    assert report.recall_at == {1: 1.0, 5: 1.0, 10: 1.0}
    assert report.num_queries == 3
    assert report.to_dict() == {"num_queries": 3, "recall_at": {"1": 1.0, "5": 1.0, "10": 1.0}}


def test_retrieval_ties_rank_by_gallery_id(make_one_hot_model) -> None:
    """A zero motion stream gives every gallery item similarity -1; rank falls back to id order."""

    queries, gallery = _retrieval_sets()

    report = cross_domain_retrieval(
        make_one_hot_model(3), queries, gallery, ks=(1, 2, 3), stream_mode=StreamMode.MOTION_ONLY
    )

    # every query sees gallery ids 0, 1, 2 (labels 0, 1, 2) first
    assert report.recall_at == {1: pytest.approx(1 / 3), 2: pytest.approx(2 / 3), 3: 1.0}


def test_retrieval_recall_is_monotone_in_k(source_model, small_splits) -> None:
    report = cross_domain_retrieval(source_model, small_splits.target, small_splits.source)

    assert isinstance(report, RetrievalReport)
    assert report.recall_at[1] <= report.recall_at[5] <= report.recall_at[10]
    assert all(0.0 <= value <= 1.0 for value in report.recall_at.values())


def test_retrieval_input_errors(make_one_hot_model) -> None:
    queries, gallery = _retrieval_sets()
    model = make_one_hot_model(3)

    with pytest.raises(EvaluationError, match="exceeds gallery"):
        cross_domain_retrieval(model, queries, gallery, ks=(1, 20))
    with pytest.raises(EvaluationError, match="labels"):
        cross_domain_retrieval(model, queries.with_labels(None), gallery)
    with pytest.raises(EvaluationError, match="positive"):
        cross_domain_retrieval(model, queries, gallery, ks=(0,))
