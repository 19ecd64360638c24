"""Metrics and diagnostics: accuracy, selection quality, loss separation, retrieval.

Every function here is read-only with respect to models and datasets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .data import Dataset, TargetView
from .model import Stream, StreamMode, TwoStreamModel, forward_stream, predict_proba
from .numerics import cross_entropy_batch, stable_argmax

if TYPE_CHECKING:
    from .adapt import PseudoLabelStore, SelectionResult

__all__ = [
    "EvaluationError",
    "SelectionQuality",
    "LossSeparation",
    "RetrievalReport",
    "DEFAULT_KS",
    "predict_labels",
    "accuracy_against",
    "top1_accuracy",
    "selection_quality",
    "loss_separation",
    "stream_loss_separation",
    "cosine_similarity",
    "cross_domain_retrieval",
]

DEFAULT_KS: Tuple[int, ...] = (1, 5, 10)


class EvaluationError(ValueError):
    """Raised when an evaluation cannot be carried out on the given inputs."""


@dataclass(frozen=True)
class SelectionQuality:
    """Purity of a selection measured against hidden ground truth."""

    precision: float
    recall: float
    clean_rate: float


@dataclass(frozen=True)
class LossSeparation:
    """Mean CE of truly-clean vs truly-noisy pseudo-labeled samples.

    A mean is ``None`` when its partition is empty.
    """

    mean_clean: Optional[float]
    mean_noisy: Optional[float]
    num_clean: int
    num_noisy: int


@dataclass(frozen=True)
class RetrievalReport:
    recall_at: Mapping[int, float]
    num_queries: int

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_queries": self.num_queries,
            "recall_at": {str(k): value for k, value in sorted(self.recall_at.items())},
        }


def predict_labels(
    model: TwoStreamModel,
    features_a: npt.ArrayLike,
    features_m: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> npt.NDArray[np.int64]:
    return stable_argmax(predict_proba(model, features_a, features_m, stream_mode))


def accuracy_against(
    model: TwoStreamModel,
    samples: Dataset | TargetView,
    labels: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> float:
    truth = np.asarray(labels, dtype=np.int64)
    if truth.shape != (len(samples),):
        raise EvaluationError(f"expected {len(samples)} labels, got shape {truth.shape}")
    if truth.size == 0:
        raise EvaluationError("cannot measure accuracy on an empty dataset")
    predicted = predict_labels(model, samples.features_a, samples.features_m, stream_mode)
    return float(np.mean(predicted == truth))


def top1_accuracy(
    model: TwoStreamModel,
    dataset: Dataset,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> float:
    """Fraction of samples whose predicted class equals the label."""

    if dataset.labels is None:
        raise EvaluationError("top-1 accuracy needs a labeled dataset")
    return accuracy_against(model, dataset, dataset.labels, stream_mode)


def _truth(store: "PseudoLabelStore", true_labels: npt.ArrayLike) -> npt.NDArray[np.int64]:
    truth = np.asarray(true_labels, dtype=np.int64)
    if truth.shape != store.pseudo_labels.shape:
        raise EvaluationError(
            f"expected {store.pseudo_labels.shape[0]} ground-truth labels, got shape {truth.shape}"
        )
    return truth


def selection_quality(
    selection: "SelectionResult",
    store: "PseudoLabelStore",
    true_labels: npt.ArrayLike,
) -> SelectionQuality:
    clean = store.pseudo_labels == _truth(store, true_labels)
    selected = np.zeros(clean.shape, dtype=bool)
    selected[selection.selected_ids()] = True
    hits = int(np.count_nonzero(selected & clean))
    num_selected = int(np.count_nonzero(selected))
    num_clean = int(np.count_nonzero(clean))
    return SelectionQuality(
        precision=hits / num_selected if num_selected else 0.0,
        # no truly-clean samples: recall is vacuously complete
        recall=hits / num_clean if num_clean else 1.0,
        clean_rate=float(np.mean(clean)) if clean.size else 0.0,
    )


def _partition_means(
    losses: npt.NDArray[np.float64], clean: npt.NDArray[np.bool_]
) -> LossSeparation:
    num_clean = int(np.count_nonzero(clean))
    num_noisy = int(clean.size - num_clean)
    return LossSeparation(
        mean_clean=float(np.mean(losses[clean])) if num_clean else None,
        mean_noisy=float(np.mean(losses[~clean])) if num_noisy else None,
        num_clean=num_clean,
        num_noisy=num_noisy,
    )


def loss_separation(
    model: Optional[TwoStreamModel],
    target: Optional[Dataset | TargetView],
    store: "PseudoLabelStore",
    true_labels: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> LossSeparation:
    """Mean CE against the pseudo-labels, split by whether the pseudo-label is correct.

    With ``model`` and ``target`` the losses are recomputed from the model's
    current prediction; otherwise the losses recorded in ``store`` are used.
    """

    clean = store.pseudo_labels == _truth(store, true_labels)
    if model is None or target is None:
        losses = store.losses
    else:
        probs = predict_proba(model, target.features_a, target.features_m, stream_mode)
        losses = cross_entropy_batch(probs, store.pseudo_labels)
    return _partition_means(losses, clean)


def stream_loss_separation(
    model: TwoStreamModel,
    target: Dataset | TargetView,
    store: "PseudoLabelStore",
    true_labels: npt.ArrayLike,
) -> Dict[Stream, LossSeparation]:
    """Per-modality clean/noisy loss means against the shared pseudo-labels."""

    modes = {Stream.APPEARANCE: StreamMode.APPEARANCE_ONLY, Stream.MOTION: StreamMode.MOTION_ONLY}
    return {
        stream: loss_separation(model, target, store, true_labels, mode)
        for stream, mode in modes.items()
    }


def cosine_similarity(
    queries: npt.NDArray[np.float64], gallery: npt.NDArray[np.float64]
) -> npt.NDArray[np.float64]:
    """Pairwise cosine similarity; any pair involving a zero vector scores -1."""

    query_norms = np.linalg.norm(queries, axis=1)
    gallery_norms = np.linalg.norm(gallery, axis=1)
    query_ok = query_norms > 0
    gallery_ok = gallery_norms > 0
    safe_queries = queries / np.where(query_ok, query_norms, 1.0)[:, None]
    safe_gallery = gallery / np.where(gallery_ok, gallery_norms, 1.0)[:, None]
    sims = safe_queries @ safe_gallery.T
    sims[~query_ok, :] = -1.0
    sims[:, ~gallery_ok] = -1.0
    return sims


def _embedding(model: TwoStreamModel, samples: Dataset, stream: Stream) -> npt.NDArray[np.float64]:
    features = samples.features_a if stream is Stream.APPEARANCE else samples.features_m
    _, hidden = forward_stream(model.stream(stream), features)
    return hidden


def cross_domain_retrieval(
    model: TwoStreamModel,
    target_queries: Dataset,
    source_gallery: Dataset,
    ks: Sequence[int] = DEFAULT_KS,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> RetrievalReport:
    """Recall@k of same-class source items among the top-k most similar.

    Similarity is the per-modality cosine between penultimate activations,
    averaged across the modalities of ``stream_mode``. Ties rank by gallery id.
    """

    if target_queries.labels is None or source_gallery.labels is None:
        raise EvaluationError("retrieval needs labels on both queries and gallery")
    if len(target_queries) == 0:
        raise EvaluationError("retrieval needs at least one query")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise EvaluationError(f"k values must be positive, got {ks}")
    if ks[-1] > len(source_gallery):
        raise EvaluationError(f"k={ks[-1]} exceeds gallery size {len(source_gallery)}")

    streams = StreamMode(stream_mode).streams()
    similarity = np.zeros((len(target_queries), len(source_gallery)))
    for stream in streams:
        similarity += cosine_similarity(
            _embedding(model, target_queries, stream), _embedding(model, source_gallery, stream)
        )
    similarity /= len(streams)

    ranking = np.argsort(-similarity, axis=1, kind="stable")[:, : ks[-1]]
    matches = source_gallery.labels[ranking] == target_queries.labels[:, None]
    recall_at = {k: float(np.mean(matches[:, :k].any(axis=1))) for k in ks}
    return RetrievalReport(recall_at=recall_at, num_queries=len(target_queries))
