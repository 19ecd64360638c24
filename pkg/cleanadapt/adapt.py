"""Source pre-training, pseudo-labeling, small-loss selection and the adaptation loops.

The adaptation entry points (``run_*``) receive the pre-trained parameters
and an unlabeled :class:`~cleanadapt.data.TargetView`. Ground truth, when
available, only reaches them through an :class:`AdaptMonitor`, which is read
for diagnostics after each epoch and never influences training.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .data import (
    AugmentationSpec,
    Dataset,
    DomainTag,
    TargetView,
    strong_augment_pair,
    weak_augment_pair,
)
from .evaluation import (
    LossSeparation,
    accuracy_against,
    loss_separation,
    selection_quality,
    stream_loss_separation,
    top1_accuracy,
)
from .model import (
    DEFAULT_HIDDEN_DIM,
    Stream,
    StreamMode,
    TeacherStudentPair,
    TwoStreamModel,
    clone_model,
    ema_update,
    init_model,
    loss_and_gradients,
    predict_proba,
)
from .numerics import (
    DenseMatrix,
    LrSchedule,
    RngState,
    cross_entropy_batch,
    sgd_momentum_step,
    stable_argmax,
)

__all__ = [
    "AdaptationError",
    "AdaptMode",
    "AdaptConfig",
    "PseudoLabelStore",
    "SelectionResult",
    "EpochRecord",
    "EPOCH_CSV_HEADER",
    "AdaptMonitor",
    "MomentumSGD",
    "CleanAdaptResult",
    "TeacherStudentResult",
    "AdaptationOutcome",
    "keep_count",
    "train_supervised",
    "pretrain_source",
    "train_target_supervised",
    "generate_pseudo_labels",
    "select_clean",
    "select_high_loss",
    "finetune_epoch",
    "run_cleanadapt",
    "run_finetune_all",
    "run_highloss_ablation",
    "run_cleanadapt_ts",
    "run_adaptation",
]

LOGGER = logging.getLogger("cleanadapt.adapt")

# Shuffle sub-stream phases.
PHASE_PRETRAIN = 0
PHASE_ADAPT = 1
PHASE_TARGET_SUPERVISED = 2

# Augmentation sub-stream kinds.
AUG_WEAK = 0
AUG_STRONG = 1

DEFAULT_LR_SCHEDULE = LrSchedule(1e-2, (10, 20))


class AdaptationError(RuntimeError):
    """Raised when training or adaptation cannot proceed."""


class AdaptMode(str, Enum):
    CLEANADAPT = "cleanadapt"
    CLEANADAPT_TS = "cleanadapt_ts"
    FINETUNE_ALL = "finetune_all"
    HIGHLOSS_ABLATION = "highloss_ablation"


@dataclass(frozen=True)
class AdaptConfig:
    """Hyper-parameters of one training or adaptation run."""

    tau: float = 0.6
    epsilon: float = 0.99
    epochs: int = 30
    batch_size: int = 32
    lr_schedule: LrSchedule = DEFAULT_LR_SCHEDULE
    momentum: float = 0.9
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0
    mode: AdaptMode = AdaptMode.CLEANADAPT
    stream_mode: StreamMode = StreamMode.TWO_STREAM
    hidden_dim: int = DEFAULT_HIDDEN_DIM

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AdaptMode(self.mode))
        object.__setattr__(self, "stream_mode", StreamMode(self.stream_mode))
        problems: List[str] = []
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.epsilon <= 1.0:
            problems.append(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.hidden_dim < 1:
            problems.append(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if problems:
            raise AdaptationError("invalid adaptation config: " + "; ".join(problems))

    def rng(self) -> RngState:
        return RngState(self.seed)


@dataclass(frozen=True)
class PseudoLabelStore:
    """Per-sample pseudo-label, its loss and whether the sample was selected."""

    pseudo_labels: npt.NDArray[np.int64]
    losses: npt.NDArray[np.float64]
    num_classes: int
    selected: Optional[npt.NDArray[np.bool_]] = None

    def __post_init__(self) -> None:
        labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        losses = np.asarray(self.losses, dtype=np.float64)
        if labels.ndim != 1 or losses.shape != labels.shape:
            raise AdaptationError(f"pseudo-label/loss shapes differ: {labels.shape} vs {losses.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise AdaptationError(f"pseudo-labels must lie in [0, {self.num_classes})")
        selected = (
            np.zeros(labels.shape, dtype=bool)
            if self.selected is None
            else np.asarray(self.selected, dtype=bool)
        )
        if selected.shape != labels.shape:
            raise AdaptationError("selection flags do not match the store")
        object.__setattr__(self, "pseudo_labels", labels)
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "selected", selected)

    def __len__(self) -> int:
        return int(self.pseudo_labels.shape[0])

    def class_ids(self, label: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.pseudo_labels == label)

    def with_selection(self, selection: "SelectionResult") -> "PseudoLabelStore":
        flags = np.zeros(len(self), dtype=bool)
        flags[selection.selected_ids()] = True
        return PseudoLabelStore(self.pseudo_labels, self.losses, self.num_classes, flags)


@dataclass(frozen=True)
class SelectionResult:
    """Per-pseudo-class split into clean (kept) and noisy (discarded) ids.

    Both lists of a class are in ascending ``(loss, id)`` order.
    """

    clean_ids: Mapping[int, Tuple[int, ...]]
    noisy_ids: Mapping[int, Tuple[int, ...]]
    tau: float

    @property
    def per_class_counts(self) -> Dict[int, int]:
        return {label: len(ids) for label, ids in self.clean_ids.items()}

    @property
    def num_selected(self) -> int:
        return sum(len(ids) for ids in self.clean_ids.values())

    def selected_ids(self) -> npt.NDArray[np.int64]:
        ids = [sample for group in self.clean_ids.values() for sample in group]
        return np.array(sorted(ids), dtype=np.int64)

    def discarded_ids(self) -> npt.NDArray[np.int64]:
        ids = [sample for group in self.noisy_ids.values() for sample in group]
        return np.array(sorted(ids), dtype=np.int64)


EPOCH_CSV_HEADER: Tuple[str, ...] = (
    "epoch",
    "lr",
    "val_acc",
    "pl_acc",
    "sel_precision",
    "clean_loss",
    "noisy_loss",
)


def _csv_value(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _stream_payload(
    stream_losses: Optional[Mapping[Stream, LossSeparation]],
) -> Optional[Dict[str, Dict[str, Optional[float]]]]:
    if stream_losses is None:
        return None
    return {
        Stream(stream).value: {"clean": separation.mean_clean, "noisy": separation.mean_noisy}
        for stream, separation in stream_losses.items()
    }


@dataclass(frozen=True)
class EpochRecord:
    """Diagnostics of one adaptation epoch; label-dependent fields are ``None`` without a monitor.

    ``stream_losses`` holds the clean/noisy loss means of each modality on its
    own, measured with the model that produced the epoch's pseudo-labels on
    unaugmented target features. It goes to the ledger, not to the epoch CSV.
    """

    epoch: int
    lr: float
    num_selected: int
    train_loss: float
    target_val_accuracy: Optional[float] = None
    pseudo_label_accuracy: Optional[float] = None
    selection_precision: Optional[float] = None
    mean_loss_clean_true: Optional[float] = None
    mean_loss_noisy_true: Optional[float] = None
    student_val_accuracy: Optional[float] = None
    stream_losses: Optional[Mapping[Stream, LossSeparation]] = None

    def csv_row(self) -> Tuple[str, ...]:
        return (
            str(self.epoch),
            _csv_value(self.lr),
            _csv_value(self.target_val_accuracy),
            _csv_value(self.pseudo_label_accuracy),
            _csv_value(self.selection_precision),
            _csv_value(self.mean_loss_clean_true),
            _csv_value(self.mean_loss_noisy_true),
        )

    def to_payload(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "num_selected": self.num_selected,
            "train_loss": self.train_loss,
            "val_acc": self.target_val_accuracy,
            "pl_acc": self.pseudo_label_accuracy,
            "sel_precision": self.selection_precision,
            "clean_loss": self.mean_loss_clean_true,
            "noisy_loss": self.mean_loss_noisy_true,
            "student_acc": self.student_val_accuracy,
            "stream_losses": _stream_payload(self.stream_losses),
        }


@dataclass(frozen=True)
class AdaptMonitor:
    """Evaluation-only ground truth for the target domain.

    ``true_labels`` are the hidden labels of the target-train samples (same
    order as the :class:`TargetView`); ``val_set`` is an optional labeled
    target validation split.
    """

    true_labels: Optional[npt.NDArray[np.int64]] = None
    val_set: Optional[Dataset] = None

    def __post_init__(self) -> None:
        if self.val_set is not None:
            if self.val_set.domain is not DomainTag.TARGET:
                raise AdaptationError("validation data must come from the target domain")
            if not self.val_set.has_labels:
                raise AdaptationError("validation data must be labeled")
        if self.true_labels is not None:
            object.__setattr__(self, "true_labels", np.asarray(self.true_labels, dtype=np.int64))

    def accuracy(
        self, model: TwoStreamModel, target: TargetView, stream_mode: StreamMode
    ) -> Optional[float]:
        if self.val_set is not None:
            return top1_accuracy(model, self.val_set, stream_mode)
        if self.true_labels is not None:
            return accuracy_against(model, target, self.true_labels, stream_mode)
        return None


class MomentumSGD:
    """Velocity state for SGD with momentum over one model's parameters."""

    def __init__(self, model: TwoStreamModel, momentum: float) -> None:
        self.momentum = momentum
        self.velocity: Dict[str, DenseMatrix] = {
            name: np.zeros_like(value) for name, value in model.parameters().items()
        }

    def step(self, model: TwoStreamModel, grads: Mapping[str, DenseMatrix], lr: float) -> None:
        params, self.velocity = sgd_momentum_step(
            model.parameters(), grads, self.velocity, lr, self.momentum
        )
        model.assign(params)


class CleanAdaptResult(NamedTuple):
    model: TwoStreamModel
    records: List[EpochRecord]


class TeacherStudentResult(NamedTuple):
    student: TwoStreamModel
    teacher: TwoStreamModel
    records: List[EpochRecord]


@dataclass(frozen=True)
class AdaptationOutcome:
    """Mode-independent result; ``model`` is the one whose accuracy is reported."""

    model: TwoStreamModel
    records: List[EpochRecord]
    student: Optional[TwoStreamModel] = None


EpochCallback = Callable[[EpochRecord], None]
Augmenter = Callable[[int, int], Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]]


# ----------------------------------------------------------------------
# Minibatch training


def _train_pass(
    model: TwoStreamModel,
    features_a: npt.NDArray[np.float64],
    features_m: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    ids: npt.NDArray[np.int64],
    *,
    lr: float,
    batch_size: int,
    optimizer: MomentumSGD,
    order_rng: np.random.Generator,
    stream_mode: StreamMode,
    epoch: int,
    augmenter: Optional[Augmenter] = None,
    after_step: Optional[Callable[[], None]] = None,
) -> float:
    """One shuffled pass over ``ids``; returns the sample-weighted mean batch loss."""

    order = ids[order_rng.permutation(ids.shape[0])]
    total = 0.0
    for start in range(0, order.shape[0], batch_size):
        batch = order[start : start + batch_size]
        if augmenter is None:
            x_a, x_m = features_a[batch], features_m[batch]
        else:
            views = [augmenter(epoch, int(sample)) for sample in batch]
            x_a = np.stack([view[0] for view in views])
            x_m = np.stack([view[1] for view in views])
        loss, grads = loss_and_gradients(model, x_a, x_m, labels[batch], stream_mode)
        optimizer.step(model, grads, lr)
        if after_step is not None:
            after_step()
        total += loss * batch.shape[0]
        LOGGER.debug("epoch %d batch@%d loss=%.6f", epoch, start, loss)
    return total / order.shape[0]


def train_supervised(
    dataset: Dataset,
    cfg: AdaptConfig,
    rng: RngState,
    *,
    phase: int = PHASE_PRETRAIN,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TwoStreamModel:
    """Train a fresh two-stream model on a labeled dataset with minibatch SGD."""

    if not dataset.has_labels:
        raise AdaptationError(f"unlabeled {dataset.domain.value}")
    labels = dataset.require_labels()
    if len(dataset) == 0:
        raise AdaptationError("cannot train on an empty dataset")
    model = init_model(
        dataset.dim_a, dataset.dim_m, dataset.num_classes, rng.stream("init"), cfg.hidden_dim
    )
    optimizer = MomentumSGD(model, cfg.momentum)
    ids = np.arange(len(dataset), dtype=np.int64)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_schedule.at(epoch)
        loss = _train_pass(
            model,
            dataset.features_a,
            dataset.features_m,
            labels,
            ids,
            lr=lr,
            batch_size=cfg.batch_size,
            optimizer=optimizer,
            order_rng=rng.stream("shuffle", phase, epoch),
            stream_mode=cfg.stream_mode,
            epoch=epoch,
        )
        LOGGER.info("%s epoch %d lr=%g loss=%.6f", dataset.domain.value, epoch, lr, loss)
        if on_epoch is not None:
            on_epoch(epoch, lr, loss)
    return model


def pretrain_source(
    source: Dataset,
    cfg: AdaptConfig,
    rng: RngState,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TwoStreamModel:
    """Source-only model: supervised training on the labeled source domain."""

    if not source.has_labels:
        raise AdaptationError("unlabeled source")
    return train_supervised(source, cfg, rng, phase=PHASE_PRETRAIN, on_epoch=on_epoch)


def train_target_supervised(
    target: Dataset,
    cfg: AdaptConfig,
    rng: RngState,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TwoStreamModel:
    """Upper-bound reference trained directly on labeled target data."""

    if not target.has_labels:
        raise AdaptationError("unlabeled target")
    return train_supervised(target, cfg, rng, phase=PHASE_TARGET_SUPERVISED, on_epoch=on_epoch)


# ----------------------------------------------------------------------
# Pseudo-labels and selection


def _check_dims(model: TwoStreamModel, target: TargetView) -> None:
    if (model.appearance.input_dim, model.motion.input_dim) != (target.dim_a, target.dim_m):
        raise AdaptationError(
            f"model expects dims ({model.appearance.input_dim}, {model.motion.input_dim}), "
            f"target has ({target.dim_a}, {target.dim_m})"
        )
    if model.num_classes != target.num_classes:
        raise AdaptationError(
            f"model has {model.num_classes} classes, target has {target.num_classes}"
        )


def _label_store(
    model: TwoStreamModel,
    features_a: npt.NDArray[np.float64],
    features_m: npt.NDArray[np.float64],
    stream_mode: StreamMode,
) -> PseudoLabelStore:
    probs = predict_proba(model, features_a, features_m, stream_mode)
    labels = stable_argmax(probs)
    return PseudoLabelStore(
        pseudo_labels=labels,
        losses=cross_entropy_batch(probs, labels),
        num_classes=model.num_classes,
    )


def generate_pseudo_labels(
    model: TwoStreamModel,
    target: TargetView,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> PseudoLabelStore:
    """Argmax pseudo-label and its cross-entropy for every target sample."""

    if len(target) == 0:
        raise AdaptationError("cannot pseudo-label an empty dataset")
    _check_dims(model, target)
    return _label_store(model, target.features_a, target.features_m, stream_mode)


def keep_count(tau: float, class_size: int) -> int:
    """Number of samples kept from a pseudo-class of ``class_size``."""

    # round() absorbs products like 0.6 * 5 == 2.9999999999999996
    return max(1, math.floor(round(tau * class_size, 9)))


def _ranked_classes(store: PseudoLabelStore, tau: float) -> Dict[int, npt.NDArray[np.int64]]:
    if not 0.0 < tau <= 1.0:
        raise AdaptationError(f"tau must lie in (0, 1], got {tau}")
    if len(store) == 0:
        raise AdaptationError("cannot select from an empty pseudo-label store")
    ranked: Dict[int, npt.NDArray[np.int64]] = {}
    for label in range(store.num_classes):
        ids = store.class_ids(label)
        if ids.size:
            # lexsort keys are last-primary: loss first, then id
            ranked[label] = ids[np.lexsort((ids, store.losses[ids]))]
    return ranked


def select_clean(store: PseudoLabelStore, tau: float) -> SelectionResult:
    """Keep the ``max(1, floor(tau * n_c))`` smallest-loss samples of every pseudo-class."""

    clean: Dict[int, Tuple[int, ...]] = {}
    noisy: Dict[int, Tuple[int, ...]] = {}
    for label, ordered in _ranked_classes(store, tau).items():
        count = keep_count(tau, ordered.size)
        clean[label] = tuple(int(sample) for sample in ordered[:count])
        noisy[label] = tuple(int(sample) for sample in ordered[count:])
    return SelectionResult(clean_ids=clean, noisy_ids=noisy, tau=tau)


def select_high_loss(store: PseudoLabelStore, tau: float) -> SelectionResult:
    """Ablation counterpart of :func:`select_clean` keeping the largest-loss samples."""

    clean: Dict[int, Tuple[int, ...]] = {}
    noisy: Dict[int, Tuple[int, ...]] = {}
    for label, ordered in _ranked_classes(store, tau).items():
        cut = ordered.size - keep_count(tau, ordered.size)
        clean[label] = tuple(int(sample) for sample in ordered[cut:])
        noisy[label] = tuple(int(sample) for sample in ordered[:cut])
    return SelectionResult(clean_ids=clean, noisy_ids=noisy, tau=tau)


def _check_selection(store: PseudoLabelStore, selection: SelectionResult) -> npt.NDArray[np.int64]:
    for label, ids in selection.clean_ids.items():
        if ids and np.any(store.pseudo_labels[list(ids)] != label):
            raise AdaptationError(f"selection for class {label} does not match the pseudo-labels")
    selected = selection.selected_ids()
    if selected.size == 0:
        raise AdaptationError("no clean samples")
    return selected


# ----------------------------------------------------------------------
# Fine-tuning


def _finetune(
    model: TwoStreamModel,
    target: TargetView,
    store: PseudoLabelStore,
    selection: SelectionResult,
    cfg: AdaptConfig,
    epoch: int,
    rng: RngState,
    optimizer: MomentumSGD,
    augmenter: Optional[Augmenter] = None,
    after_step: Optional[Callable[[], None]] = None,
) -> float:
    selected = _check_selection(store, selection)
    return _train_pass(
        model,
        target.features_a,
        target.features_m,
        store.pseudo_labels,
        selected,
        lr=cfg.lr_schedule.at(epoch),
        batch_size=cfg.batch_size,
        optimizer=optimizer,
        order_rng=rng.stream("shuffle", PHASE_ADAPT, epoch),
        stream_mode=cfg.stream_mode,
        epoch=epoch,
        augmenter=augmenter,
        after_step=after_step,
    )


def finetune_epoch(
    model: TwoStreamModel,
    target: TargetView,
    store: PseudoLabelStore,
    selection: SelectionResult,
    cfg: AdaptConfig,
    epoch: int,
    rng: RngState,
    optimizer: Optional[MomentumSGD] = None,
) -> TwoStreamModel:
    """One SGD pass over the selected samples with their pseudo-labels.

    ``model`` is updated in place and returned. Without an ``optimizer`` the
    pass starts from zero velocity.
    """

    _check_dims(model, target)
    if optimizer is None:
        optimizer = MomentumSGD(model, cfg.momentum)
    _finetune(model, target, store, selection, cfg, epoch, rng, optimizer)
    return model


def _require_mode(cfg: AdaptConfig, expected: AdaptMode) -> None:
    if cfg.mode is not expected:
        raise AdaptationError(f"expected mode {expected.value}, got {cfg.mode.value}")


def _diagnostics(
    epoch: int,
    lr: float,
    train_loss: float,
    store: PseudoLabelStore,
    selection: SelectionResult,
    monitor: Optional[AdaptMonitor],
    reported: Tuple[TwoStreamModel, TargetView, StreamMode],
    student: Optional[TwoStreamModel] = None,
    stream_losses: Optional[Mapping[Stream, LossSeparation]] = None,
) -> EpochRecord:
    record = EpochRecord(epoch=epoch, lr=lr, num_selected=selection.num_selected, train_loss=train_loss)
    if monitor is None:
        return record
    model, target, stream_mode = reported
    accuracy = monitor.accuracy(model, target, stream_mode)
    student_accuracy = None if student is None else monitor.accuracy(student, target, stream_mode)
    if monitor.true_labels is None:
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            num_selected=selection.num_selected,
            train_loss=train_loss,
            target_val_accuracy=accuracy,
            student_val_accuracy=student_accuracy,
        )
    separation = loss_separation(None, None, store, monitor.true_labels)
    quality = selection_quality(selection, store, monitor.true_labels)
    return EpochRecord(
        epoch=epoch,
        lr=lr,
        num_selected=selection.num_selected,
        train_loss=train_loss,
        target_val_accuracy=accuracy,
        pseudo_label_accuracy=quality.clean_rate,
        selection_precision=quality.precision,
        mean_loss_clean_true=separation.mean_clean,
        mean_loss_noisy_true=separation.mean_noisy,
        student_val_accuracy=student_accuracy,
        stream_losses=stream_losses,
    )


def _stream_losses(
    model: TwoStreamModel,
    target: TargetView,
    store: PseudoLabelStore,
    monitor: Optional[AdaptMonitor],
) -> Optional[Dict[Stream, LossSeparation]]:
    if monitor is None or monitor.true_labels is None:
        return None
    return stream_loss_separation(model, target, store, monitor.true_labels)


def _selection_loop(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor],
    selector: Callable[[PseudoLabelStore, float], SelectionResult],
    tau: float,
    on_epoch: Optional[EpochCallback],
) -> CleanAdaptResult:
    _check_dims(source_model, target)
    model = clone_model(source_model)
    optimizer = MomentumSGD(model, cfg.momentum)
    records: List[EpochRecord] = []
    for epoch in range(cfg.epochs):
        store = generate_pseudo_labels(model, target, cfg.stream_mode)
        selection = selector(store, tau)
        store = store.with_selection(selection)
        stream_losses = _stream_losses(model, target, store, monitor)
        lr = cfg.lr_schedule.at(epoch)
        train_loss = _finetune(model, target, store, selection, cfg, epoch, rng, optimizer)
        record = _diagnostics(
            epoch,
            lr,
            train_loss,
            store,
            selection,
            monitor,
            (model, target, cfg.stream_mode),
            stream_losses=stream_losses,
        )
        LOGGER.info(
            "%s epoch %d lr=%g selected=%d/%d loss=%.6f",
            cfg.mode.value,
            epoch,
            lr,
            selection.num_selected,
            len(store),
            train_loss,
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return CleanAdaptResult(model=model, records=records)


def run_cleanadapt(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> CleanAdaptResult:
    """Self-training on the small-loss pseudo-labeled target samples.

    Every epoch re-labels the full target set with the current model, keeps
    the ``tau`` fraction of lowest-loss samples per pseudo-class and takes one
    SGD pass over them.
    """

    _require_mode(cfg, AdaptMode.CLEANADAPT)
    return _selection_loop(source_model, target, cfg, rng, monitor, select_clean, cfg.tau, on_epoch)


def run_finetune_all(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> CleanAdaptResult:
    """Baseline that trains on every pseudo-label (``tau`` forced to 1)."""

    _require_mode(cfg, AdaptMode.FINETUNE_ALL)
    return _selection_loop(source_model, target, cfg, rng, monitor, select_clean, 1.0, on_epoch)


def run_highloss_ablation(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> CleanAdaptResult:
    _require_mode(cfg, AdaptMode.HIGHLOSS_ABLATION)
    return _selection_loop(
        source_model, target, cfg, rng, monitor, select_high_loss, cfg.tau, on_epoch
    )


def _per_sample_augmenter(
    target: TargetView,
    spec: AugmentationSpec,
    rng: RngState,
    kind: int,
) -> Augmenter:
    transform = weak_augment_pair if kind == AUG_WEAK else strong_augment_pair

    def augment(epoch: int, sample: int) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        return transform(
            target.features_a[sample],
            target.features_m[sample],
            spec,
            rng.stream("augment", kind, epoch, sample),
        )

    return augment


def run_cleanadapt_ts(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TeacherStudentResult:
    """Teacher-student variant.

    The teacher labels one weak view per sample per epoch and is updated only
    by EMA of the student after every optimizer step; the student trains on
    strong views of the selected samples.
    """

    _require_mode(cfg, AdaptMode.CLEANADAPT_TS)
    _check_dims(source_model, target)
    pair = TeacherStudentPair.from_source(source_model, cfg.epsilon)
    optimizer = MomentumSGD(pair.student, cfg.momentum)
    weak = _per_sample_augmenter(target, cfg.augmentation, rng, AUG_WEAK)
    strong = _per_sample_augmenter(target, cfg.augmentation, rng, AUG_STRONG)
    records: List[EpochRecord] = []

    for epoch in range(cfg.epochs):
        views = [weak(epoch, sample) for sample in range(len(target))]
        weak_a = np.stack([view[0] for view in views])
        weak_m = np.stack([view[1] for view in views])
        store = _label_store(pair.teacher, weak_a, weak_m, cfg.stream_mode)
        selection = select_clean(store, cfg.tau)
        store = store.with_selection(selection)
        stream_losses = _stream_losses(pair.teacher, target, store, monitor)
        lr = cfg.lr_schedule.at(epoch)
        train_loss = _finetune(
            pair.student,
            target,
            store,
            selection,
            cfg,
            epoch,
            rng,
            optimizer,
            augmenter=strong,
            after_step=lambda: ema_update(pair),
        )
        record = _diagnostics(
            epoch,
            lr,
            train_loss,
            store,
            selection,
            monitor,
            (pair.teacher, target, cfg.stream_mode),
            student=pair.student,
            stream_losses=stream_losses,
        )
        LOGGER.info(
            "%s epoch %d lr=%g selected=%d/%d loss=%.6f",
            cfg.mode.value,
            epoch,
            lr,
            selection.num_selected,
            len(store),
            train_loss,
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TeacherStudentResult(student=pair.student, teacher=pair.teacher, records=records)


def run_adaptation(
    source_model: TwoStreamModel,
    target: TargetView,
    cfg: AdaptConfig,
    rng: RngState,
    monitor: Optional[AdaptMonitor] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> AdaptationOutcome:
    """Dispatch on ``cfg.mode``; the teacher is the reported model in TS mode."""

    if cfg.mode is AdaptMode.CLEANADAPT_TS:
        ts = run_cleanadapt_ts(source_model, target, cfg, rng, monitor, on_epoch)
        return AdaptationOutcome(model=ts.teacher, records=ts.records, student=ts.student)
    runners = {
        AdaptMode.CLEANADAPT: run_cleanadapt,
        AdaptMode.FINETUNE_ALL: run_finetune_all,
        AdaptMode.HIGHLOSS_ABLATION: run_highloss_ablation,
    }
    result = runners[cfg.mode](source_model, target, cfg, rng, monitor, on_epoch)
    return AdaptationOutcome(model=result.model, records=result.records)
