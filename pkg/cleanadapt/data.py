"""Two-stream datasets, the synthetic domain-shift generator and augmentations.

Binary dataset layout (``CADD1``)::

    magic   b"CADD1"
    u32     n, |C|, d_a, d_m, labels_present
    n x     d_a float64, d_m float64, [u32 label]

All integers and reals are little-endian.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .numerics import RngState

__all__ = [
    "DatasetError",
    "DomainTag",
    "TwoStreamSample",
    "Dataset",
    "TargetView",
    "ShiftSpec",
    "ShiftSplits",
    "AugmentationSpec",
    "StrongTransform",
    "DATASET_MAGIC",
    "CIRCLE_RADIUS",
    "diagonal_translation",
    "mirror",
    "generate_shift_pair",
    "generate_shift_splits",
    "weak_augment",
    "weak_augment_pair",
    "select_transforms",
    "strong_augment",
    "strong_augment_pair",
    "dataset_bytes",
    "dataset_from_bytes",
    "write_dataset",
    "read_dataset",
    "read_csv_dataset",
    "dataset_stats",
]

LOGGER = logging.getLogger("cleanadapt.data")

DATASET_MAGIC = b"CADD1"
CIRCLE_RADIUS = 3.0
_HEADER = struct.Struct("<5I")

# Sub-stream keys under the "data" purpose.
_PROJECTION_KEY = 0
_SOURCE_KEY = 1
_TARGET_KEY = 2
_TARGET_VAL_KEY = 3


class DatasetError(ValueError):
    """Dataset, spec or file-format failure; ``code`` names the failure kind."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{message} [{code}]")
        self.code = code


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class TwoStreamSample:
    """One data point with both modality views."""

    id: int
    x_a: npt.NDArray[np.float64]
    x_m: npt.NDArray[np.float64]
    label: Optional[int] = None


def _check_features(name: str, values: npt.NDArray[np.float64]) -> None:
    if values.ndim != 2:
        raise DatasetError("dim_mismatch", f"{name} must be a (n, d) matrix, got shape {values.shape}")
    if values.shape[1] < 1:
        raise DatasetError("dim_mismatch", f"{name} has zero feature dimensions")
    if not np.all(np.isfinite(values)):
        raise DatasetError("non_finite", f"{name} contains non-finite values")


@dataclass(frozen=True)
class Dataset:
    """Ordered samples with dense ids ``0..n-1`` (the row index)."""

    features_a: npt.NDArray[np.float64]
    features_m: npt.NDArray[np.float64]
    num_classes: int
    labels: Optional[npt.NDArray[np.int64]] = None
    domain: DomainTag = DomainTag.TARGET

    def __post_init__(self) -> None:
        features_a = np.array(self.features_a, dtype=np.float64)
        features_m = np.array(self.features_m, dtype=np.float64)
        _check_features("appearance features", features_a)
        _check_features("motion features", features_m)
        if features_a.shape[0] != features_m.shape[0]:
            raise DatasetError(
                "dim_mismatch",
                f"stream sample counts differ: {features_a.shape[0]} vs {features_m.shape[0]}",
            )
        if self.num_classes < 2:
            raise DatasetError("dim_mismatch", f"need at least 2 classes, got {self.num_classes}")
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (features_a.shape[0],):
                raise DatasetError("dim_mismatch", f"label vector shape {labels.shape} does not match samples")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError("bad_label", f"labels must lie in [0, {self.num_classes})")
        features_a.setflags(write=False)
        features_m.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        object.__setattr__(self, "features_a", features_a)
        object.__setattr__(self, "features_m", features_m)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domain", DomainTag(self.domain))

    def __len__(self) -> int:
        return int(self.features_a.shape[0])

    @property
    def dim_a(self) -> int:
        return int(self.features_a.shape[1])

    @property
    def dim_m(self) -> int:
        return int(self.features_m.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def sample(self, index: int) -> TwoStreamSample:
        label = None if self.labels is None else int(self.labels[index])
        return TwoStreamSample(
            id=int(index), x_a=self.features_a[index], x_m=self.features_m[index], label=label
        )

    def samples(self) -> Iterator[TwoStreamSample]:
        for index in range(len(self)):
            yield self.sample(index)

    def require_labels(self) -> npt.NDArray[np.int64]:
        if self.labels is None:
            raise DatasetError("missing_labels", f"{self.domain.value} dataset carries no labels")
        return self.labels

    def unlabeled(self) -> "TargetView":
        """Label-stripped view handed to the adaptation stage."""

        return TargetView(
            features_a=self.features_a, features_m=self.features_m, num_classes=self.num_classes
        )

    def with_labels(self, labels: Optional[npt.ArrayLike]) -> "Dataset":
        return Dataset(
            features_a=self.features_a,
            features_m=self.features_m,
            num_classes=self.num_classes,
            labels=None if labels is None else np.asarray(labels, dtype=np.int64),
            domain=self.domain,
        )


@dataclass(frozen=True)
class TargetView:
    """Unlabeled target samples. Carries no ground truth by construction."""

    features_a: npt.NDArray[np.float64]
    features_m: npt.NDArray[np.float64]
    num_classes: int

    def __len__(self) -> int:
        return int(self.features_a.shape[0])

    @property
    def dim_a(self) -> int:
        return int(self.features_a.shape[1])

    @property
    def dim_m(self) -> int:
        return int(self.features_m.shape[1])


def diagonal_translation(magnitude: float, latent_dim: int) -> Tuple[float, ...]:
    """Vector of norm ``magnitude`` along ``(1, ..., 1)``."""

    component = magnitude / math.sqrt(latent_dim)
    return tuple(component for _ in range(latent_dim))


def mirror(x: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Negate the first ``d // 2`` coordinates of every vector (last axis)."""

    out = np.array(x, dtype=np.float64)
    out[..., : out.shape[-1] // 2] *= -1.0
    return out


@dataclass(frozen=True)
class ShiftSpec:
    """Parameters of the synthetic source/target pair.

    Class means sit on a circle of radius :data:`CIRCLE_RADIUS` in the plane of
    the first two latent axes. The target rotates every latent point by
    ``rotation`` radians in the plane of the first and last latent axes (the
    first two when ``latent_dim == 2``), then adds ``translation``.

    Each sample is drawn in its mirrored orientation (see :func:`mirror`, one
    shared decision for both views) with ``mirror_probability``. At 0.5 the
    data distribution is mirror-symmetric, so the weak-augmentation flip keeps
    every class distribution unchanged.
    """

    num_classes: int
    source_per_class: int
    target_per_class: int
    latent_dim: int = 8
    dim_a: int = 16
    dim_m: int = 16
    rotation: float = 0.0
    translation: Tuple[float, ...] = ()
    noise_std: float = 0.5
    view_noise_std: float = 0.1
    seed: int = 0
    val_per_class: int = 0
    mirror_probability: float = 0.5

    def __post_init__(self) -> None:
        translation = tuple(float(value) for value in self.translation) or tuple(
            0.0 for _ in range(max(self.latent_dim, 0))
        )
        object.__setattr__(self, "translation", translation)
        problems: List[str] = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.source_per_class < 1 or self.target_per_class < 1:
            problems.append("samples per class must be >= 1")
        if self.val_per_class < 0:
            problems.append("val_per_class must be >= 0")
        if self.latent_dim < 2:
            problems.append("latent_dim must be >= 2")
        if self.dim_a < 1 or self.dim_m < 1:
            problems.append("feature dimensions must be >= 1")
        if self.noise_std < 0 or self.view_noise_std < 0:
            problems.append("noise standard deviations must be >= 0")
        if not 0.0 <= self.mirror_probability <= 1.0:
            problems.append("mirror_probability must lie in [0, 1]")
        if len(translation) != self.latent_dim:
            problems.append(f"translation has {len(translation)} entries, expected {self.latent_dim}")
        if not all(math.isfinite(value) for value in (self.rotation, *translation)):
            problems.append("rotation and translation must be finite")
        if problems:
            raise DatasetError("invalid_spec", "invalid shift spec: " + "; ".join(problems))


class ShiftSplits(NamedTuple):
    source: Dataset
    target: Dataset
    target_val: Optional[Dataset]


def _class_means(spec: ShiftSpec) -> npt.NDArray[np.float64]:
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    means = np.zeros((spec.num_classes, spec.latent_dim))
    means[:, 0] = CIRCLE_RADIUS * np.cos(angles)
    means[:, 1] = CIRCLE_RADIUS * np.sin(angles)
    return means


def _target_transform(spec: ShiftSpec, latents: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    second = spec.latent_dim - 1 if spec.latent_dim > 2 else 1
    cos_phi, sin_phi = math.cos(spec.rotation), math.sin(spec.rotation)
    moved = latents.copy()
    moved[:, 0] = cos_phi * latents[:, 0] - sin_phi * latents[:, second]
    moved[:, second] = sin_phi * latents[:, 0] + cos_phi * latents[:, second]
    return moved + np.asarray(spec.translation)


def _draw_split(
    spec: ShiftSpec,
    rng: np.random.Generator,
    per_class: int,
    projections: Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]],
    shifted: bool,
    domain: DomainTag,
) -> Dataset:
    labels = rng.permutation(np.repeat(np.arange(spec.num_classes), per_class))
    latents = _class_means(spec)[labels] + spec.noise_std * rng.standard_normal(
        (labels.size, spec.latent_dim)
    )
    if shifted:
        latents = _target_transform(spec, latents)
    proj_a, proj_m = projections
    features_a = latents @ proj_a + spec.view_noise_std * rng.standard_normal((labels.size, spec.dim_a))
    features_m = latents @ proj_m + spec.view_noise_std * rng.standard_normal((labels.size, spec.dim_m))
    mirrored = rng.random(labels.size) < spec.mirror_probability
    features_a[mirrored] = mirror(features_a[mirrored])
    features_m[mirrored] = mirror(features_m[mirrored])
    return Dataset(
        features_a=features_a,
        features_m=features_m,
        num_classes=spec.num_classes,
        labels=labels.astype(np.int64),
        domain=domain,
    )


def generate_shift_splits(spec: ShiftSpec) -> ShiftSplits:
    """Source, target-train and (optional) target-validation datasets.

    A pure function of ``spec``. Both modalities are fixed random linear
    projections of one latent point plus independent view noise.
    """

    rng = RngState(spec.seed)
    projection_rng = rng.stream("data", _PROJECTION_KEY)
    scale = 1.0 / math.sqrt(spec.latent_dim)
    projections = (
        scale * projection_rng.standard_normal((spec.latent_dim, spec.dim_a)),
        scale * projection_rng.standard_normal((spec.latent_dim, spec.dim_m)),
    )
    source = _draw_split(
        spec, rng.stream("data", _SOURCE_KEY), spec.source_per_class, projections, False, DomainTag.SOURCE
    )
    target = _draw_split(
        spec, rng.stream("data", _TARGET_KEY), spec.target_per_class, projections, True, DomainTag.TARGET
    )
    target_val = None
    if spec.val_per_class > 0:
        target_val = _draw_split(
            spec,
            rng.stream("data", _TARGET_VAL_KEY),
            spec.val_per_class,
            projections,
            True,
            DomainTag.TARGET,
        )
    LOGGER.info(
        "Generated shift pair: %d source, %d target samples (%d classes, rotation=%.3f)",
        len(source),
        len(target),
        spec.num_classes,
        spec.rotation,
    )
    return ShiftSplits(source=source, target=target, target_val=target_val)


def generate_shift_pair(spec: ShiftSpec) -> Tuple[Dataset, Dataset]:
    splits = generate_shift_splits(spec)
    return splits.source, splits.target


# ----------------------------------------------------------------------
# Augmentation


class StrongTransform(int, Enum):
    """Feature-space transforms available to :func:`strong_augment`, in application order."""

    GAUSSIAN_NOISE = 0
    COORDINATE_DROPOUT = 1
    GLOBAL_SCALE = 2


_STRONG_TRANSFORMS: Tuple[StrongTransform, ...] = tuple(StrongTransform)


@dataclass(frozen=True)
class AugmentationSpec:
    """Strengths of the weak (``T_w``) and strong (``T_s``) augmentations."""

    weak_noise_std: float = 0.05
    flip_probability: float = 0.5
    strong_noise_std: float = 0.2
    dropout_fraction: float = 0.3
    scale_range: Tuple[float, float] = (0.8, 1.2)
    transforms_per_strong: int = 2

    def __post_init__(self) -> None:
        low, high = (float(value) for value in self.scale_range)
        object.__setattr__(self, "scale_range", (low, high))
        problems: List[str] = []
        if self.weak_noise_std < 0 or self.strong_noise_std < 0:
            problems.append("noise standard deviations must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            problems.append("flip_probability must lie in [0, 1]")
        if not 0.0 <= self.dropout_fraction < 1.0:
            problems.append("dropout_fraction must lie in [0, 1)")
        if low > high:
            problems.append("scale_range must satisfy lo <= hi")
        if not 0 <= self.transforms_per_strong <= len(_STRONG_TRANSFORMS):
            problems.append(f"transforms_per_strong must lie in [0, {len(_STRONG_TRANSFORMS)}]")
        if problems:
            raise DatasetError("invalid_spec", "invalid augmentation spec: " + "; ".join(problems))


def weak_augment(
    x: npt.ArrayLike,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    flip: Optional[bool] = None,
) -> npt.NDArray[np.float64]:
    """Gaussian jitter plus, with ``flip_probability``, a :func:`mirror` of the vector.

    ``flip`` forces the flip decision (used to flip both modalities of one
    sample together); otherwise it is drawn from ``rng`` before the noise.
    """

    vector = np.asarray(x, dtype=np.float64)
    if flip is None:
        flip = bool(rng.random() < spec.flip_probability)
    out = vector.copy()
    if spec.weak_noise_std > 0:
        out = out + spec.weak_noise_std * rng.standard_normal(vector.shape)
    return mirror(out) if flip else out


def weak_augment_pair(
    x_a: npt.ArrayLike, x_m: npt.ArrayLike, spec: AugmentationSpec, rng: np.random.Generator
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Weakly augment both views of a sample with one shared flip decision."""

    flip = bool(rng.random() < spec.flip_probability)
    return weak_augment(x_a, spec, rng, flip=flip), weak_augment(x_m, spec, rng, flip=flip)


def select_transforms(spec: AugmentationSpec, rng: np.random.Generator) -> Tuple[StrongTransform, ...]:
    """Uniformly chosen ``transforms_per_strong``-subset, in list order."""

    chosen = rng.choice(len(_STRONG_TRANSFORMS), size=spec.transforms_per_strong, replace=False)
    return tuple(_STRONG_TRANSFORMS[index] for index in sorted(int(value) for value in chosen))


def _dropout_count(fraction: float, dim: int) -> int:
    # round() guards against products like 0.3 * 10 == 3.0000000000000004
    return min(dim, math.ceil(round(fraction * dim, 9)))


def strong_augment(
    x: npt.ArrayLike, spec: AugmentationSpec, rng: np.random.Generator
) -> npt.NDArray[np.float64]:
    """Apply a random subset of the strong transforms to one feature vector."""

    out = np.asarray(x, dtype=np.float64).copy()
    dim = out.shape[-1]
    for transform in select_transforms(spec, rng):
        if transform is StrongTransform.GAUSSIAN_NOISE:
            out = out + spec.strong_noise_std * rng.standard_normal(out.shape)
        elif transform is StrongTransform.COORDINATE_DROPOUT:
            count = _dropout_count(spec.dropout_fraction, dim)
            if count:
                out[rng.choice(dim, size=count, replace=False)] = 0.0
        else:
            low, high = spec.scale_range
            out = out * rng.uniform(low, high)
    return out


def strong_augment_pair(
    x_a: npt.ArrayLike, x_m: npt.ArrayLike, spec: AugmentationSpec, rng: np.random.Generator
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    return strong_augment(x_a, spec, rng), strong_augment(x_m, spec, rng)


# ----------------------------------------------------------------------
# Persistence


def _record_dtype(dim_a: int, dim_m: int, with_labels: bool) -> np.dtype:
    fields: List[tuple] = [
        ("a", "<f8", (dim_a,)),
        ("m", "<f8", (dim_m,)),
    ]
    if with_labels:
        fields.append(("label", "<u4"))
    return np.dtype(fields)


def dataset_bytes(dataset: Dataset) -> bytes:
    with_labels = dataset.has_labels
    records = np.zeros(len(dataset), dtype=_record_dtype(dataset.dim_a, dataset.dim_m, with_labels))
    records["a"] = dataset.features_a
    records["m"] = dataset.features_m
    if with_labels:
        records["label"] = dataset.require_labels()
    header = DATASET_MAGIC + _HEADER.pack(
        len(dataset), dataset.num_classes, dataset.dim_a, dataset.dim_m, int(with_labels)
    )
    return header + records.tobytes()


def dataset_from_bytes(payload: bytes, domain: DomainTag = DomainTag.TARGET) -> Dataset:
    if payload[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetError("bad_magic", "bad magic: not a CADD1 dataset file")
    offset = len(DATASET_MAGIC)
    if len(payload) < offset + _HEADER.size:
        raise DatasetError("truncated", "truncated dataset header")
    count, num_classes, dim_a, dim_m, labels_flag = _HEADER.unpack_from(payload, offset)
    offset += _HEADER.size
    if dim_a < 1 or dim_m < 1 or labels_flag not in (0, 1):
        raise DatasetError(
            "dim_mismatch", f"inconsistent header: d_a={dim_a} d_m={dim_m} labels={labels_flag}"
        )
    dtype = _record_dtype(dim_a, dim_m, bool(labels_flag))
    expected = offset + count * dtype.itemsize
    if len(payload) < expected:
        raise DatasetError("truncated", f"truncated dataset: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise DatasetError("dim_mismatch", f"{len(payload) - expected} trailing bytes after {count} samples")
    records = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    labels = records["label"].astype(np.int64) if labels_flag else None
    return Dataset(
        features_a=records["a"].astype(np.float64).reshape(count, dim_a),
        features_m=records["m"].astype(np.float64).reshape(count, dim_m),
        num_classes=int(num_classes),
        labels=labels,
        domain=domain,
    )


def write_dataset(dataset: Dataset, path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(dataset_bytes(dataset))
    LOGGER.debug("Wrote %s dataset %s (%d samples)", dataset.domain.value, target, len(dataset))
    return target


def read_dataset(path: Path | str, domain: DomainTag = DomainTag.TARGET) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), domain=domain)


def _column_dims(header: Sequence[str]) -> Tuple[int, int]:
    if list(header[:2]) != ["id", "label"]:
        raise DatasetError("bad_csv", "CSV header must start with 'id,label'")
    dim_a = sum(1 for name in header if name.startswith("a_"))
    dim_m = sum(1 for name in header if name.startswith("m_"))
    expected = ["id", "label", *(f"a_{i}" for i in range(dim_a)), *(f"m_{i}" for i in range(dim_m))]
    if list(header) != expected:
        raise DatasetError("bad_csv", "CSV header must be id,label,a_0..a_{d_a-1},m_0..m_{d_m-1}")
    return dim_a, dim_m


def read_csv_dataset(
    path: Path | str,
    num_classes: Optional[int] = None,
    domain: DomainTag = DomainTag.TARGET,
) -> Dataset:
    """Import externally computed features; ``label == -1`` marks an absent label."""

    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = [column.strip() for column in next(reader)]
        except StopIteration as exc:
            raise DatasetError("bad_csv", "empty CSV file") from exc
        dim_a, dim_m = _column_dims(header)
        rows = {}
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError("bad_csv", f"line {line_number}: expected {len(header)} fields")
            try:
                sample_id, label = int(row[0]), int(row[1])
                values = [float(value) for value in row[2:]]
            except ValueError as exc:
                raise DatasetError("bad_csv", f"line {line_number}: {exc}") from exc
            if sample_id in rows:
                raise DatasetError("bad_csv", f"line {line_number}: duplicate id {sample_id}")
            rows[sample_id] = (label, values)

    if sorted(rows) != list(range(len(rows))) or not rows:
        raise DatasetError("bad_csv", "ids must be dense 0..n-1")
    ordered = [rows[index] for index in range(len(rows))]
    labels = np.array([label for label, _ in ordered], dtype=np.int64)
    values = np.array([features for _, features in ordered], dtype=np.float64)
    if labels.size and labels.min() < -1:
        raise DatasetError("bad_label", "CSV labels must be -1 (absent) or a class index")
    present = labels >= 0
    if present.any() and not present.all():
        raise DatasetError("bad_csv", "labels must be present for all rows or for none")
    if num_classes is None:
        if not present.any():
            raise DatasetError("bad_csv", "num_classes is required when labels are absent")
        num_classes = int(labels.max()) + 1
    return Dataset(
        features_a=values[:, :dim_a],
        features_m=values[:, dim_a:],
        num_classes=num_classes,
        labels=labels if present.all() else None,
        domain=domain,
    )


def dataset_stats(dataset: Dataset) -> str:
    return (
        f"{dataset.domain.value}: n={len(dataset)} classes={dataset.num_classes} "
        f"d_a={dataset.dim_a} d_m={dataset.dim_m} labels={'yes' if dataset.has_labels else 'no'}"
    )
