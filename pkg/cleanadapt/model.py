"""Two-stream classifier, logit fusion, EMA teacher and checkpoints.

Each stream is a one-hidden-layer tanh classifier over a feature vector.
The appearance and motion streams are fused by summing their logits before
the softmax.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .numerics import (
    DenseMatrix,
    ProbVector,
    ce_softmax_gradient_batch,
    cross_entropy_batch,
    softmax,
)

__all__ = [
    "ModelError",
    "CheckpointError",
    "Stream",
    "StreamMode",
    "StreamClassifier",
    "TwoStreamModel",
    "TeacherStudentPair",
    "CHECKPOINT_MAGIC",
    "DEFAULT_HIDDEN_DIM",
    "init_stream",
    "init_model",
    "forward_stream",
    "stream_logits",
    "fuse_predict",
    "fuse_predict_single",
    "predict_proba",
    "loss_and_gradients",
    "ema_update",
    "clone_model",
    "snapshot",
    "checkpoint_bytes",
    "model_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
]

LOGGER = logging.getLogger("cleanadapt.model")

CHECKPOINT_MAGIC = b"CADP1"
DEFAULT_HIDDEN_DIM = 64
_PARAM_ORDER = ("w_hidden", "b_hidden", "w_out", "b_out")


class ModelError(ValueError):
    """Raised on dimension or architecture mismatches."""


class CheckpointError(ModelError):
    """Raised when a checkpoint file cannot be decoded."""


class Stream(str, Enum):
    """One modality of the two-stream model."""

    APPEARANCE = "appearance"
    MOTION = "motion"


class StreamMode(str, Enum):
    """Which streams contribute to a prediction."""

    TWO_STREAM = "two_stream"
    APPEARANCE_ONLY = "appearance_only"
    MOTION_ONLY = "motion_only"

    def streams(self) -> Tuple[Stream, ...]:
        if self is StreamMode.APPEARANCE_ONLY:
            return (Stream.APPEARANCE,)
        if self is StreamMode.MOTION_ONLY:
            return (Stream.MOTION,)
        return (Stream.APPEARANCE, Stream.MOTION)


@dataclass
class StreamClassifier:
    """``input_dim -> hidden_dim (tanh) -> |C|`` logits.

    Weights are stored as ``(fan_in, fan_out)`` so that a row vector ``x``
    maps through ``x @ w + b``.
    """

    w_hidden: DenseMatrix
    b_hidden: DenseMatrix
    w_out: DenseMatrix
    b_out: DenseMatrix

    def __post_init__(self) -> None:
        self.w_hidden = np.asarray(self.w_hidden, dtype=np.float64)
        self.b_hidden = np.asarray(self.b_hidden, dtype=np.float64)
        self.w_out = np.asarray(self.w_out, dtype=np.float64)
        self.b_out = np.asarray(self.b_out, dtype=np.float64)
        if self.w_hidden.ndim != 2 or self.w_out.ndim != 2:
            raise ModelError("stream weights must be matrices")
        if self.b_hidden.shape != (self.w_hidden.shape[1],):
            raise ModelError(
                f"hidden bias {self.b_hidden.shape} does not match weight {self.w_hidden.shape}"
            )
        if self.w_out.shape[0] != self.w_hidden.shape[1]:
            raise ModelError(
                f"layer chain broken: hidden {self.w_hidden.shape} -> output {self.w_out.shape}"
            )
        if self.b_out.shape != (self.w_out.shape[1],):
            raise ModelError(
                f"output bias {self.b_out.shape} does not match weight {self.w_out.shape}"
            )
        for name, value in self.parameters().items():
            if not np.all(np.isfinite(value)):
                raise ModelError(f"non-finite parameter {name}")

    @property
    def input_dim(self) -> int:
        return int(self.w_hidden.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.w_hidden.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.w_out.shape[1])

    def parameters(self) -> Dict[str, DenseMatrix]:
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def assign(self, params: Mapping[str, DenseMatrix]) -> None:
        for name in _PARAM_ORDER:
            current = getattr(self, name)
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != current.shape:
                raise ModelError(f"shape mismatch for {name}: {value.shape} vs {current.shape}")
            setattr(self, name, value)

    def copy(self) -> "StreamClassifier":
        return StreamClassifier(**{name: value.copy() for name, value in self.parameters().items()})


@dataclass
class TwoStreamModel:
    """Paired appearance and motion classifiers over a shared label set."""

    appearance: StreamClassifier
    motion: StreamClassifier

    def __post_init__(self) -> None:
        if self.appearance.num_classes != self.motion.num_classes:
            raise ModelError(
                "streams disagree on class count: "
                f"{self.appearance.num_classes} vs {self.motion.num_classes}"
            )

    @property
    def num_classes(self) -> int:
        return self.appearance.num_classes

    def stream(self, stream: Stream) -> StreamClassifier:
        return self.appearance if Stream(stream) is Stream.APPEARANCE else self.motion

    def parameters(self) -> Dict[str, DenseMatrix]:
        """Flat ``"<stream>.<param>"`` view of every parameter."""

        flat: Dict[str, DenseMatrix] = {}
        for stream in Stream:
            for name, value in self.stream(stream).parameters().items():
                flat[f"{stream.value}.{name}"] = value
        return flat

    def assign(self, params: Mapping[str, DenseMatrix]) -> None:
        for stream in Stream:
            prefix = f"{stream.value}."
            self.stream(stream).assign(
                {key[len(prefix):]: value for key, value in params.items() if key.startswith(prefix)}
            )

    def architecture(self) -> Tuple[int, int, int, int, int]:
        return (
            self.num_classes,
            self.appearance.input_dim,
            self.appearance.hidden_dim,
            self.motion.input_dim,
            self.motion.hidden_dim,
        )


@dataclass
class TeacherStudentPair:
    """Teacher updated only by EMA of the student; student updated by SGD."""

    teacher: TwoStreamModel
    student: TwoStreamModel
    epsilon: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ModelError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.teacher.architecture() != self.student.architecture():
            raise ModelError("teacher and student architectures differ")

    @classmethod
    def from_source(cls, source_model: TwoStreamModel, epsilon: float) -> "TeacherStudentPair":
        return cls(teacher=clone_model(source_model), student=clone_model(source_model), epsilon=epsilon)


def init_stream(
    input_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator
) -> StreamClassifier:
    """Glorot-uniform weights, zero biases."""

    if min(input_dim, hidden_dim, num_classes) < 1:
        raise ModelError("stream dimensions must be positive")
    hidden_bound = np.sqrt(6.0 / (input_dim + hidden_dim))
    out_bound = np.sqrt(6.0 / (hidden_dim + num_classes))
    return StreamClassifier(
        w_hidden=rng.uniform(-hidden_bound, hidden_bound, size=(input_dim, hidden_dim)),
        b_hidden=np.zeros(hidden_dim),
        w_out=rng.uniform(-out_bound, out_bound, size=(hidden_dim, num_classes)),
        b_out=np.zeros(num_classes),
    )


def init_model(
    dim_a: int,
    dim_m: int,
    num_classes: int,
    rng: np.random.Generator,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> TwoStreamModel:
    appearance = init_stream(dim_a, hidden_dim, num_classes, rng)
    motion = init_stream(dim_m, hidden_dim, num_classes, rng)
    return TwoStreamModel(appearance=appearance, motion=motion)


def forward_stream(
    c: StreamClassifier, x: npt.ArrayLike
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Return ``(logits, penultimate)`` for one vector or a batch of rows."""

    features = np.asarray(x, dtype=np.float64)
    if features.shape[-1] != c.input_dim:
        raise ModelError(
            f"dimension mismatch: stream expects {c.input_dim} features, got {features.shape[-1]}"
        )
    if not np.all(np.isfinite(features)):
        raise ModelError("non-finite input features")
    hidden = np.tanh(features @ c.w_hidden + c.b_hidden)
    logits = hidden @ c.w_out + c.b_out
    return logits, hidden


def stream_logits(
    m: TwoStreamModel,
    x_a: npt.ArrayLike,
    x_m: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> npt.NDArray[np.float64]:
    """Sum of the logits of the streams enabled by ``stream_mode``."""

    mode = StreamMode(stream_mode)
    inputs = {Stream.APPEARANCE: x_a, Stream.MOTION: x_m}
    total: Optional[npt.NDArray[np.float64]] = None
    for stream in mode.streams():
        logits, _ = forward_stream(m.stream(stream), inputs[stream])
        total = logits if total is None else total + logits
    assert total is not None
    return total


def fuse_predict(m: TwoStreamModel, x_a: npt.ArrayLike, x_m: npt.ArrayLike) -> ProbVector:
    """``softmax(f_a(x_a) + f_m(x_m))``."""

    return softmax(stream_logits(m, x_a, x_m, StreamMode.TWO_STREAM))


def fuse_predict_single(m: TwoStreamModel, stream: Stream, x: npt.ArrayLike) -> ProbVector:
    """Softmax of one stream's logits."""

    logits, _ = forward_stream(m.stream(Stream(stream)), x)
    return softmax(logits)


def predict_proba(
    m: TwoStreamModel,
    x_a: npt.ArrayLike,
    x_m: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> ProbVector:
    mode = StreamMode(stream_mode)
    if mode is StreamMode.APPEARANCE_ONLY:
        return fuse_predict_single(m, Stream.APPEARANCE, x_a)
    if mode is StreamMode.MOTION_ONLY:
        return fuse_predict_single(m, Stream.MOTION, x_m)
    return fuse_predict(m, x_a, x_m)


def _stream_backward(
    c: StreamClassifier,
    features: npt.NDArray[np.float64],
    hidden: npt.NDArray[np.float64],
    dlogits: npt.NDArray[np.float64],
) -> Dict[str, DenseMatrix]:
    dhidden = (dlogits @ c.w_out.T) * (1.0 - hidden**2)
    return {
        "w_hidden": features.T @ dhidden,
        "b_hidden": dhidden.sum(axis=0),
        "w_out": hidden.T @ dlogits,
        "b_out": dlogits.sum(axis=0),
    }


def loss_and_gradients(
    m: TwoStreamModel,
    x_a: npt.ArrayLike,
    x_m: npt.ArrayLike,
    labels: npt.ArrayLike,
    stream_mode: StreamMode = StreamMode.TWO_STREAM,
) -> Tuple[float, Dict[str, DenseMatrix]]:
    """Mean cross-entropy of the (fused) prediction and its analytic gradient.

    Gradients cover every parameter of :meth:`TwoStreamModel.parameters`;
    streams disabled by ``stream_mode`` receive zeros.
    """

    mode = StreamMode(stream_mode)
    batch = {
        Stream.APPEARANCE: np.atleast_2d(np.asarray(x_a, dtype=np.float64)),
        Stream.MOTION: np.atleast_2d(np.asarray(x_m, dtype=np.float64)),
    }
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    size = targets.shape[0]
    if size == 0:
        raise ModelError("cannot compute gradients of an empty batch")

    cache: Dict[Stream, Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]] = {}
    fused: Optional[npt.NDArray[np.float64]] = None
    for stream in mode.streams():
        logits, hidden = forward_stream(m.stream(stream), batch[stream])
        cache[stream] = (logits, hidden)
        fused = logits if fused is None else fused + logits
    assert fused is not None

    loss = float(np.mean(cross_entropy_batch(softmax(fused), targets)))
    dlogits = ce_softmax_gradient_batch(fused, targets) / size

    grads: Dict[str, DenseMatrix] = {}
    for stream in Stream:
        classifier = m.stream(stream)
        if stream in cache:
            stream_grads = _stream_backward(classifier, batch[stream], cache[stream][1], dlogits)
        else:
            stream_grads = {name: np.zeros_like(value) for name, value in classifier.parameters().items()}
        for name, value in stream_grads.items():
            grads[f"{stream.value}.{name}"] = value
    return loss, grads


def ema_update(pair: TeacherStudentPair) -> TwoStreamModel:
    """``theta_T <- eps*theta_T + (1-eps)*theta_S`` for every parameter."""

    if pair.teacher.architecture() != pair.student.architecture():
        raise ModelError("teacher and student architectures differ")
    eps = pair.epsilon
    student = pair.student.parameters()
    blended = {
        name: eps * value + (1.0 - eps) * student[name]
        for name, value in pair.teacher.parameters().items()
    }
    pair.teacher.assign(blended)
    return pair.teacher


def clone_model(m: TwoStreamModel) -> TwoStreamModel:
    """Deep copy; the clone shares no arrays with ``m``."""

    return TwoStreamModel(appearance=m.appearance.copy(), motion=m.motion.copy())


snapshot = clone_model


def _iter_parameter_blocks(m: TwoStreamModel) -> Iterator[DenseMatrix]:
    for stream in Stream:
        classifier = m.stream(stream)
        for name in _PARAM_ORDER:
            yield getattr(classifier, name)


def checkpoint_bytes(m: TwoStreamModel) -> bytes:
    """Serialise ``m``.

    Layout: ``b"CADP1"``, then little-endian u32 ``|C|``, appearance
    ``input_dim``, ``hidden_dim``, motion ``input_dim``, ``hidden_dim``, then
    every parameter as little-endian float64 in layer order (appearance
    ``w_hidden``, ``b_hidden``, ``w_out``, ``b_out``, then motion), matrices
    row-major.
    """

    header = CHECKPOINT_MAGIC + struct.pack("<5I", *m.architecture())
    body = b"".join(
        np.ascontiguousarray(block, dtype="<f8").tobytes() for block in _iter_parameter_blocks(m)
    )
    return header + body


def model_from_bytes(payload: bytes) -> TwoStreamModel:
    if payload[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a CADP1 checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    header_size = struct.calcsize("<5I")
    if len(payload) < offset + header_size:
        raise CheckpointError("truncated checkpoint header")
    num_classes, dim_a, hidden_a, dim_m, hidden_m = struct.unpack_from("<5I", payload, offset)
    offset += header_size

    shapes = {
        Stream.APPEARANCE: ((dim_a, hidden_a), (hidden_a,), (hidden_a, num_classes), (num_classes,)),
        Stream.MOTION: ((dim_m, hidden_m), (hidden_m,), (hidden_m, num_classes), (num_classes,)),
    }
    expected = offset + 8 * sum(int(np.prod(shape)) for group in shapes.values() for shape in group)
    if len(payload) < expected:
        raise CheckpointError(f"truncated checkpoint: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CheckpointError(f"trailing bytes in checkpoint: {len(payload) - expected}")

    streams: Dict[Stream, StreamClassifier] = {}
    for stream in Stream:
        blocks = []
        for shape in shapes[stream]:
            count = int(np.prod(shape))
            block = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            blocks.append(block.astype(np.float64).reshape(shape))
            offset += 8 * count
        try:
            streams[stream] = StreamClassifier(*blocks)
        except ModelError as exc:
            raise CheckpointError(f"invalid {stream.value} stream: {exc}") from exc
    return TwoStreamModel(appearance=streams[Stream.APPEARANCE], motion=streams[Stream.MOTION])


def save_checkpoint(m: TwoStreamModel, path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(checkpoint_bytes(m))
    LOGGER.debug("Wrote checkpoint %s", target)
    return target


def load_checkpoint(path: Path | str) -> TwoStreamModel:
    return model_from_bytes(Path(path).read_bytes())
