"""Deterministic dense numerics for the adaptation engine.

All arithmetic runs in 64-bit floating point. Randomness comes exclusively
from :class:`RngState`, which derives independent Philox (counter-based,
4x64) streams from one seed so that every consumer (parameter init, data
shuffling, augmentation, data generation) is reproducible on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np
import numpy.typing as npt

__all__ = [
    "DenseMatrix",
    "ProbVector",
    "NumericsError",
    "LOG_FLOOR",
    "LrSchedule",
    "RngState",
    "softmax",
    "cross_entropy",
    "cross_entropy_batch",
    "ce_softmax_gradient",
    "ce_softmax_gradient_batch",
    "stable_argmax",
    "sgd_momentum_step",
    "lr_at",
]

DenseMatrix = npt.NDArray[np.float64]
ProbVector = npt.NDArray[np.float64]

LOG_FLOOR = 1e-12

_PURPOSE_CODES: Mapping[str, int] = {
    "init": 1,
    "shuffle": 2,
    "augment": 3,
    "data": 4,
}


class NumericsError(ValueError):
    """Raised when a numeric primitive receives invalid input."""


def _as_float_array(values: npt.ArrayLike) -> npt.NDArray[np.float64]:
    return np.asarray(values, dtype=np.float64)


def softmax(logits: npt.ArrayLike) -> ProbVector:
    """Return the softmax over the last axis using max subtraction.

    Accepts a single logit vector or a ``(n, |C|)`` batch.
    """

    values = _as_float_array(logits)
    if values.ndim == 0 or values.shape[-1] < 1:
        raise NumericsError("logits must contain at least one class")
    if not np.all(np.isfinite(values)):
        raise NumericsError("non-finite logits")
    shifted = values - np.max(values, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def _check_label(label: int, num_classes: int) -> int:
    index = int(label)
    if not 0 <= index < num_classes:
        raise NumericsError(f"label {index} out of range for {num_classes} classes")
    return index


def cross_entropy(p: npt.ArrayLike, label: int) -> float:
    """Return ``-ln(p[label] + LOG_FLOOR)``."""

    probs = _as_float_array(p)
    index = _check_label(label, probs.shape[-1])
    return float(-np.log(probs[index] + LOG_FLOOR))


def cross_entropy_batch(
    probs: npt.ArrayLike, labels: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Per-row cross-entropy for a ``(n, |C|)`` probability batch."""

    matrix = _as_float_array(probs)
    targets = np.asarray(labels, dtype=np.int64)
    if matrix.ndim != 2 or targets.shape != (matrix.shape[0],):
        raise NumericsError(
            f"shape mismatch: probs {matrix.shape} vs labels {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= matrix.shape[1]):
        raise NumericsError(f"labels out of range for {matrix.shape[1]} classes")
    picked = matrix[np.arange(matrix.shape[0]), targets]
    return -np.log(picked + LOG_FLOOR)


def ce_softmax_gradient(logits: npt.ArrayLike, label: int) -> npt.NDArray[np.float64]:
    """Gradient of ``cross_entropy(softmax(logits), label)`` w.r.t. the logits."""

    probs = softmax(logits)
    index = _check_label(label, probs.shape[-1])
    grad = probs.copy()
    grad[index] -= 1.0
    return grad


def ce_softmax_gradient_batch(
    logits: npt.ArrayLike, labels: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Row-wise ``softmax(logits) - one_hot(labels)`` for a batch."""

    probs = softmax(logits)
    targets = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise NumericsError(
            f"shape mismatch: logits {probs.shape} vs labels {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise NumericsError(f"labels out of range for {probs.shape[1]} classes")
    probs[np.arange(probs.shape[0]), targets] -= 1.0
    return probs


def stable_argmax(values: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """Argmax over the last axis; ties resolve to the lowest index."""

    return np.argmax(_as_float_array(values), axis=-1).astype(np.int64)


def sgd_momentum_step(
    params: Mapping[str, DenseMatrix],
    grads: Mapping[str, DenseMatrix],
    velocity: Mapping[str, DenseMatrix],
    lr: float,
    momentum: float,
) -> Tuple[Dict[str, DenseMatrix], Dict[str, DenseMatrix]]:
    """Apply ``v <- momentum*v + g`` then ``theta <- theta - lr*v``.

    Returns fresh ``(params, velocity)`` mappings; inputs are left untouched.
    Parameters are visited in sorted-name order.
    """

    if lr < 0:
        raise NumericsError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise NumericsError(f"momentum must lie in [0, 1), got {momentum}")
    if set(params) != set(grads) or set(params) != set(velocity):
        raise NumericsError("parameter, gradient and velocity names differ")

    new_params: Dict[str, DenseMatrix] = {}
    new_velocity: Dict[str, DenseMatrix] = {}
    for name in sorted(params):
        theta = _as_float_array(params[name])
        grad = _as_float_array(grads[name])
        vel = _as_float_array(velocity[name])
        if theta.shape != grad.shape or theta.shape != vel.shape:
            raise NumericsError(
                f"shape mismatch for {name!r}: {theta.shape}, {grad.shape}, {vel.shape}"
            )
        updated_velocity = momentum * vel + grad
        new_velocity[name] = updated_velocity
        new_params[name] = theta - lr * updated_velocity
    return new_params, new_velocity


@dataclass(frozen=True)
class LrSchedule:
    """Step schedule: multiply ``base_lr`` by ``decay_factor`` at each decay epoch."""

    base_lr: float
    decay_epochs: Tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        if not self.base_lr >= 0:
            raise NumericsError(f"base_lr must be non-negative, got {self.base_lr}")
        if not self.decay_factor > 0:
            raise NumericsError(f"decay_factor must be positive, got {self.decay_factor}")
        epochs = tuple(int(epoch) for epoch in self.decay_epochs)
        if any(later <= earlier for earlier, later in zip(epochs, epochs[1:])):
            raise NumericsError(f"decay_epochs must be strictly increasing: {epochs}")
        object.__setattr__(self, "decay_epochs", epochs)

    def at(self, epoch: int) -> float:
        return lr_at(self, epoch)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate in effect during ``epoch``."""

    if epoch < 0:
        raise NumericsError(f"epoch must be non-negative, got {epoch}")
    applied = sum(1 for boundary in schedule.decay_epochs if boundary <= epoch)
    return schedule.base_lr * math.pow(schedule.decay_factor, applied)


@dataclass(frozen=True)
class RngState:
    """Root of all randomness for one experiment.

    Every call to :meth:`stream` with the same ``(purpose, *keys)`` returns a
    generator positioned at the start of the same Philox stream.
    """

    seed: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise NumericsError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def stream(self, purpose: str, *keys: int) -> np.random.Generator:
        try:
            code = _PURPOSE_CODES[purpose]
        except KeyError as exc:
            raise NumericsError(f"unknown rng purpose {purpose!r}") from exc
        spawn_key = (code, *(int(key) for key in keys))
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(sequence))
