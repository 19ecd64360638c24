"""
CleanAdapt Configuration
Version: 1.0.0
Date: 2026-10-18
Owner: Platform.Engineering

Two layers: process-wide :class:`RuntimeSettings` from the environment (with
``.env`` support) and per-experiment :class:`ExperimentConfig` parsed from a
``key = value`` text file.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Mapping, Optional, Tuple

from dotenv import load_dotenv

from .adapt import AdaptationError, AdaptConfig, AdaptMode
from .data import AugmentationSpec, DatasetError, ShiftSpec, diagonal_translation
from .model import StreamMode
from .numerics import LrSchedule, NumericsError

load_dotenv()

__all__ = [
    "ConfigError",
    "RuntimeSettings",
    "ExperimentConfig",
    "CONFIG_SCHEMA",
    "parse_config_text",
    "load_config",
]


class ConfigError(ValueError):
    """Raised for any configuration problem; the message names the key or line."""


def _checked(factory: Callable[..., AdaptConfig], **kwargs: Any) -> AdaptConfig:
    try:
        return factory(**kwargs)
    except AdaptationError as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------------
# Environment


_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass(frozen=True)
class RuntimeSettings:
    """Process-wide settings that are not part of an experiment."""

    threads: int = 1
    ledger_path: Optional[Path] = None
    log_level: str = "INFO"

    @staticmethod
    def from_env(environ: Optional[Mapping[str, str]] = None) -> "RuntimeSettings":
        """Read ``CLEANADAPT_THREADS``, ``CLEANADAPT_LEDGER_PATH`` and ``CLEANADAPT_LOG_LEVEL``."""

        env = os.environ if environ is None else environ
        raw_threads = env.get("CLEANADAPT_THREADS", "1")
        try:
            threads = int(raw_threads)
        except ValueError as exc:
            raise ConfigError(f"CLEANADAPT_THREADS must be an integer, got {raw_threads!r}") from exc
        if threads < 1:
            raise ConfigError(f"CLEANADAPT_THREADS must be >= 1, got {threads}")
        log_level = env.get("CLEANADAPT_LOG_LEVEL", "INFO").upper()
        if log_level not in _LOG_LEVELS:
            raise ConfigError(f"CLEANADAPT_LOG_LEVEL must be one of {', '.join(_LOG_LEVELS)}")
        ledger = env.get("CLEANADAPT_LEDGER_PATH")
        return RuntimeSettings(
            threads=threads,
            ledger_path=Path(ledger).resolve() if ledger else None,
            log_level=log_level,
        )


# ----------------------------------------------------------------------
# Value parsers


def _parse_int(raw: str) -> int:
    return int(raw)


def _parse_seed(raw: str) -> int:
    value = int(raw)
    if not 0 <= value < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


def _parse_float(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    return value


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_text(raw: str) -> str:
    if not raw:
        raise ValueError("value must not be empty")
    return raw


def _parse_path(raw: str) -> Path:
    return Path(_parse_text(raw))


def _split(raw: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in raw.split(",") if item.strip())


def _parse_float_list(raw: str) -> Tuple[float, ...]:
    return tuple(_parse_float(item) for item in _split(raw))


def _parse_int_list(raw: str) -> Tuple[int, ...]:
    return tuple(int(item) for item in _split(raw))


def _parse_path_list(raw: str) -> Tuple[Path, ...]:
    paths = tuple(Path(item) for item in _split(raw))
    if not paths:
        raise ValueError("expected at least one path")
    return paths


def _parse_mode(raw: str) -> AdaptMode:
    return AdaptMode(raw)


def _parse_stream_mode(raw: str) -> StreamMode:
    return StreamMode(raw)


_MISSING = object()

# key -> (parser, default); _MISSING marks keys a subcommand must supply.
CONFIG_SCHEMA: Mapping[str, Tuple[Callable[[str], Any], Any]] = {
    "seed": (_parse_seed, 0),
    "output.dir": (_parse_path, Path("out")),
    "shift.num_classes": (_parse_int, _MISSING),
    "shift.source_per_class": (_parse_int, _MISSING),
    "shift.target_per_class": (_parse_int, _MISSING),
    "shift.val_per_class": (_parse_int, 0),
    "shift.latent_dim": (_parse_int, 8),
    "shift.dim_a": (_parse_int, 16),
    "shift.dim_m": (_parse_int, 16),
    "shift.rotation": (_parse_float, 0.0),
    "shift.translation": (_parse_float_list, ()),
    "shift.noise_std": (_parse_float, 0.5),
    "shift.view_noise_std": (_parse_float, 0.1),
    "shift.mirror_probability": (_parse_float, 0.5),
    "data.source": (_parse_path, None),
    "data.target": (_parse_path, None),
    "data.target_val": (_parse_path, None),
    "model.hidden_dim": (_parse_int, 64),
    "model.checkpoint": (_parse_path, None),
    "pretrain.epochs": (_parse_int, 30),
    "pretrain.batch_size": (_parse_int, 32),
    "pretrain.lr": (_parse_float, 1e-2),
    "pretrain.lr_decay_epochs": (_parse_int_list, (10, 20)),
    "pretrain.lr_decay_factor": (_parse_float, 0.1),
    "pretrain.momentum": (_parse_float, 0.9),
    "adapt.mode": (_parse_mode, AdaptMode.CLEANADAPT),
    "adapt.stream_mode": (_parse_stream_mode, StreamMode.TWO_STREAM),
    "adapt.tau": (_parse_float, 0.6),
    "adapt.epsilon": (_parse_float, 0.99),
    "adapt.epochs": (_parse_int, 30),
    "adapt.batch_size": (_parse_int, 32),
    "adapt.lr": (_parse_float, 1e-2),
    "adapt.lr_decay_epochs": (_parse_int_list, ()),
    "adapt.lr_decay_factor": (_parse_float, 0.1),
    "adapt.momentum": (_parse_float, 0.9),
    "augment.weak_noise_std": (_parse_float, 0.05),
    "augment.flip_probability": (_parse_float, 0.5),
    "augment.strong_noise_std": (_parse_float, 0.2),
    "augment.dropout_fraction": (_parse_float, 0.3),
    "augment.scale_low": (_parse_float, 0.8),
    "augment.scale_high": (_parse_float, 1.2),
    "augment.transforms_per_strong": (_parse_int, 2),
    "eval.retrieval": (_parse_bool, False),
    "eval.target_supervised": (_parse_bool, False),
    "sweep.taus": (_parse_float_list, _MISSING),
    "retrieval.checkpoint": (_parse_path_list, _MISSING),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings.

    ``values`` holds only the keys given explicitly; lookups fall back to the
    schema defaults.
    """

    values: Mapping[str, Any]
    origin: str = "<config>"

    @property
    def explicit_keys(self) -> FrozenSet[str]:
        return frozenset(self.values)

    def get(self, key: str) -> Any:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown key: {key}")
        if key in self.values:
            return self.values[key]
        default = CONFIG_SCHEMA[key][1]
        if default is _MISSING:
            raise ConfigError(f"missing required key: {key}")
        return default

    def require(self, *keys: str) -> None:
        for key in keys:
            self.get(key)

    def with_overrides(
        self, seed: Optional[int] = None, output_dir: Optional[Path | str] = None
    ) -> "ExperimentConfig":
        values = dict(self.values)
        if seed is not None:
            try:
                values["seed"] = _parse_seed(str(seed))
            except ValueError as exc:
                raise ConfigError(f"invalid value for seed: {exc}") from exc
        if output_dir is not None:
            values["output.dir"] = Path(output_dir)
        return replace(self, values=values)

    @property
    def seed(self) -> int:
        return int(self.get("seed"))

    @property
    def output_dir(self) -> Path:
        return Path(self.get("output.dir"))

    def shift_spec(self) -> ShiftSpec:
        self.require("shift.num_classes", "shift.source_per_class", "shift.target_per_class")
        latent_dim = int(self.get("shift.latent_dim"))
        translation = tuple(self.get("shift.translation"))
        if len(translation) == 1 and latent_dim > 1:
            translation = diagonal_translation(translation[0], latent_dim)
        try:
            return self._build_shift_spec(latent_dim, translation)
        except DatasetError as exc:
            raise ConfigError(str(exc)) from exc

    def _build_shift_spec(self, latent_dim: int, translation: Tuple[float, ...]) -> ShiftSpec:
        return ShiftSpec(
            num_classes=self.get("shift.num_classes"),
            source_per_class=self.get("shift.source_per_class"),
            target_per_class=self.get("shift.target_per_class"),
            val_per_class=self.get("shift.val_per_class"),
            latent_dim=latent_dim,
            dim_a=self.get("shift.dim_a"),
            dim_m=self.get("shift.dim_m"),
            rotation=self.get("shift.rotation"),
            translation=translation,
            noise_std=self.get("shift.noise_std"),
            view_noise_std=self.get("shift.view_noise_std"),
            mirror_probability=self.get("shift.mirror_probability"),
            seed=self.seed,
        )

    def augmentation_spec(self) -> AugmentationSpec:
        try:
            return self._build_augmentation_spec()
        except DatasetError as exc:
            raise ConfigError(str(exc)) from exc

    def _build_augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec(
            weak_noise_std=self.get("augment.weak_noise_std"),
            flip_probability=self.get("augment.flip_probability"),
            strong_noise_std=self.get("augment.strong_noise_std"),
            dropout_fraction=self.get("augment.dropout_fraction"),
            scale_range=(self.get("augment.scale_low"), self.get("augment.scale_high")),
            transforms_per_strong=self.get("augment.transforms_per_strong"),
        )

    def _schedule(self, prefix: str) -> LrSchedule:
        try:
            return LrSchedule(
                base_lr=self.get(f"{prefix}.lr"),
                decay_epochs=self.get(f"{prefix}.lr_decay_epochs"),
                decay_factor=self.get(f"{prefix}.lr_decay_factor"),
            )
        except NumericsError as exc:
            raise ConfigError(f"invalid {prefix} learning-rate schedule: {exc}") from exc

    def pretrain_config(self) -> AdaptConfig:
        return _checked(
            AdaptConfig,
            epochs=self.get("pretrain.epochs"),
            batch_size=self.get("pretrain.batch_size"),
            lr_schedule=self._schedule("pretrain"),
            momentum=self.get("pretrain.momentum"),
            seed=self.seed,
            hidden_dim=self.get("model.hidden_dim"),
        )

    def adapt_config(self, tau: Optional[float] = None) -> AdaptConfig:
        return _checked(
            AdaptConfig,
            tau=self.get("adapt.tau") if tau is None else tau,
            epsilon=self.get("adapt.epsilon"),
            epochs=self.get("adapt.epochs"),
            batch_size=self.get("adapt.batch_size"),
            lr_schedule=self._schedule("adapt"),
            momentum=self.get("adapt.momentum"),
            augmentation=self.augmentation_spec(),
            seed=self.seed,
            mode=self.get("adapt.mode"),
            stream_mode=self.get("adapt.stream_mode"),
            hidden_dim=self.get("model.hidden_dim"),
        )

    def echo(self) -> Dict[str, str]:
        """Explicit keys rendered back as text, sorted, for run summaries."""

        def render(value: Any) -> str:
            if isinstance(value, (tuple, list)):
                return ",".join(render(item) for item in value)
            if isinstance(value, (AdaptMode, StreamMode)):
                return value.value
            if isinstance(value, bool):
                return "true" if value else "false"
            return str(value)

        return {key: render(self.values[key]) for key in sorted(self.values)}


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""

    values: Dict[str, Any] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{line_number}: expected 'key = value', got {line!r}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{line_number}: missing key before '='")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{origin}:{line_number}: unknown key: {key}")
        if key in values:
            raise ConfigError(f"{origin}:{line_number}: duplicate key: {key}")
        parser = CONFIG_SCHEMA[key][0]
        try:
            values[key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{line_number}: invalid value for {key}: {exc}") from exc
    return ExperimentConfig(values=values, origin=origin)


def load_config(path: Path | str) -> ExperimentConfig:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {source}") from exc
    return parse_config_text(text, origin=str(source))
