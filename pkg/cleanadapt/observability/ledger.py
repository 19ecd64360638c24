"""
JSONL Run Ledger
Version: 1.0.0
Date: 2026-10-18
Owner: Platform.Engineering
Append-only record of experiment events
"""
from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping, MutableMapping, Optional

import numpy as np

__all__ = ["RunLedger", "LedgerRecord", "LedgerEvent", "generate_run_id", "load_ledger"]


class LedgerEvent(str, Enum):
    DATA_GENERATED = "data.generated"
    PRETRAIN_EPOCH = "pretrain.epoch"
    PRETRAIN_COMPLETED = "pretrain.completed"
    ADAPT_EPOCH = "adapt.epoch"
    ADAPT_COMPLETED = "adapt.completed"
    SWEEP_ROW = "sweep.row"
    RETRIEVAL_COMPLETED = "retrieval.completed"


class LedgerRecord(dict):
    """Typed mapping representing a single ledger entry."""

    timestamp: str
    event_type: str
    run_id: Optional[str]


def generate_run_id() -> str:
    return f"run-{uuid.uuid4()}"


def _json_default(value: Any) -> Any:  # pragma: no cover - formatting helper
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def _normalise_mapping(data: Mapping[Any, Any]) -> MutableMapping[str, Any]:
    normalised: MutableMapping[str, Any] = {}
    for key, value in data.items():
        name = key.value if isinstance(key, Enum) else str(key)
        if isinstance(value, Mapping):
            normalised[name] = _normalise_mapping(value)
        elif isinstance(value, (list, tuple)):
            normalised[name] = [
                _normalise_mapping(item) if isinstance(item, Mapping) else item for item in value
            ]
        else:
            normalised[name] = value
    return normalised


@dataclass
class RunLedger:
    """Append-only JSONL ledger; one object per event, in write order.

    The ledger is the only artifact of a run that carries wall-clock time.
    """

    path: Path | str
    run_id: str = field(default_factory=generate_run_id)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        self.path = Path(self.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, event_type: LedgerEvent | str, payload: Optional[Mapping[str, Any]] = None) -> LedgerRecord:
        event = LedgerEvent(event_type)
        record = LedgerRecord(
            timestamp=datetime.now(timezone.utc).isoformat(),
            event_type=event.value,
            run_id=self.run_id,
        )
        if payload:
            record["payload"] = _normalise_mapping(payload)

        serialised = json.dumps(record, ensure_ascii=False, sort_keys=True, default=_json_default)
        with self._lock:
            with Path(self.path).open("a", encoding="utf-8") as handle:
                handle.write(serialised)
                handle.write("\n")
        return record

    def iter_entries(
        self, event_type: Optional[LedgerEvent | str] = None, limit: Optional[int] = None
    ) -> Iterator[LedgerRecord]:
        """Yield recorded entries in insertion order, optionally filtered by event type."""

        path = Path(self.path)
        if not path.exists():
            return
        wanted = None if event_type is None else LedgerEvent(event_type).value
        count = 0
        with path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if limit is not None and count >= limit:
                    break
                line = line.strip()
                if not line:
                    continue
                entry = LedgerRecord(json.loads(line))
                if wanted is not None and entry.get("event_type") != wanted:
                    continue
                count += 1
                yield entry


def load_ledger(path: Path | str, run_id: Optional[str] = None) -> RunLedger:
    if run_id is None:
        return RunLedger(path)
    return RunLedger(path, run_id=run_id)
