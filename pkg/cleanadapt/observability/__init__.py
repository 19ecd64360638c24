"""Run ledger for CleanAdapt experiments."""

from .ledger import LedgerEvent, LedgerRecord, RunLedger, generate_run_id, load_ledger

__all__ = ["LedgerEvent", "LedgerRecord", "RunLedger", "generate_run_id", "load_ledger"]
