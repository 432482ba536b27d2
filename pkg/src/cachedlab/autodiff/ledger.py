"""Activation-memory ledger.

Counts the scalars held alive by graph nodes for their backward rules. The
count is the package's stand-in for accelerator memory: every memory claim
made by the trainers is a statement about this ledger.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field


class LedgerError(RuntimeError):
    pass


@dataclass
class LedgerScope:
    label: str
    entry: int
    peak: int
    closed: bool = False
    _ledger: "MemoryLedger | None" = field(default=None, repr=False)

    def close(self) -> int:
        if self._ledger is None:
            raise LedgerError(f"scope {self.label!r} was never opened")
        self._ledger.close_scope(self)
        return self.peak

    def __enter__(self) -> "LedgerScope":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class MemoryLedger:
    """Running and peak count of live saved-activation scalars."""

    def __init__(self, record_events: bool = True):
        self.live_scalars = 0
        self.peak_scalars = 0
        self.record_events = record_events
        self.events: list[tuple[str, int]] = []
        self._scopes: list[LedgerScope] = []
        self._lock = threading.Lock()

    def charge(self, tag: str, n: int) -> None:
        if n == 0:
            return
        with self._lock:
            self.live_scalars += n
            if self.record_events:
                self.events.append((tag, n))
            live = self.live_scalars
            if live > self.peak_scalars:
                self.peak_scalars = live
            for scope in self._scopes:
                if live > scope.peak:
                    scope.peak = live

    def release(self, tag: str, n: int) -> None:
        if n == 0:
            return
        with self._lock:
            if n > self.live_scalars:
                raise LedgerError(f"release of {n} scalars ({tag}) exceeds live count {self.live_scalars}")
            self.live_scalars -= n
            if self.record_events:
                self.events.append((tag, -n))

    def open_scope(self, label: str) -> LedgerScope:
        with self._lock:
            scope = LedgerScope(label, self.live_scalars, self.live_scalars, _ledger=self)
            self._scopes.append(scope)
        return scope

    def close_scope(self, scope: LedgerScope) -> int:
        with self._lock:
            if scope.closed or scope not in self._scopes:
                raise LedgerError(f"scope {scope.label!r} is not open")
            self._scopes.remove(scope)
            scope.closed = True
        return scope.peak

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_scalars = self.live_scalars

    def compact(self) -> None:
        """Collapse the event log into one entry; keeps the delta sum equal to the live count."""
        with self._lock:
            self.events = [("compacted", self.live_scalars)] if self.live_scalars else []

    def event_sum(self) -> int:
        return sum(delta for _, delta in self.events)


LEDGER = MemoryLedger()


def ledger_scope(label: str, ledger: MemoryLedger | None = None) -> LedgerScope:
    """Open a measurement scope; use as a context manager or close it explicitly."""
    return (ledger or LEDGER).open_scope(label)


def ledger_peak(handle: LedgerScope) -> int:
    return handle.peak
