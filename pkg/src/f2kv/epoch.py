"""Lazy cross-thread synchronization via a global epoch counter.

Threads protect themselves by copying the global epoch into a per-thread
slot and refreshing it periodically.  Destructive steps (page reuse, log
truncation) are registered as trigger actions against the current epoch
and run only once every protected thread has observed a newer epoch, so
no thread can still be using the memory or address range being retired.

An epoch `e` is *safe* when every protected thread's local epoch is
greater than `e`; with no protected threads, `global - 1` is safe.
"""

from __future__ import annotations

import threading
from typing import Callable

from ._atomics import AtomicU64, AtomicU64Array
from .errors import CapacityError

SLOT_COUNT = 64          # one cache-line-sized slot per thread
DRAIN_CAPACITY = 256
REFRESH_INTERVAL = 256   # callers must refresh at least every K user ops

_CLAIMED = (1 << 64) - 1  # drain slot is being registered or executed


class EpochFramework:
    """Global epoch counter, per-thread slots, and a deferred-action list."""

    def __init__(self):
        self._global = AtomicU64(1)
        self._slots = AtomicU64Array(SLOT_COUNT)
        self._drain_epochs = AtomicU64Array(DRAIN_CAPACITY)
        self._drain_actions: list[Callable[[], None] | None] = [None] * DRAIN_CAPACITY
        self._pending = AtomicU64(0)
        self._tls = threading.local()
        self.actions_registered = AtomicU64(0)
        self.actions_fired = AtomicU64(0)

    # -- protection --------------------------------------------------

    def protect(self) -> int:
        """Enter (or refresh) protection; returns the new local epoch."""
        slot = getattr(self._tls, "slot", None)
        epoch = self._global.load()
        if slot is None:
            slot = self._claim_slot(epoch)
            self._tls.slot = slot
        else:
            self._slots.store(slot, epoch)
        if self._pending.load():
            self.drain()
        return epoch

    def refresh(self) -> int:
        return self.protect()

    def refresh_if_stale(self) -> None:
        """Cheap per-op refresh: only touches the slot when the epoch moved."""
        slot = getattr(self._tls, "slot", None)
        if slot is None:
            self.protect()
            return
        epoch = self._global.load()
        if self._slots.load(slot) != epoch:
            self._slots.store(slot, epoch)
        if self._pending.load():
            self.drain()

    def unprotect(self) -> None:
        slot = getattr(self._tls, "slot", None)
        if slot is not None:
            self._slots.store(slot, 0)
            self._tls.slot = None

    def is_protected(self) -> bool:
        slot = getattr(self._tls, "slot", None)
        return slot is not None and self._slots.load(slot) != 0

    def _claim_slot(self, epoch: int) -> int:
        for i in range(SLOT_COUNT):
            if self._slots.load(i) == 0 and self._slots.compare_exchange(i, 0, epoch):
                return i
        raise CapacityError(f"all {SLOT_COUNT} epoch slots are in use")

    # -- epoch advancement -------------------------------------------

    def current(self) -> int:
        return self._global.load()

    def safe_epoch(self) -> int:
        """Largest epoch e with every protected thread's local epoch > e."""
        lowest = 0
        for i in range(SLOT_COUNT):
            local = self._slots.load(i)
            if local and (lowest == 0 or local < lowest):
                lowest = local
        if lowest == 0:
            return self._global.load() - 1
        return lowest - 1

    def bump(self) -> int:
        return self._global.fetch_add(1) + 1

    def bump_with_action(self, action: Callable[[], None]) -> int:
        """Advance the global epoch; run action once the old epoch is safe."""
        prior = self._global.fetch_add(1)
        self._register(prior, action)
        self.drain()
        return prior + 1

    def _register(self, epoch: int, action: Callable[[], None]) -> None:
        while True:
            for i in range(DRAIN_CAPACITY):
                if self._drain_epochs.load(i) == 0 and \
                        self._drain_epochs.compare_exchange(i, 0, _CLAIMED):
                    self._drain_actions[i] = action
                    self._drain_epochs.store(i, epoch)
                    self._pending.fetch_add(1)
                    self.actions_registered.fetch_add(1)
                    return
            # List full: drain, then run the oldest safe action ourselves.
            self.drain()
            if not self._run_oldest_safe():
                slot = getattr(self._tls, "slot", None)
                if slot is not None and self._slots.load(slot) != 0:
                    self._slots.store(slot, self._global.load())

    def _run_oldest_safe(self) -> bool:
        safe = self.safe_epoch()
        oldest_i = -1
        oldest_e = 0
        for i in range(DRAIN_CAPACITY):
            e = self._drain_epochs.load(i)
            if 0 < e <= safe and e != _CLAIMED and (oldest_i < 0 or e < oldest_e):
                oldest_i, oldest_e = i, e
        if oldest_i < 0:
            return False
        return self._fire(oldest_i, oldest_e)

    # -- draining ----------------------------------------------------

    def drain(self) -> int:
        """Run every registered action whose epoch is now safe."""
        if not self._pending.load():
            return 0
        safe = self.safe_epoch()
        fired = 0
        for i in range(DRAIN_CAPACITY):
            e = self._drain_epochs.load(i)
            if 0 < e <= safe and e != _CLAIMED and self._fire(i, e):
                fired += 1
        return fired

    def _fire(self, i: int, epoch: int) -> bool:
        if not self._drain_epochs.compare_exchange(i, epoch, _CLAIMED):
            return False
        action = self._drain_actions[i]
        self._drain_actions[i] = None
        self._pending.fetch_add(-1)
        self._drain_epochs.store(i, 0)
        self.actions_fired.fetch_add(1)
        action()
        return True

    def drain_all(self, spin_limit: int = 10_000) -> None:
        """Testing/shutdown helper: drain until nothing is pending.

        Only completes if no other thread keeps epochs pinned.
        """
        for _ in range(spin_limit):
            if not self._pending.load():
                return
            self.drain()
        raise RuntimeError("pending epoch actions never became safe")

    def protected_locals(self) -> list[int]:
        """Snapshot of all nonzero per-thread epochs (for assertions)."""
        return [e for e in self._slots.snapshot() if e]
