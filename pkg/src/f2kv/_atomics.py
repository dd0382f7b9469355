"""Atomic 64-bit primitives for the latch-free protocols.

CPython's GIL makes single reads and writes of array items and attributes
atomic, but compare-and-swap needs a read-modify-write, so CAS goes
through a small stripe of locks (hashed by slot).  Loads and stores stay
plain and never block.  All index, marker, and epoch updates in the store
are built from these two classes, keeping the concurrency protocols
identical to what a native CAS would give.
"""

from __future__ import annotations

import threading
from array import array

_STRIPES = 64
_STRIPE_MASK = _STRIPES - 1


class AtomicU64:
    """A single 64-bit atomic word with CAS and fetch-add."""

    __slots__ = ("_value", "_lock")

    def __init__(self, initial: int = 0):
        self._value = initial
        self._lock = threading.Lock()

    def load(self) -> int:
        return self._value

    def store(self, value: int) -> None:
        self._value = value

    def compare_exchange(self, expected: int, desired: int) -> bool:
        with self._lock:
            if self._value == expected:
                self._value = desired
                return True
            return False

    def fetch_add(self, delta: int) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def max_update(self, value: int) -> int:
        """Monotonic advance: store value if larger, return the winner."""
        with self._lock:
            if value > self._value:
                self._value = value
            return self._value


class AtomicU64Array:
    """Flat array of 64-bit words with per-slot CAS.

    Backed by array('Q') so memory cost is exactly 8 bytes per slot,
    which the index memory accounting relies on.
    """

    __slots__ = ("_slots", "_locks")

    def __init__(self, length: int):
        self._slots = array("Q", bytes(8 * length))
        self._locks = [threading.Lock() for _ in range(_STRIPES)]

    def __len__(self) -> int:
        return len(self._slots)

    def load(self, i: int) -> int:
        return self._slots[i]

    def store(self, i: int, value: int) -> None:
        self._slots[i] = value

    def compare_exchange(self, i: int, expected: int, desired: int) -> bool:
        with self._locks[i & _STRIPE_MASK]:
            if self._slots[i] == expected:
                self._slots[i] = desired
                return True
            return False

    def snapshot(self) -> list[int]:
        return list(self._slots)

    def nbytes(self) -> int:
        return 8 * len(self._slots)


class StripedLocks:
    """Fixed stripe of locks keyed by an integer (record address).

    Used only to make in-place record mutations (read-modify-write of a
    value in the mutable region) atomic with respect to each other.
    """

    __slots__ = ("_locks",)

    def __init__(self, stripes: int = 128):
        self._locks = [threading.Lock() for _ in range(stripes)]

    def for_key(self, key: int) -> threading.Lock:
        return self._locks[(key >> 3) % len(self._locks)]
