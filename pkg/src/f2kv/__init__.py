"""f2-kv: embedded concurrent key-value store with tiered record logs.

Write-hot records live in a memory-spanning hot log behind an in-memory
latch-free hash index; write-cold records are compacted into a
disk-resident cold log indexed by a two-level chunked index; read-hot
disk records are replicated into an in-memory read cache spliced into
the hash chains.  Epoch protection coordinates page reuse and log
truncation without blocking user operations.
"""

from .errors import (AlignmentError, AllocationPending, CapacityError,
                     DeviceError, F2Error, StaleAddressError)
from .store import F2Store, Metrics, Status, StoreConfig

__all__ = [
    "F2Store",
    "Metrics",
    "Status",
    "StoreConfig",
    "F2Error",
    "AlignmentError",
    "AllocationPending",
    "CapacityError",
    "DeviceError",
    "StaleAddressError",
]

__version__ = "0.1.0"
