"""Exception types shared across the store's components."""


class F2Error(Exception):
    """Base class for all store errors."""


class AlignmentError(F2Error):
    """I/O offset or length is not sector aligned."""


class StaleAddressError(F2Error):
    """Address fell below a log's begin marker (truncation raced past us)."""


class AllocationPending(F2Error):
    """Tail page cannot be admitted yet; refresh the epoch and retry."""


class CapacityError(F2Error):
    """A fixed-size table (hash buckets, overflow pool, epoch slots) is full."""


class DeviceError(F2Error):
    """I/O failure reported by the storage device."""
