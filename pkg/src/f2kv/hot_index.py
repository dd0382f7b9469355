"""Latch-free in-memory hash table mapping key hashes to chain heads.

Buckets are cache-line sized: seven 8-byte entry slots plus a reserved
last slot that can point to an overflow bucket from a lazily allocated
pool.  An entry packs a 48-bit address (which may carry the read-cache
flag), 14 tag bits of extra hash resolution, and a tentative bit.
Entries with the tentative bit set are invisible to readers.

Creation uses a two-phase protocol: claim a free slot with the tentative
bit, rescan the bucket chain for another claim or entry with the same
tag, and only then clear the bit.  Ties between two tentative claims are
broken by slot order (the earlier slot wins; the later claimant releases
and retries), so duplicate suppression cannot livelock.

The cold index reuses this table with chunk ids as hashes; `tag_shift`
selects which hash bits feed the tag so dense ids still get distinct
(bucket, tag) pairs.
"""

from __future__ import annotations

import threading

from ._atomics import AtomicU64, AtomicU64Array
from .errors import CapacityError
from .records import (ENTRY_OVERFLOW_BIT, ENTRY_TENTATIVE_BIT, INVALID_ADDRESS,
                      READ_CACHE_BIT, TAG_MASK, TAG_SHIFT, entry_address,
                      make_entry)

SLOTS_PER_BUCKET = 8
ENTRY_SLOTS = 7          # last slot is reserved for the overflow pointer
OVERFLOW_SLAB_BUCKETS = 256


class SlotHandle:
    """Stable reference to one 64-bit index slot, for later CAS."""

    __slots__ = ("_array", "index")

    def __init__(self, array: AtomicU64Array, index: int):
        self._array = array
        self.index = index

    def load(self) -> int:
        return self._array.load(self.index)

    def compare_exchange(self, expected: int, desired: int) -> bool:
        return self._array.compare_exchange(self.index, expected, desired)

    def store(self, value: int) -> None:
        self._array.store(self.index, value)


class HashTable:
    """Power-of-two array of cache-line buckets with overflow chaining."""

    def __init__(self, bucket_count: int, overflow_capacity: int | None = None,
                 tag_shift: int = TAG_SHIFT):
        if bucket_count & (bucket_count - 1) or bucket_count <= 0:
            raise ValueError("bucket_count must be a power of two")
        self.bucket_count = bucket_count
        self.tag_shift = tag_shift
        self._main = AtomicU64Array(bucket_count * SLOTS_PER_BUCKET)
        self._mask = bucket_count - 1
        if overflow_capacity is None:
            overflow_capacity = max(8, bucket_count // 8)
        self.overflow_capacity = overflow_capacity
        self._overflow_slabs: list[AtomicU64Array] = []
        self._overflow_next = AtomicU64(0)
        self._slab_lock = threading.Lock()

    # -- geometry ---------------------------------------------------------

    def _bucket_of(self, key_hash: int) -> int:
        return key_hash & self._mask

    def _tag_of(self, key_hash: int) -> int:
        return (key_hash >> self.tag_shift) & TAG_MASK

    def tag_for(self, key_hash: int) -> int:
        return self._tag_of(key_hash)

    def _overflow_slot(self, bucket_index: int):
        slab, off = divmod(bucket_index * SLOTS_PER_BUCKET,
                           OVERFLOW_SLAB_BUCKETS * SLOTS_PER_BUCKET)
        return self._overflow_slabs[slab], off

    def _alloc_overflow_bucket(self) -> int:
        index = self._overflow_next.fetch_add(1)
        if index >= self.overflow_capacity:
            raise CapacityError("overflow bucket pool exhausted")
        needed_slabs = (index // OVERFLOW_SLAB_BUCKETS) + 1
        with self._slab_lock:
            while len(self._overflow_slabs) < needed_slabs:
                self._overflow_slabs.append(
                    AtomicU64Array(OVERFLOW_SLAB_BUCKETS * SLOTS_PER_BUCKET))
        return index

    def _chain_handles(self, bucket: int):
        """Yield (ordinal, handle) over the bucket's entry slots in
        precedence order, following overflow pointers."""
        array: AtomicU64Array = self._main
        base = bucket * SLOTS_PER_BUCKET
        ordinal = 0
        while True:
            for i in range(ENTRY_SLOTS):
                yield ordinal, SlotHandle(array, base + i)
                ordinal += 1
            link = array.load(base + ENTRY_SLOTS)
            if not link & ENTRY_OVERFLOW_BIT:
                return
            array, base = self._overflow_slot(link & ~ENTRY_OVERFLOW_BIT)

    def _extend_chain(self, bucket: int) -> None:
        """Link one more overflow bucket at the end of the chain."""
        array: AtomicU64Array = self._main
        base = bucket * SLOTS_PER_BUCKET
        while True:
            link_index = base + ENTRY_SLOTS
            link = array.load(link_index)
            if link & ENTRY_OVERFLOW_BIT:
                array, base = self._overflow_slot(link & ~ENTRY_OVERFLOW_BIT)
                continue
            new_bucket = self._alloc_overflow_bucket()
            if array.compare_exchange(link_index, 0,
                                      ENTRY_OVERFLOW_BIT | new_bucket):
                return
            # Lost the race; the linked bucket (ours stays unused) serves.
            return

    # -- lookups ------------------------------------------------------------

    def find_entry(self, key_hash: int):
        """Consistent snapshot of the matching non-tentative entry.

        Returns (entry, handle) or None.  Tag equality does not imply key
        equality; callers disambiguate by walking the record chain.
        """
        tag = self._tag_of(key_hash)
        for _, handle in self._chain_handles(self._bucket_of(key_hash)):
            entry = handle.load()
            if entry and not entry & ENTRY_TENTATIVE_BIT \
                    and (entry >> TAG_SHIFT) & TAG_MASK == tag:
                return entry, handle
        return None

    def find_or_create_entry(self, key_hash: int):
        """Find the entry for this hash, creating a free one if absent.

        New entries start with the INVALID address and the hash's tag.
        Returns (entry, handle).
        """
        bucket = self._bucket_of(key_hash)
        tag = self._tag_of(key_hash)
        while True:
            free_handle = None
            free_ordinal = -1
            found = None
            for ordinal, handle in self._chain_handles(bucket):
                entry = handle.load()
                if entry == 0:
                    if free_handle is None:
                        free_handle, free_ordinal = handle, ordinal
                elif not entry & ENTRY_TENTATIVE_BIT \
                        and (entry >> TAG_SHIFT) & TAG_MASK == tag:
                    found = (entry, handle)
                    break
            if found:
                return found
            if free_handle is None:
                self._extend_chain(bucket)
                continue
            claim = make_entry(INVALID_ADDRESS, tag, tentative=True)
            if not free_handle.compare_exchange(0, claim):
                continue
            outcome = self._resolve_claim(bucket, tag, free_handle, free_ordinal)
            if outcome == "won":
                final = make_entry(INVALID_ADDRESS, tag)
                free_handle.store(final)
                return final, free_handle
            if outcome is not None:  # adopted an existing non-tentative entry
                free_handle.store(0)
                return outcome
            free_handle.store(0)  # deferred to an earlier claimant; retry

    def _resolve_claim(self, bucket, tag, my_handle, my_ordinal):
        """Rescan after a tentative claim.

        Returns "won" when no competing entry exists (or ours precedes all
        competing tentative claims), an (entry, handle) pair to adopt when
        a non-tentative duplicate exists, or None to back off and retry.
        """
        for ordinal, handle in self._chain_handles(bucket):
            if handle.index == my_handle.index and handle._array is my_handle._array:
                continue
            entry = handle.load()
            if not entry or entry & ENTRY_OVERFLOW_BIT:
                continue
            if (entry >> TAG_SHIFT) & TAG_MASK != tag:
                continue
            if entry & ENTRY_TENTATIVE_BIT:
                if ordinal < my_ordinal:
                    return None  # earlier claim wins; we release and retry
                continue  # later claim backs off on its own rescan
            return entry, handle
        return "won"

    def try_update(self, handle: SlotHandle, expected_entry: int,
                   new_entry: int) -> bool:
        """Single 64-bit compare-exchange of an index entry."""
        return handle.compare_exchange(expected_entry, new_entry)

    # -- maintenance ------------------------------------------------------------

    def scrub_stale_entries(self, min_valid_address: int) -> int:
        """Free entries addressing the truncated range [0, min_valid).

        Read-cache flagged entries are left alone (cache eviction owns
        them).  Entries that move concurrently are left for a later scrub.
        """
        cleared = 0
        for _, handle in self.all_handles():
            entry = handle.load()
            if not entry or entry & (ENTRY_TENTATIVE_BIT | ENTRY_OVERFLOW_BIT):
                continue
            address = entry_address(entry)
            if address & READ_CACHE_BIT:
                continue
            if address < min_valid_address and handle.compare_exchange(entry, 0):
                cleared += 1
        return cleared

    def all_handles(self):
        """Yield (bucket, handle) for every entry slot, including overflow."""
        for bucket in range(self.bucket_count):
            for _, handle in self._chain_handles(bucket):
                yield bucket, handle

    def entry_count(self) -> int:
        return sum(1 for _, h in self.all_handles()
                   if h.load() and not h.load() & ENTRY_TENTATIVE_BIT)

    def memory_bytes(self) -> int:
        """Bytes actually allocated for buckets (main plus overflow slabs)."""
        return self._main.nbytes() + sum(s.nbytes() for s in self._overflow_slabs)
