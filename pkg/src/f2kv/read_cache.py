"""In-memory cache of disk-resident read-hot records.

Cache records are byte replicas spliced into hot-index hash chains
between the index entry and the hot log: the entry points (with the
read-cache flag) at the cache record, whose previous address is the hot
log chain head (INVALID when the chain lives only in the cold log).  At
most one cache record sits on a chain, always at its head.

The backing store is a volatile record log with only mutable and
read-only regions.  A hit in the read-only region re-inserts the record
at the tail (second-chance FIFO); eviction retires the oldest page by
re-pointing each owning index entry back at the hot log.  Updates keep
the cache honest by invalidating a matching cache record before they
publish a newer version.
"""

from __future__ import annotations

from .errors import AllocationPending, StaleAddressError
from .hot_index import HashTable, SlotHandle
from .hybrid_log import HybridLog
from .records import (INVALID_ADDRESS, RecordFormat, entry_address,
                      header_is_invalid, header_previous, hash_key,
                      is_read_cache, make_entry, make_header,
                      strip_read_cache, with_read_cache)

DEFAULT_CACHE_PAGE_SIZE = 2 << 20  # small pages bound eviction CAS storms


class ReadCache:
    def __init__(self, capacity_bytes: int, page_size: int,
                 record_format: RecordFormat, epoch, hot_index: HashTable,
                 hot_log: HybridLog, mutable_fraction: float = 0.9):
        pages = max(2, capacity_bytes // page_size)
        self.log = HybridLog(record_format, page_size, pages, epoch,
                             volatile=True, mutable_fraction=mutable_fraction,
                             name="read-cache")
        self.hot_index = hot_index
        self.hot_log = hot_log
        self.epoch = epoch
        self.hits = 0
        self.insert_attempts = 0
        self.insert_aborts = 0
        self.evicted_records = 0

    # -- insertion ---------------------------------------------------------

    def _allocate(self) -> int | None:
        """Allocate a cache slot, driving one eviction inline if full."""
        try:
            return self.log.allocate(self.log.fmt.record_size)
        except AllocationPending:
            self.evict_page()
            self.epoch.refresh_if_stale()
            try:
                return self.log.allocate(self.log.fmt.record_size)
            except AllocationPending:
                return None

    def try_insert(self, key: bytes, key_hash: int, value: bytes,
                   next_hot_address: int, handle: SlotHandle,
                   expected_entry: int) -> bool:
        """Splice a replica of a disk-resident record into the chain.

        The new record's previous address is the hot-log chain head (or
        INVALID for cold-only chains).  Best effort: any compare-exchange
        loss leaves the chain untouched and the replica invalid.
        """
        self.insert_attempts += 1
        address = self._allocate()
        if address is None:
            self.insert_aborts += 1
            return False
        self.log.write_record(address, make_header(next_hot_address), key, value)
        new_entry = make_entry(with_read_cache(address),
                               self.hot_index.tag_for(key_hash))
        if handle.compare_exchange(expected_entry, new_entry):
            return True
        self.log.mark_invalid(address)
        self.insert_aborts += 1
        return False

    # -- reads --------------------------------------------------------------

    def lookup(self, cache_address: int, key: bytes):
        """(header, value) of a valid matching cache record, else None."""
        try:
            buf, off = self.log.resolve(cache_address)
        except StaleAddressError:
            return None
        fmt = self.log.fmt
        header = fmt.header_at(buf, off)
        if header_is_invalid(header) or not fmt.key_matches(buf, off, key):
            return None
        return header, fmt.value_at(buf, off)

    def chain_previous(self, cache_address: int) -> int:
        """Hot-log address hanging off a cache record (INVALID if none)."""
        buf, off = self.log.resolve(cache_address)
        return header_previous(self.log.fmt.header_at(buf, off))

    def second_chance(self, cache_address: int, handle: SlotHandle,
                      expected_entry: int) -> bool:
        """Re-insert a read-only-region record at the tail on a hit."""
        if cache_address >= self.log.read_only.load():
            return True  # still young; nothing to do
        try:
            buf, off = self.log.resolve(cache_address)
        except StaleAddressError:
            return False
        fmt = self.log.fmt
        header = fmt.header_at(buf, off)
        if header_is_invalid(header):
            return False
        key = fmt.key_at(buf, off)
        value = fmt.value_at(buf, off)
        new_address = self._allocate()
        if new_address is None:
            return False
        self.log.write_record(new_address,
                              make_header(header_previous(header)), key, value)
        new_entry = make_entry(with_read_cache(new_address),
                               self.hot_index.tag_for(hash_key(key)))
        if handle.compare_exchange(expected_entry, new_entry):
            try:
                self.log.mark_invalid(cache_address)
            except StaleAddressError:
                pass  # old page raced away; eviction already skipped it
            return True
        self.log.mark_invalid(new_address)
        return False

    # -- invalidation ----------------------------------------------------------

    def invalidate_for(self, key: bytes, key_hash: int,
                       handle: SlotHandle) -> None:
        """Invalidate a matching cache record at the chain head, if any."""
        entry = handle.load()
        address = entry_address(entry)
        if not is_read_cache(address):
            return
        try:
            buf, off = self.log.resolve(strip_read_cache(address))
        except StaleAddressError:
            return
        fmt = self.log.fmt
        if fmt.key_matches(buf, off, key):
            fmt.mark_invalid(buf, off)

    # -- eviction -----------------------------------------------------------------

    def evict_page(self) -> int:
        """Retire the oldest cache page, re-routing chains to the hot log.

        Valid records get their owning index entry compare-exchanged from
        the cache address back to the record's previous (hot log) address,
        or freed entirely for cold-only chains.  Returns records processed.
        """
        head = self.log.head.load()
        page = self.log.page_of(head)
        if page >= self.log.page_of(self.log.tail.load()):
            return 0  # only the open page remains
        fmt = self.log.fmt
        processed = 0
        addr = max(head, fmt.record_size)
        page_end = self.log.page_start(page + 1)
        while addr < page_end and addr < self.log.tail.load():
            try:
                buf, off = self.log._locate_in_memory(addr)
            except StaleAddressError:
                break  # another evictor finished this page
            header = fmt.header_at(buf, off)
            processed += 1
            if not header_is_invalid(header):
                key = fmt.key_at(buf, off)
                found = self.hot_index.find_entry(hash_key(key))
                if found is not None:
                    entry, handle = found
                    if entry_address(entry) == with_read_cache(addr):
                        previous = header_previous(header)
                        if previous == INVALID_ADDRESS or \
                                previous < self.hot_log.begin.load():
                            # Cold-only chain (or hot side truncated away):
                            # free the entry so reads consult the cold index.
                            handle.compare_exchange(entry, 0)
                        else:
                            handle.compare_exchange(
                                entry, make_entry(previous,
                                                  self.hot_index.tag_for(hash_key(key))))
                        # CAS losses mean another thread re-routed the chain.
            addr = self.log.next_record_address(addr)
        self.evicted_records += processed
        self.log.evict_head_to(page_end)
        self.epoch.refresh_if_stale()
        return processed
