"""Two-level index for cold-log records.

Index entries are grouped into fixed-size hash chunks (256 bytes / 32
entries by default).  The chunks live in their own mostly-on-disk record
log, keyed by chunk id, while a small in-memory hash table maps each
chunk id to the latest chunk record's address.  Point lookups therefore
cost at most one device read (for the chunk); updates are read-modify-
writes of a whole chunk appended at the chunk log's tail.

Concurrent updates to different entries of one chunk are reconciled by
the retry loop in `modify_entry`: the in-memory table is advanced with a
compare-exchange, and a losing writer reloads the fresh chunk and
re-applies its change.  A caller-supplied expected entry turns the whole
operation into a CAS at entry granularity, which the store's cold-side
insert protocol relies on.

Dead chunk versions pile up in the chunk log; `compact_chunk_log` reuses
the lookup-based approach (a chunk version is live only while the
in-memory table still points at it).
"""

from __future__ import annotations

import struct

from .errors import StaleAddressError
from .hot_index import HashTable
from .hybrid_log import HybridLog
from .records import (INVALID_ADDRESS, RecordFormat, TAG_MASK, entry_address,
                      header_is_invalid, make_entry, make_header)

DEFAULT_CHUNK_SIZE = 256  # 32 entries of 8 bytes

_U64 = struct.Struct("<Q")


class ColdIndex:
    def __init__(self, num_chunks: int, chunk_size: int, epoch, device,
                 page_size: int, memory_pages: int, meta_path=None):
        if num_chunks & (num_chunks - 1):
            raise ValueError("num_chunks must be a power of two")
        if chunk_size & (chunk_size - 1) or not 64 <= chunk_size <= 4096:
            raise ValueError("chunk_size must be a power of two in [64, 4096]")
        self.num_chunks = num_chunks
        self.chunk_size = chunk_size
        self.entries_per_chunk = chunk_size // 8
        self.chunk_bits = num_chunks.bit_length() - 1
        self.offset_mask = self.entries_per_chunk - 1

        # Dense chunk ids: bucket from the low id bits, tag from the next
        # bits up, so every id gets a distinct (bucket, tag) pair and a
        # lookup never chains.
        buckets = max(64, num_chunks // 4)
        self.table = HashTable(buckets, overflow_capacity=max(8, buckets // 8),
                               tag_shift=buckets.bit_length() - 1)
        self.chunk_log = HybridLog(
            RecordFormat(key_size=8, value_size=chunk_size),
            page_size=page_size, memory_pages=memory_pages, epoch=epoch,
            device=device, meta_path=meta_path, name="chunk-log")
        self.epoch = epoch

    # -- coordinates -----------------------------------------------------

    def chunk_coords(self, key_hash: int) -> tuple[int, int]:
        """(chunk_id, chunk_offset) from the low hash bits."""
        chunk_id = key_hash & (self.num_chunks - 1)
        offset = (key_hash >> self.chunk_bits) & self.offset_mask
        return chunk_id, offset

    def _load_chunk(self, address: int) -> bytes:
        loc = self.chunk_log.resolve(address)
        if loc is not None:
            buf, off = loc
            return self.chunk_log.fmt.value_at(buf, off)
        record = self.chunk_log.read_record(address)
        return self.chunk_log.fmt.value_at(record, 0)

    # -- operations --------------------------------------------------------

    def find_entry(self, key_hash: int, completion=None) -> int:
        """The 64-bit entry for this hash, or 0 when absent.

        Costs zero device reads when the chunk is memory resident, one
        otherwise.  Retries internally when chunk-log compaction moves
        the chunk mid-read.
        """
        chunk_id, offset = self.chunk_coords(key_hash)
        while True:
            found = self.table.find_entry(chunk_id)
            if found is None:
                entry = 0
                break
            address = entry_address(found[0])
            if address == INVALID_ADDRESS:
                entry = 0
                break
            try:
                chunk = self._load_chunk(address)
            except StaleAddressError:
                continue  # chunk log truncated under us; entry was re-pointed
            entry = _U64.unpack_from(chunk, offset * 8)[0]
            break
        if completion is not None:
            completion(None, entry)
        return entry

    def modify_entry(self, key_hash: int, expected_entry: int, new_entry: int,
                     completion=None) -> tuple[bool, int]:
        """CAS-like read-modify-write of one entry inside its chunk.

        Returns (True, new_entry) on success.  If the current entry does
        not match `expected_entry` (0 means "expect absent"), returns
        (False, current_entry) so the caller can re-reason.  Index
        compare-exchange failures retry internally against the fresh
        chunk and are never visible to the caller.
        """
        chunk_id, offset = self.chunk_coords(key_hash)
        key_bytes = chunk_id.to_bytes(8, "little")
        tag = self.table.tag_for(chunk_id)
        while True:
            idx_entry, handle = self.table.find_or_create_entry(chunk_id)
            chunk_addr = entry_address(idx_entry)
            if chunk_addr == INVALID_ADDRESS:
                chunk = bytearray(self.chunk_size)  # fresh all-invalid chunk
            else:
                try:
                    chunk = bytearray(self._load_chunk(chunk_addr))
                except StaleAddressError:
                    continue
            current = _U64.unpack_from(chunk, offset * 8)[0]
            if current != expected_entry:
                if completion is not None:
                    completion(None, current)
                return False, current
            _U64.pack_into(chunk, offset * 8, new_entry)
            new_addr = self.chunk_log.allocate_blocking()
            self.chunk_log.write_record(new_addr, make_header(INVALID_ADDRESS),
                                        key_bytes, bytes(chunk))
            if handle.compare_exchange(idx_entry, make_entry(new_addr, tag)):
                if completion is not None:
                    completion(None, new_entry)
                return True, new_entry
            self.chunk_log.mark_invalid(new_addr)

    # -- chunk-log garbage collection -----------------------------------------

    def live_chunk_address(self, chunk_id: int) -> int:
        found = self.table.find_entry(chunk_id)
        return entry_address(found[0]) if found else INVALID_ADDRESS

    def compact_chunk_log(self, until: int | None = None) -> int:
        """Copy live chunk versions past `until`, then truncate.

        A chunk record is live only if the in-memory table still points
        at it; superseded versions are dropped.  Returns the number of
        chunks moved.
        """
        log = self.chunk_log
        if until is None:
            until = log.begin.load() + log.log_size() // 2
        until = min(until, log.head.load()) & ~log.page_mask
        if until <= log.begin.load():
            return 0
        moved = 0

        def visit(addr: int, header: int, key: bytes, value: bytes) -> None:
            nonlocal moved
            if header_is_invalid(header):
                return
            chunk_id = int.from_bytes(key, "little")
            found = self.table.find_entry(chunk_id)
            if found is None or entry_address(found[0]) != addr:
                return  # superseded version
            old_entry, handle = found
            new_addr = log.allocate_blocking()
            log.write_record(new_addr, make_header(INVALID_ADDRESS), key, value)
            if handle.compare_exchange(old_entry,
                                       make_entry(new_addr,
                                                  self.table.tag_for(chunk_id))):
                moved += 1
            else:
                log.mark_invalid(new_addr)  # concurrent modify superseded us
            self.epoch.refresh_if_stale()

        log.scan(log.begin.load(), until, visit)
        log.truncate_begin(until)
        return moved

    def memory_bytes(self) -> int:
        """Allocated bytes of the in-memory chunk table."""
        return self.table.memory_bytes()

    def scan_entries(self):
        """Yield (key-hash-reconstructible (chunk_id, offset), entry) pairs
        for every nonzero entry; testing and scrubbing helper."""
        for chunk_id in range(self.num_chunks):
            address = self.live_chunk_address(chunk_id)
            if address == INVALID_ADDRESS:
                continue
            try:
                chunk = self._load_chunk(address)
            except StaleAddressError:
                continue
            for offset in range(self.entries_per_chunk):
                entry = _U64.unpack_from(chunk, offset * 8)[0]
                if entry:
                    yield (chunk_id, offset), entry
