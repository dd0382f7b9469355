"""Log-structured record store spanning memory and disk.

The address space grows monotonically and is divided into fixed-size
pages held in a circular buffer of in-memory frames.  Four monotonic
markers partition it:

    begin <= head <= read_only <= tail

`[read_only, tail)` is mutable (in-place updates allowed), `[head,
read_only)` is in-memory but immutable, `[begin, head)` lives only on
disk, and everything below `begin` has been truncated.  Pages are
flushed when `read_only` passes them and their frames are reused only
after `head` passes them *and* the epoch at which that happened is safe,
so protected threads never see recycled memory.

A log stores fixed-size records (8-byte header, key, value, 8-aligned).
Address 0 is the INVALID sentinel; the first record slot of page 0 is
reserved so no live record ever has address 0.  The same class backs the
hot log, the cold log, and the cold-index chunk log; `volatile=True`
gives the read cache's memory-only variant (no device, eviction instead
of flushing, begin == head always).
"""

from __future__ import annotations

import threading
import time
from typing import Callable

from ._atomics import AtomicU64
from .errors import AllocationPending, StaleAddressError
from .records import INVALID_ADDRESS, RecordFormat, make_header

DEFAULT_PAGE_SIZE = 32 << 20  # 32 MiB
DEFAULT_SCAN_FRAMES = 4


class HybridLog:
    def __init__(self, record_format: RecordFormat, page_size: int,
                 memory_pages: int, epoch, device=None,
                 mutable_fraction: float = 0.9, volatile: bool = False,
                 meta_path=None, name: str = "log"):
        if page_size & (page_size - 1):
            raise ValueError("page_size must be a power of two")
        if record_format.record_size > page_size:
            raise ValueError("record larger than a page")
        if not volatile and device is None:
            raise ValueError("persistent log needs a device")
        self.fmt = record_format
        self.page_size = page_size
        self.page_bits = page_size.bit_length() - 1
        self.page_mask = page_size - 1
        self.memory_pages = max(2, memory_pages)
        self.epoch = epoch
        self.device = device
        self.volatile = volatile
        self.name = name
        self.mutable_bytes = int(mutable_fraction * self.memory_pages * page_size)

        rs = record_format.record_size
        self.records_per_page = page_size // rs
        self.usable_page_bytes = self.records_per_page * rs

        # Slot 0 of page 0 is reserved: address 0 stays the INVALID sentinel.
        self.begin = AtomicU64(0)
        self.head = AtomicU64(0)
        self.read_only = AtomicU64(0)
        self.tail = AtomicU64(rs)
        self.num_truncs = AtomicU64(0)

        self._frames = [bytearray(page_size) for _ in range(self.memory_pages)]
        self._frame_page = [-1] * self.memory_pages
        self._frame_free = [True] * self.memory_pages
        self._frame_page[0] = 0
        self._frame_free[0] = False
        self._state_lock = threading.Lock()
        self._flush_issued: set[int] = set()
        self._flushed_pages: set[int] = set()
        self._flushed_until_page = 0  # pages below this are on disk
        self._zero_slot = bytes(rs)
        self._io_error: Exception | None = None

        if meta_path is not None:
            with open(meta_path, "w") as f:
                f.write(f"key_size={record_format.key_size}\n"
                        f"value_size={record_format.value_size}\n"
                        f"page_size={page_size}\n")

    # -- geometry helpers ----------------------------------------------

    def page_of(self, address: int) -> int:
        return address >> self.page_bits

    def page_start(self, page: int) -> int:
        return page << self.page_bits

    def next_record_address(self, address: int) -> int:
        nxt = address + self.fmt.record_size
        if (nxt & self.page_mask) + self.fmt.record_size > self.usable_page_bytes:
            nxt = (self.page_of(nxt) + 1) << self.page_bits
        return nxt

    def disk_size(self) -> int:
        return max(0, self.head.load() - self.begin.load())

    def log_size(self) -> int:
        return max(0, self.tail.load() - self.begin.load())

    def markers(self) -> tuple[int, int, int, int]:
        return (self.begin.load(), self.head.load(),
                self.read_only.load(), self.tail.load())

    def check_invariants(self) -> None:
        b, h, r, t = self.markers()
        assert b <= h <= r <= t, (b, h, r, t)

    def _check_io(self) -> None:
        if self._io_error is not None:
            raise self._io_error

    # -- allocation ------------------------------------------------------

    def allocate(self, record_size: int) -> int:
        """Reserve a zeroed slot at the tail; may raise AllocationPending."""
        if record_size != self.fmt.record_size:
            raise ValueError("log stores fixed-size records of "
                             f"{self.fmt.record_size} bytes")
        rs = record_size
        while True:
            tail = self.tail.load()
            in_page = tail & self.page_mask
            if in_page + rs <= self.usable_page_bytes:
                page = self.page_of(tail)
                if in_page == 0 and page > 0 and not self._try_open_page(page):
                    # Tail sits exactly on a fresh page boundary.
                    self._check_io()
                    raise AllocationPending(self.name)
                if self.tail.compare_exchange(tail, tail + rs):
                    self._zero(tail)
                    return tail
                continue
            new_page = self.page_of(tail) + 1
            if not self._try_open_page(new_page):
                self._check_io()
                raise AllocationPending(self.name)
            new_tail = new_page << self.page_bits
            if self.tail.compare_exchange(tail, new_tail + rs):
                self._zero(new_tail)
                return new_tail

    def allocate_blocking(self, timeout: float = 60.0) -> int:
        """Allocate, pumping the epoch while flushing or eviction lags."""
        deadline = time.monotonic() + timeout
        spins = 0
        while True:
            try:
                return self.allocate(self.fmt.record_size)
            except AllocationPending:
                self.epoch.refresh_if_stale()
                if not self.volatile:
                    self._try_advance_head()
                spins += 1
                if spins > 16:
                    time.sleep(0.0002)
                if time.monotonic() > deadline:
                    raise

    def _zero(self, address: int) -> None:
        frame = self._frames[self.page_of(address) % self.memory_pages]
        off = address & self.page_mask
        frame[off : off + self.fmt.record_size] = self._zero_slot

    def _try_open_page(self, page: int) -> bool:
        f = page % self.memory_pages
        with self._state_lock:
            if self._frame_page[f] == page:
                return True
            if self._frame_free[f]:
                old_page = self._frame_page[f]
                self._frame_page[f] = page
                self._frame_free[f] = False
                if old_page >= 0:
                    self._flushed_pages.discard(old_page)
                    self._flush_issued.discard(old_page)
                return True
        self._drive_memory_policy(page)
        return False

    def _drive_memory_policy(self, incoming_page: int) -> None:
        # Admitting `incoming_page` needs head at or past the start of the
        # page that shares its frame.  Advance read_only so flushing (or,
        # for the volatile cache, eviction) can catch up; the read cache
        # drives its own head movement.
        target_head = self.page_start(incoming_page - self.memory_pages + 1)
        tail = self.tail.load()
        policy_ro = tail - self.mutable_bytes
        goal = min(max(target_head, policy_ro), tail)
        self._advance_read_only(goal)

    def evict_head_to(self, boundary: int) -> None:
        """Volatile logs only: retire [head, boundary); begin follows head."""
        if not self.volatile:
            raise ValueError("evict_head_to is for volatile logs")
        self._advance_read_only(min(boundary, self.tail.load()))
        self._advance_head(min(boundary, self.read_only.load()))

    # -- marker updates ----------------------------------------------------

    def shift_read_only(self, new_read_only: int) -> None:
        if new_read_only < self.read_only.load():
            raise ValueError("read_only marker cannot move backwards")
        if new_read_only > self.tail.load():
            raise ValueError("read_only cannot pass tail")
        self._advance_read_only(new_read_only)

    def _advance_read_only(self, value: int) -> None:
        current = self.read_only.load()
        if value <= current:
            return
        winner = self.read_only.max_update(value)
        if winner == value and not self.volatile:
            # Flush only after every thread has observed the new boundary
            # (no more in-place updates below it).
            self.epoch.bump_with_action(lambda v=value: self._issue_flushes(v))

    def shift_head(self, new_head: int) -> None:
        if new_head < self.head.load():
            raise ValueError("head marker cannot move backwards")
        if new_head > self.read_only.load():
            raise ValueError("head cannot pass read_only")
        if not self.volatile:
            for p in range(self.page_of(self.head.load()), self.page_of(new_head)):
                if p not in self._flushed_pages and p >= self._flushed_until_page:
                    raise ValueError(f"page {p} not flushed yet")
        self._advance_head(new_head)

    def _advance_head(self, value: int) -> None:
        current = self.head.load()
        if value <= current:
            return
        winner = self.head.max_update(value)
        if winner == value:
            if self.volatile:
                self.begin.max_update(value)
            self.epoch.bump_with_action(lambda v=value: self._release_frames(v))

    def _release_frames(self, upto: int) -> None:
        boundary_page = self.page_of(upto)
        with self._state_lock:
            for f in range(self.memory_pages):
                page = self._frame_page[f]
                if 0 <= page < boundary_page and not self._frame_free[f]:
                    if self.volatile or page in self._flushed_pages \
                            or page < self._flushed_until_page:
                        self._frame_free[f] = True

    # -- flushing ----------------------------------------------------------

    def _issue_flushes(self, upto: int) -> None:
        boundary_page = self.page_of(upto)  # pages strictly below are full
        todo = []
        with self._state_lock:
            for page in range(self._flushed_until_page, boundary_page):
                if page not in self._flush_issued:
                    f = page % self.memory_pages
                    if self._frame_page[f] == page:
                        self._flush_issued.add(page)
                        todo.append((page, bytes(self._frames[f])))
        for page, data in todo:
            self.device.write_async(
                self.page_start(page), data,
                completion=lambda err, p=page: self._on_flush_done(p, err))

    def _on_flush_done(self, page: int, err) -> None:
        if err is not None:
            self._io_error = err
            return
        with self._state_lock:
            self._flushed_pages.add(page)
            while self._flushed_until_page in self._flushed_pages:
                self._flushed_pages.discard(self._flushed_until_page)
                self._flushed_until_page += 1
        self._try_advance_head()

    def _try_advance_head(self) -> None:
        # Flushing is already gated by read_only, which the memory policy
        # drives, so head simply tracks the flushed boundary beneath it.
        bound = min(self.page_start(self._flushed_until_page),
                    self.read_only.load() & ~self.page_mask)
        if bound > self.head.load():
            self._advance_head(bound)

    def flushed_boundary(self) -> int:
        return self.page_start(self._flushed_until_page)

    # -- record access -----------------------------------------------------

    def resolve(self, address: int):
        """(buffer, offset) for an in-memory record, None when disk-resident."""
        if address < self.begin.load():
            raise StaleAddressError(f"{self.name}: address {address} below begin")
        if address >= self.head.load():
            page = self.page_of(address)
            f = page % self.memory_pages
            if self._frame_page[f] == page:
                return self._frames[f], address & self.page_mask
        if self.volatile:
            raise StaleAddressError(f"{self.name}: cache page evicted")
        return None

    def _locate_in_memory(self, address: int):
        """Frame access for internal mutation, ignoring the head marker.

        Valid only under epoch protection for records the caller created
        or proved resident; used to fix up headers before publication.
        """
        page = self.page_of(address)
        f = page % self.memory_pages
        if self._frame_page[f] != page:
            raise StaleAddressError(f"{self.name}: page {page} no longer resident")
        return self._frames[f], address & self.page_mask

    def write_record(self, address: int, header: int, key: bytes, value: bytes) -> None:
        buf, off = self._locate_in_memory(address)
        self.fmt.write(buf, off, header, key, value)

    def header_at(self, address: int) -> int:
        loc = self.resolve(address)
        if loc is None:
            raise StaleAddressError("header_at needs an in-memory record")
        return self.fmt.header_at(loc[0], loc[1])

    def set_header(self, address: int, header: int) -> None:
        buf, off = self._locate_in_memory(address)
        self.fmt.set_header(buf, off, header)

    def mark_invalid(self, address: int) -> None:
        buf, off = self._locate_in_memory(address)
        self.fmt.mark_invalid(buf, off)

    def set_value_inplace(self, address: int, value: bytes) -> None:
        if address < self.read_only.load():
            raise ValueError("in-place update below the mutable region")
        buf, off = self._locate_in_memory(address)
        self.fmt.set_value(buf, off, value)

    # -- disk reads ----------------------------------------------------------

    def read_record_async(self, address: int, completion):
        """Read one record from the device; completion(err, record_bytes)."""
        if address < self.begin.load():
            raise StaleAddressError(f"{self.name}: address {address} below begin")
        sector = self.device.sector_size
        start = address & ~(sector - 1)
        end = -(-(address + self.fmt.record_size) // sector) * sector

        def cb(err, data):
            if err is None and address < self.begin.load():
                err = StaleAddressError(
                    f"{self.name}: address {address} truncated during read")
            if err is not None:
                completion(err, None)
            else:
                rel = address - start
                completion(None, data[rel : rel + self.fmt.record_size])

        return self.device.read_async(start, end - start, cb)

    def read_record(self, address: int) -> bytes:
        """Blocking wrapper around read_record_async."""
        result: list = [None, None]
        done = threading.Event()

        def cb(err, data):
            result[0], result[1] = err, data
            done.set()

        self.read_record_async(address, cb)
        done.wait()
        if result[0] is not None:
            raise result[0]
        return result[1]

    # -- truncation ------------------------------------------------------------

    def truncate_begin(self, until: int) -> int:
        """Advance begin to `until`; returns the new truncation count."""
        if until > self.head.load():
            raise ValueError("cannot truncate past head")
        self.begin.max_update(until)
        count = self.num_truncs.fetch_add(1) + 1
        if not self.volatile:
            self.epoch.bump_with_action(
                lambda v=until: self.device.truncate_below(v))
        return count

    def snapshot_tail_and_truncs(self) -> tuple[int, int]:
        """Atomic (tail, num_truncs) pair: retried until truncs is stable."""
        while True:
            t1 = self.num_truncs.load()
            tail = self.tail.load()
            if self.num_truncs.load() == t1:
                return tail, t1

    # -- scanning ---------------------------------------------------------------

    def scan(self, range_begin: int, range_end: int,
             visitor: Callable[[int, int, bytes, bytes], None],
             max_frames: int = DEFAULT_SCAN_FRAMES) -> int:
        """Visit records in [range_begin, range_end) in address order.

        Page-padding filler is skipped.  Disk pages are streamed through a
        bounded prefetch window (`max_frames` outstanding reads).  Returns
        the number of records visited; raises StaleAddressError if the
        range is truncated mid-scan.
        """
        if not (self.begin.load() <= range_begin <= range_end <= self.tail.load()):
            raise ValueError("scan range outside [begin, tail]")
        rs = self.fmt.record_size
        addr = max(range_begin, rs)  # slot 0 of page 0 is reserved
        count = 0
        pending: dict[int, object] = {}
        while addr < range_end:
            if self.begin.load() > addr:
                raise StaleAddressError("range truncated mid-scan")
            page = self.page_of(addr)
            buf = self._page_bytes(page, pending, range_end, max_frames)
            page_end = min(range_end, self.page_start(page + 1))
            while addr < page_end:
                off = addr & self.page_mask
                header = self.fmt.header_at(buf, off)
                visitor(addr, header, self.fmt.key_at(buf, off),
                        self.fmt.value_at(buf, off))
                count += 1
                addr = self.next_record_address(addr)
        return count

    def _page_bytes(self, page: int, pending: dict, range_end: int,
                    max_frames: int):
        head = self.head.load()
        if self.page_start(page) >= head:
            f = page % self.memory_pages
            if self._frame_page[f] == page:
                return self._frames[f]
        if self.volatile:
            raise StaleAddressError("cache page evicted during scan")
        # Prefetch up to max_frames pages ahead, consume in order.
        last_page = self.page_of(range_end - 1)
        p = page
        while p <= last_page and len(pending) < max_frames:
            if p not in pending and self.page_start(p + 1) <= head:
                pending[p] = self.device.read_async(self.page_start(p),
                                                    self.page_size)
            p += 1
        future = pending.pop(page, None)
        if future is None:
            future = self.device.read_async(self.page_start(page), self.page_size)
        try:
            return future.result()
        except StaleAddressError:
            raise
        except Exception as exc:
            raise StaleAddressError(f"scan read failed: {exc}") from exc

    # -- maintenance ------------------------------------------------------------

    def seal_to_disk(self, timeout: float = 60.0) -> None:
        """Flush and evict all complete pages; head lands on the open page.

        Pads the open page with invalid filler and rolls the tail into a
        fresh page first, so every record written before the call becomes
        disk resident.  Intended for tests and benchmark setup.
        """
        if self.volatile:
            raise ValueError("volatile log has no disk to seal to")
        filler = make_header(INVALID_ADDRESS, invalid=True)
        blank_key = bytes(self.fmt.key_size)
        if self.tail.load() & self.page_mask:
            while True:
                addr = self.allocate_blocking(timeout)
                self.write_record(addr, filler, blank_key, b"")
                if addr & self.page_mask == 0:
                    break
        target = self.page_start(self.page_of(self.tail.load()))
        self.shift_read_only(target)
        deadline = time.monotonic() + timeout
        while self.flushed_boundary() < target:
            self._check_io()
            self.epoch.refresh_if_stale()
            time.sleep(0.0005)
            if time.monotonic() > deadline:
                raise TimeoutError("flush did not finish")
        self._advance_head(target)
        self.epoch.refresh_if_stale()
        self.epoch.drain()
