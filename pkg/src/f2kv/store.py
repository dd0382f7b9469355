"""The store orchestrator: point operations across cache, hot, and cold.

Reads walk the hash chain from the hot index through an optional cache
replica and the hot log, then fall back to the cold index and cold log.
Upserts and deletes append to the hot tail (updates in place when the
newest record sits in the mutable region).  Read-modify-writes try the
hot log first, fall back to a cold read, and publish through a
conditional insert that aborts when a newer record appeared meanwhile.

Compaction is lookup based: records from the oldest part of a log are
streamed through a small frame buffer, each one copied to the target
tail only if no newer version exists in its chain (the conditional
insert primitive), and the source is truncated afterwards.  A truncation
counter on the cold log lets concurrent reads detect the race where the
only copy of a key moves to the tail mid-lookup; such reads re-scan just
the newly appended range instead of reporting a false NOT_FOUND.
"""

from __future__ import annotations

import contextlib
import enum
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ._atomics import AtomicU64, StripedLocks
from .cold_index import ColdIndex
from .device import RamDevice, SegmentedFile
from .epoch import EpochFramework
from .errors import StaleAddressError
from .hot_index import HashTable
from .hybrid_log import HybridLog
from .read_cache import DEFAULT_CACHE_PAGE_SIZE, ReadCache
from .records import (INVALID_ADDRESS, RecordFormat, entry_address, hash_key,
                      header_is_invalid, header_is_tombstone, header_previous,
                      is_read_cache, make_entry, make_header, strip_read_cache)


class Status(enum.Enum):
    OK = "ok"
    NOT_FOUND = "not_found"
    PENDING = "pending"
    ABORTED = "aborted"


# Internal read/RMW outcomes.
_RETRY = object()
_MISS = object()
_STALE = object()
_FOUND = object()
_TOMBSTONE = object()


@dataclass
class StoreConfig:
    """Component budgets and policies.

    Defaults match the reference configuration (32 MiB pages, 90% mutable
    region, 256 B hash chunks, 5/35 GiB disk budgets, 80%/10% compaction
    fractions); `StoreConfig.small()` provides desk-scale settings for
    tests and experimentation.
    """

    key_size: int = 8
    value_size: int = 108
    hot_index_buckets: int = 1 << 16
    hot_log_memory_bytes: int = 96 << 20
    hot_log_page_bytes: int = 32 << 20
    mutable_fraction: float = 0.9
    cold_log_memory_bytes: int = 64 << 20
    cold_log_page_bytes: int = 32 << 20
    num_chunks: int = 1 << 15
    chunk_size: int = 256
    chunk_log_memory_bytes: int = 96 << 20
    chunk_log_page_bytes: int = 1 << 20
    read_cache_bytes: int = 512 << 20  # 0 disables the cache
    read_cache_page_bytes: int = DEFAULT_CACHE_PAGE_SIZE
    hot_disk_budget: int = 5 << 30
    cold_disk_budget: int = 35 << 30
    chunk_log_disk_budget: int = 4 << 30
    trigger_fraction: float = 0.8
    compact_fraction: float = 0.1
    compaction_frames: int = 4
    compaction_threads: int = 1
    segment_size: int = 1 << 30
    sector_size: int = 4096
    direct_io: bool | str = "auto"
    false_absence_check: bool = True

    def __post_init__(self):
        if not 0 < self.compact_fraction < self.trigger_fraction <= 1:
            raise ValueError("need 0 < compact_fraction < trigger_fraction <= 1")
        if not 0 < self.mutable_fraction < 1:
            raise ValueError("mutable_fraction must be in (0, 1)")

    @classmethod
    def small(cls, **overrides) -> "StoreConfig":
        """Desk-scale defaults: tiny pages and budgets, quick to build."""
        base = dict(
            hot_index_buckets=1 << 10,
            hot_log_memory_bytes=256 << 10,
            hot_log_page_bytes=64 << 10,
            cold_log_memory_bytes=128 << 10,
            cold_log_page_bytes=64 << 10,
            num_chunks=256,
            chunk_log_memory_bytes=128 << 10,
            chunk_log_page_bytes=32 << 10,
            read_cache_bytes=256 << 10,
            read_cache_page_bytes=32 << 10,
            hot_disk_budget=8 << 20,
            cold_disk_budget=32 << 20,
            chunk_log_disk_budget=8 << 20,
            segment_size=1 << 20,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class Metrics:
    reads: int = 0
    upserts: int = 0
    deletes: int = 0
    rmws: int = 0
    op_retries: int = 0
    inplace_updates: int = 0
    rcu_appends: int = 0
    cache_hits: int = 0
    cache_insert_attempts: int = 0
    cache_insert_aborts: int = 0
    cache_evicted_records: int = 0
    false_absence_rescans: int = 0
    possibly_superfluous_cold_writes: int = 0
    compaction_cold_inserts: int = 0
    hot_compactions: int = 0
    cold_compactions: int = 0
    chunk_compactions: int = 0
    num_truncs_cold: int = 0
    device_read_bytes: int = 0
    device_write_bytes: int = 0
    device_reads: int = 0
    device_writes: int = 0
    compaction_peak_frame_bytes: int = 0
    hot_markers: tuple = ()
    cold_markers: tuple = ()
    cold_index_memory_bytes: int = 0


class _CompactionFrames:
    """Bounded ring of source-log pages with per-frame record cursors.

    Workers pull records with a fetch-add on the active frame's cursor.
    The worker that takes the one-past-last slot closes the frame and
    registers an epoch action that reloads it with the page `frame_count`
    ahead, so memory is reused only after every worker moved on.
    """

    def __init__(self, log: HybridLog, begin: int, until: int,
                 frame_count: int, epoch: EpochFramework):
        self.log = log
        self.epoch = epoch
        self.first_page = log.page_of(begin)
        self.page_count = log.page_of(until) - self.first_page
        self.frame_count = min(frame_count, max(1, self.page_count))
        self._frames: list = [None] * self.frame_count
        self._current = AtomicU64(0)
        self._error: Exception | None = None
        self.resident_bytes = self.frame_count * log.page_size
        for seq in range(min(self.frame_count, self.page_count)):
            self._load(seq)

    def _page_meta(self, seq: int) -> tuple[int, int]:
        page = self.first_page + seq
        base = self.log.page_start(page)
        first = max(base, self.log.fmt.record_size)  # skip reserved slot 0
        count = (self.log.usable_page_bytes - (first - base)) \
            // self.log.fmt.record_size
        return first, count

    def _load(self, seq: int) -> None:
        page = self.first_page + seq

        def done(err, data, s=seq):
            if err is not None:
                self._error = err
            else:
                self._frames[s % self.frame_count] = (s, data, AtomicU64(0))

        self.log.device.read_async(self.log.page_start(page),
                                   self.log.page_size, done)

    def next_record(self):
        """(address, header, key, value) or None when the region is done."""
        fmt = self.log.fmt
        spins = 0
        while True:
            if self._error is not None:
                raise self._error
            seq = self._current.load()
            if seq >= self.page_count:
                return None
            frame = self._frames[seq % self.frame_count]
            if frame is None or frame[0] != seq:
                self.epoch.refresh_if_stale()
                spins += 1
                if spins > 16:
                    time.sleep(0.0002)
                continue
            spins = 0
            _, data, cursor = frame
            first, count = self._page_meta(seq)
            i = cursor.fetch_add(1)
            if i < count:
                addr = first + i * fmt.record_size
                off = addr & self.log.page_mask
                return (addr, fmt.header_at(data, off), fmt.key_at(data, off),
                        fmt.value_at(data, off))
            if i == count:  # we close the frame
                self._current.compare_exchange(seq, seq + 1)
                reload_seq = seq + self.frame_count
                if reload_seq < self.page_count:
                    self.epoch.bump_with_action(
                        lambda s=reload_seq: self._load(s))
            else:
                self._current.compare_exchange(seq, seq + 1)


class F2Store:
    """Embedded concurrent key-value store over tiered record logs."""

    def __init__(self, config: StoreConfig | None = None,
                 directory: str | os.PathLike | None = None):
        self.cfg = cfg = config or StoreConfig()
        self.epoch = EpochFramework()
        self.fmt = RecordFormat(cfg.key_size, cfg.value_size)
        self._dir = Path(directory) if directory is not None else None

        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            mk = lambda stem: SegmentedFile(
                str(self._dir / stem), segment_size=cfg.segment_size,
                sector_size=cfg.sector_size, direct_io=cfg.direct_io)
            meta = lambda stem: self._dir / f"{stem}.meta"
        else:
            mk = lambda stem: RamDevice(
                segment_size=max(cfg.segment_size // 4, 1 << 20),
                sector_size=cfg.sector_size)
            meta = lambda stem: None
        self.hot_device = mk("hot")
        self.cold_device = mk("cold")
        self.chunk_device = mk("chunks")

        self.hot_log = HybridLog(
            self.fmt, cfg.hot_log_page_bytes,
            cfg.hot_log_memory_bytes // cfg.hot_log_page_bytes, self.epoch,
            device=self.hot_device, mutable_fraction=cfg.mutable_fraction,
            meta_path=meta("hot"), name="hot")
        self.cold_log = HybridLog(
            self.fmt, cfg.cold_log_page_bytes,
            cfg.cold_log_memory_bytes // cfg.cold_log_page_bytes, self.epoch,
            device=self.cold_device, mutable_fraction=cfg.mutable_fraction,
            meta_path=meta("cold"), name="cold")
        self.hot_index = HashTable(cfg.hot_index_buckets)
        self.cold_index = ColdIndex(
            cfg.num_chunks, cfg.chunk_size, self.epoch, self.chunk_device,
            page_size=cfg.chunk_log_page_bytes,
            memory_pages=cfg.chunk_log_memory_bytes // cfg.chunk_log_page_bytes,
            meta_path=meta("chunks"))
        self.read_cache: ReadCache | None = None
        if cfg.read_cache_bytes:
            self.read_cache = ReadCache(
                cfg.read_cache_bytes, cfg.read_cache_page_bytes, self.fmt,
                self.epoch, self.hot_index, self.hot_log,
                mutable_fraction=cfg.mutable_fraction)

        self._record_locks = StripedLocks()
        self._compaction_locks = {"hot": threading.Lock(),
                                  "cold": threading.Lock(),
                                  "chunks": threading.Lock()}
        self._counters = {name: AtomicU64(0) for name in (
            "reads", "upserts", "deletes", "rmws", "op_retries",
            "inplace_updates", "rcu_appends", "false_absence_rescans",
            "possibly_superfluous_cold_writes", "compaction_cold_inserts",
            "hot_compactions", "cold_compactions", "chunk_compactions")}
        self._compaction_peak = 0
        self._bg_thread: threading.Thread | None = None
        self._bg_stop = threading.Event()
        self._bg_error: Exception | None = None
        self._closed = False
        # Test hook: called at labelled points inside cold lookups.
        self._cold_step_hook: Callable[[str, bytes], None] | None = None

    # -- sessions ---------------------------------------------------------

    @contextlib.contextmanager
    def session(self):
        """Per-thread epoch protection; ops inside refresh automatically."""
        self.epoch.protect()
        try:
            yield self
        finally:
            self.epoch.unprotect()

    def refresh(self) -> None:
        self.epoch.refresh_if_stale()

    def quiesce(self, timeout: float = 30.0) -> None:
        """Drain pending epoch actions; callers must be otherwise idle."""
        deadline = time.monotonic() + timeout
        settled = 0
        while settled < 3:
            self.epoch.refresh()
            if self.epoch._pending.load() == 0:
                settled += 1
            else:
                settled = 0
            time.sleep(0.0005)
            if time.monotonic() > deadline:
                raise TimeoutError("epoch actions never drained")

    def close(self) -> None:
        if self._closed:
            return
        self.stop_background_compaction()
        self._closed = True
        self.epoch.unprotect()
        for dev in (self.hot_device, self.cold_device, self.chunk_device):
            dev.close()

    # -- validation --------------------------------------------------------

    def _check_key(self, key: bytes) -> bytes:
        if len(key) != self.cfg.key_size:
            raise ValueError(f"key must be {self.cfg.key_size} bytes")
        return key

    def _check_value(self, value: bytes) -> bytes:
        if len(value) != self.cfg.value_size:
            raise ValueError(f"value must be {self.cfg.value_size} bytes")
        return value

    def _tag(self, key_hash: int) -> int:
        return self.hot_index.tag_for(key_hash)

    # -- upsert / delete ------------------------------------------------------

    def upsert(self, key: bytes, value: bytes) -> Status:
        self._check_key(key)
        self._check_value(value)
        self._counters["upserts"].fetch_add(1)
        return self._append_hot(key, hash_key(key), value, tombstone=False)

    def delete(self, key: bytes) -> Status:
        # Tombstones are always appended, even with no index entry: a
        # record for the key may still exist in the cold log.
        self._check_key(key)
        self._counters["deletes"].fetch_add(1)
        return self._append_hot(key, hash_key(key), bytes(self.cfg.value_size),
                                tombstone=True)

    def _append_hot(self, key: bytes, h: int, value: bytes,
                    tombstone: bool) -> Status:
        self.epoch.refresh_if_stale()
        fmt = self.fmt
        while True:
            entry, handle = self.hot_index.find_or_create_entry(h)
            addr = entry_address(entry)
            hot_prev = addr
            if is_read_cache(addr):
                cache_addr = strip_read_cache(addr)
                try:
                    buf, off = self.read_cache.log.resolve(cache_addr)
                except StaleAddressError:
                    continue  # eviction raced; the entry has changed
                header = fmt.header_at(buf, off)
                if fmt.key_matches(buf, off, key):
                    fmt.mark_invalid(buf, off)
                hot_prev = header_previous(header)
            elif not tombstone and addr != INVALID_ADDRESS \
                    and self._try_inplace_upsert(key, addr, value):
                return Status.OK
            new_addr = self.hot_log.allocate_blocking()
            self.hot_log.write_record(
                new_addr, make_header(hot_prev, tombstone=tombstone), key, value)
            if self.hot_index.try_update(handle, entry,
                                         make_entry(new_addr, self._tag(h))):
                return Status.OK
            self.hot_log.mark_invalid(new_addr)
            self._counters["op_retries"].fetch_add(1)

    def _try_inplace_upsert(self, key: bytes, chain_head: int,
                            value: bytes) -> bool:
        """Blind in-place write when the key's newest record is mutable."""
        fmt = self.fmt
        log = self.hot_log
        addr = chain_head
        while addr != INVALID_ADDRESS and addr >= log.read_only.load():
            try:
                loc = log.resolve(addr)
            except StaleAddressError:
                return False
            if loc is None:
                return False
            buf, off = loc
            header = fmt.header_at(buf, off)
            if not header_is_invalid(header) and fmt.key_matches(buf, off, key):
                if header_is_tombstone(header):
                    return False  # deleted: publish a fresh record instead
                with self._record_locks.for_key(addr):
                    if addr < log.read_only.load():
                        return False  # region moved; fall back to append
                    fmt.set_value(buf, off, value)
                self._counters["inplace_updates"].fetch_add(1)
                return True
            addr = header_previous(header)
        return False

    # -- read --------------------------------------------------------------------

    def read(self, key: bytes, completion=None) -> tuple[Status, bytes | None]:
        self._check_key(key)
        h = hash_key(key)
        self.epoch.refresh_if_stale()
        self._counters["reads"].fetch_add(1)
        while True:
            out = self._read_attempt(key, h)
            if out is not _RETRY:
                if completion is not None:
                    completion(out[0], out[1])
                return out

    def _read_attempt(self, key: bytes, h: int):
        fmt = self.fmt
        found = self.hot_index.find_entry(h)
        entry, handle = found if found is not None else (0, None)
        addr = entry_address(entry)
        next_hot = addr

        if is_read_cache(addr):
            cache = self.read_cache
            cache_addr = strip_read_cache(addr)
            try:
                cbuf, coff = cache.log.resolve(cache_addr)
            except StaleAddressError:
                return _RETRY  # evicted mid-read; entry has changed
            cheader = fmt.header_at(cbuf, coff)
            if not header_is_invalid(cheader) and fmt.key_matches(cbuf, coff, key):
                value = fmt.value_at(cbuf, coff)
                cache.hits += 1
                if cache_addr < cache.log.read_only.load():
                    cache.second_chance(cache_addr, handle, entry)
                return (Status.OK, value)
            next_hot = header_previous(cheader)
            addr = next_hot

        log = self.hot_log
        while addr != INVALID_ADDRESS:
            if addr < log.begin.load():
                break  # hot side truncated: continue in the cold log
            try:
                loc = log.resolve(addr)
            except StaleAddressError:
                break
            if loc is not None:
                buf, off = loc
                from_disk = False
            else:
                try:
                    record = log.read_record(addr)
                except StaleAddressError:
                    break
                buf, off, from_disk = record, 0, True
            header = fmt.header_at(buf, off)
            if not header_is_invalid(header) and fmt.key_matches(buf, off, key):
                if header_is_tombstone(header):
                    return (Status.NOT_FOUND, None)
                value = fmt.value_at(buf, off)
                if from_disk and self.read_cache is not None and handle is not None:
                    self.read_cache.try_insert(key, h, value, next_hot,
                                               handle, entry)
                return (Status.OK, value)
            addr = header_previous(header)

        return self._cold_read(key, h, entry, handle, next_hot)

    def _cold_read(self, key: bytes, h: int, hot_entry: int, hot_handle,
                   next_hot: int, populate_cache: bool = True):
        lower_bound = 0
        while True:
            tail_snap, truncs_snap = self.cold_log.snapshot_tail_and_truncs()
            state, value, from_disk = self._cold_lookup(key, h, lower_bound)
            if state is _STALE or (
                    state is _MISS
                    and self.cold_log.num_truncs.load() != truncs_snap):
                # A truncation raced us: the live copy (if any) was moved to
                # the tail.  Re-scan only the newly appended range.
                if not self.cfg.false_absence_check:
                    return (Status.NOT_FOUND, None)
                self._counters["false_absence_rescans"].fetch_add(1)
                lower_bound = tail_snap
                continue
            if state is _MISS:
                return (Status.NOT_FOUND, None)
            if value is None:
                return (Status.NOT_FOUND, None)  # tombstone
            if from_disk and populate_cache and self.read_cache is not None:
                if hot_handle is None:
                    hot_entry, hot_handle = self.hot_index.find_or_create_entry(h)
                    next_hot = entry_address(hot_entry)
                if not is_read_cache(next_hot):
                    self.read_cache.try_insert(key, h, value, next_hot,
                                               hot_handle, hot_entry)
            return (Status.OK, value)

    def _cold_lookup(self, key: bytes, h: int, lower_bound: int):
        """Walk the cold chain; (_FOUND, value|None, from_disk) on a match,
        (_MISS, ..) when exhausted, (_STALE, ..) when truncation raced."""
        hook = self._cold_step_hook
        entry = self.cold_index.find_entry(h)
        if hook is not None:
            hook("entry", key)
        fmt = self.fmt
        log = self.cold_log
        addr = entry_address(entry)
        while addr != INVALID_ADDRESS and addr >= lower_bound:
            try:
                loc = log.resolve(addr)
                if loc is not None:
                    buf, off, from_disk = loc[0], loc[1], False
                else:
                    buf, off, from_disk = log.read_record(addr), 0, True
            except StaleAddressError:
                return (_STALE, None, False)
            if hook is not None:
                hook("record", key)
            header = fmt.header_at(buf, off)
            if not header_is_invalid(header) and fmt.key_matches(buf, off, key):
                value = None if header_is_tombstone(header) \
                    else fmt.value_at(buf, off)
                return (_FOUND, value, from_disk)
            addr = header_previous(header)
        return (_MISS, None, False)

    # -- read-modify-write ----------------------------------------------------------

    def rmw(self, key: bytes, input, updater: Callable,
            initializer: Callable, completion=None) -> Status:
        """Atomic update: new value from updater(old, input), or
        initializer(key, input) when the key is absent."""
        self._check_key(key)
        h = hash_key(key)
        self.epoch.refresh_if_stale()
        self._counters["rmws"].fetch_add(1)
        while True:
            found = self.hot_index.find_entry(h)
            start_addr = INVALID_ADDRESS
            if found is not None:
                addr = entry_address(found[0])
                if is_read_cache(addr):
                    try:
                        start_addr = self.read_cache.chain_previous(
                            strip_read_cache(addr))
                    except StaleAddressError:
                        continue
                else:
                    start_addr = addr

            state = self._hot_rmw(key, h, input, updater)
            if state is Status.OK:
                break
            if state is _RETRY:
                self._counters["op_retries"].fetch_add(1)
                continue

            if state is _TOMBSTONE:
                cold_status, cold_value = Status.NOT_FOUND, None
            else:
                cold_status, cold_value = self._cold_read(
                    key, h, 0, None, INVALID_ADDRESS, populate_cache=False)
            if cold_status is Status.OK:
                new_value = updater(cold_value, input)
            else:
                new_value = initializer(key, input)
            self._check_value(new_value)

            # The snapshot range is undefined after a hot truncation.
            if start_addr != INVALID_ADDRESS \
                    and start_addr < self.hot_log.begin.load():
                self._counters["op_retries"].fetch_add(1)
                continue
            if self._conditional_insert_hot(key, h, new_value, start_addr):
                break
            self._counters["op_retries"].fetch_add(1)
        if completion is not None:
            completion(Status.OK, None)
        return Status.OK

    def _hot_rmw(self, key: bytes, h: int, input, updater: Callable):
        """RMW against the hot log only, never creating a record.

        Returns Status.OK, _MISS (no record), _TOMBSTONE (deleted; the
        cold log must not be consulted), or _RETRY.
        """
        fmt = self.fmt
        log = self.hot_log
        found = self.hot_index.find_entry(h)
        if found is None:
            return _MISS
        entry, handle = found
        addr = entry_address(entry)
        append_prev = addr
        cache_hit = None

        if is_read_cache(addr):
            cache_addr = strip_read_cache(addr)
            try:
                cbuf, coff = self.read_cache.log.resolve(cache_addr)
            except StaleAddressError:
                return _RETRY
            cheader = fmt.header_at(cbuf, coff)
            append_prev = header_previous(cheader)
            if not header_is_invalid(cheader) and fmt.key_matches(cbuf, coff, key):
                cache_hit = (cbuf, coff, fmt.value_at(cbuf, coff))
            addr = append_prev

        old_value = None
        if cache_hit is None:
            while addr != INVALID_ADDRESS:
                if addr < log.begin.load():
                    return _MISS  # rest of the chain was compacted away
                try:
                    loc = log.resolve(addr)
                except StaleAddressError:
                    return _MISS
                if loc is not None:
                    buf, off = loc
                    in_memory = True
                else:
                    try:
                        buf, off = log.read_record(addr), 0
                    except StaleAddressError:
                        return _MISS
                    in_memory = False
                header = fmt.header_at(buf, off)
                if not header_is_invalid(header) and fmt.key_matches(buf, off, key):
                    if header_is_tombstone(header):
                        return _TOMBSTONE
                    if in_memory and addr >= log.read_only.load():
                        with self._record_locks.for_key(addr):
                            if addr < log.read_only.load():
                                return _RETRY  # became immutable mid-op
                            old = fmt.value_at(buf, off)
                            fmt.set_value(buf, off, updater(old, input))
                        self._counters["inplace_updates"].fetch_add(1)
                        return Status.OK
                    old_value = fmt.value_at(buf, off)
                    break
                addr = header_previous(header)
            if old_value is None:
                return _MISS
        else:
            old_value = cache_hit[2]

        new_value = updater(old_value, input)
        self._check_value(new_value)
        if cache_hit is not None:
            fmt.mark_invalid(cache_hit[0], cache_hit[1])  # keep cache honest
        new_addr = self.hot_log.allocate_blocking()
        self.hot_log.write_record(new_addr, make_header(append_prev), key,
                                  new_value)
        if self.hot_index.try_update(handle, entry,
                                     make_entry(new_addr, self._tag(h))):
            self._counters["rcu_appends"].fetch_add(1)
            return Status.OK
        self.hot_log.mark_invalid(new_addr)
        return _RETRY

    # -- conditional insert -------------------------------------------------------

    def conditional_insert(self, key: bytes, value: bytes, start_addr: int,
                           source: str, target: str,
                           tombstone: bool = False) -> Status:
        """Append to `target` iff no record with this key exists in the
        source chain above start_addr.  Source/target: "hot" or "cold"."""
        self._check_key(key)
        if not tombstone:
            self._check_value(value)
        h = hash_key(key)
        if source == "hot" and target == "hot":
            ok = self._conditional_insert_hot(key, h, value, start_addr,
                                              tombstone)
        elif source == "hot" and target == "cold":
            ok = self._conditional_insert_hot_to_cold(key, h, value, tombstone,
                                                      start_addr)
        elif source == "cold" and target == "cold":
            ok = self._conditional_insert_cold(key, h, value, tombstone,
                                               start_addr)
        else:
            raise ValueError("unsupported source/target combination")
        return Status.OK if ok else Status.ABORTED

    def _walk_hot_for_match(self, key: bytes, top: int, bound: int) -> bool:
        """True if a valid record for key exists in (bound, top]."""
        fmt = self.fmt
        log = self.hot_log
        addr = top
        while addr != INVALID_ADDRESS and addr > bound:
            if addr < log.begin.load():
                return False  # truncated records are not "newer"
            try:
                loc = log.resolve(addr)
                if loc is not None:
                    buf, off = loc
                else:
                    buf, off = log.read_record(addr), 0
            except StaleAddressError:
                return False
            header = fmt.header_at(buf, off)
            if not header_is_invalid(header) and fmt.key_matches(buf, off, key):
                return True
            addr = header_previous(header)
        return False

    def _hot_chain_top(self, entry: int):
        """Hot-log head address for an entry, skipping a cache record."""
        addr = entry_address(entry)
        if is_read_cache(addr):
            try:
                return self.read_cache.chain_previous(strip_read_cache(addr))
            except StaleAddressError:
                return None
        return addr

    def _conditional_insert_hot(self, key: bytes, h: int, value: bytes,
                                start_addr: int, tombstone: bool = False) -> bool:
        bound = start_addr
        while True:
            entry, handle = self.hot_index.find_or_create_entry(h)
            top = self._hot_chain_top(entry)
            if top is None:
                continue  # cache eviction raced; re-read the entry
            if self._walk_hot_for_match(key, top, bound):
                return False
            new_addr = self.hot_log.allocate_blocking()
            self.hot_log.write_record(new_addr,
                                      make_header(top, tombstone=tombstone),
                                      key, value)
            if self.hot_index.try_update(handle, entry,
                                         make_entry(new_addr, self._tag(h))):
                return True
            self.hot_log.mark_invalid(new_addr)
            # Newer records were inserted meanwhile: re-scan just those.
            bound = max(bound, top if top != INVALID_ADDRESS else bound)

    def _conditional_insert_hot_to_cold(self, key: bytes, h: int, value: bytes,
                                        tombstone: bool, start_addr: int) -> bool:
        found = self.hot_index.find_entry(h)
        entry = found[0] if found is not None else 0
        top = self._hot_chain_top(entry)
        if top is None:
            top = entry_address(self.hot_index.find_entry(h)[0]) \
                if self.hot_index.find_entry(h) else INVALID_ADDRESS
            if is_read_cache(top):
                top = INVALID_ADDRESS
        if top is not None and self._walk_hot_for_match(key, top, start_addr):
            return False
        # Cold records are older by construction: a plain cold append
        # suffices, no cold-side re-check.
        self._cold_upsert(key, h, value, tombstone)
        self._counters["compaction_cold_inserts"].fetch_add(1)
        after = self.hot_index.find_entry(h)
        if (after[0] if after is not None else 0) != entry:
            # A user operation raced the walk; the copy may be non-live.
            self._counters["possibly_superfluous_cold_writes"].fetch_add(1)
        return True

    def _conditional_insert_cold(self, key: bytes, h: int, value: bytes,
                                 tombstone: bool, start_addr: int) -> bool:
        fmt = self.fmt
        log = self.cold_log
        bound = start_addr
        while True:
            entry = self.cold_index.find_entry(h)
            top = entry_address(entry)
            addr = top
            while addr != INVALID_ADDRESS and addr > bound:
                try:
                    loc = log.resolve(addr)
                    if loc is not None:
                        buf, off = loc
                    else:
                        buf, off = log.read_record(addr), 0
                except StaleAddressError:
                    break  # truncated records are not "newer"
                header = fmt.header_at(buf, off)
                if not header_is_invalid(header) \
                        and fmt.key_matches(buf, off, key):
                    return False
                addr = header_previous(header)
            new_addr = log.allocate_blocking()
            log.write_record(new_addr, make_header(top, tombstone=tombstone),
                             key, value)
            ok, _ = self.cold_index.modify_entry(
                h, entry, make_entry(new_addr, self._tag(h)))
            if ok:
                return True
            log.mark_invalid(new_addr)
            bound = max(bound, top)

    def _cold_upsert(self, key: bytes, h: int, value: bytes,
                     tombstone: bool) -> None:
        """Unconditional append to the cold tail with a chunk-entry CAS."""
        log = self.cold_log
        while True:
            entry = self.cold_index.find_entry(h)
            head = entry_address(entry)
            new_addr = log.allocate_blocking()
            log.write_record(new_addr, make_header(head, tombstone=tombstone),
                             key, value)
            ok, _ = self.cold_index.modify_entry(
                h, entry, make_entry(new_addr, self._tag(h)))
            if ok:
                return
            log.mark_invalid(new_addr)
            self._counters["op_retries"].fetch_add(1)

    # -- compaction ------------------------------------------------------------------

    def compact(self, source: str, until_addr: int | None = None,
                thread_count: int = 1) -> int:
        """Lookup-based compaction of the oldest region of a log.

        Copies live records (and tombstones, for the hot source) to the
        cold tail, truncates the source, and scrubs stale index entries.
        Returns the number of records copied.  User operations keep
        running throughout; one compaction per source at a time.
        """
        src = {"hot": self.hot_log, "cold": self.cold_log}[source]
        with self._compaction_locks[source]:
            begin = src.begin.load()
            head = src.head.load()
            if until_addr is None:
                until_addr = begin + int(self.cfg.compact_fraction
                                         * max(0, head - begin))
            until = min(until_addr, head) & ~src.page_mask
            if until <= begin:
                return 0
            frames = _CompactionFrames(src, begin, until,
                                       self.cfg.compaction_frames, self.epoch)
            self._compaction_peak = max(self._compaction_peak,
                                        frames.resident_bytes)
            live = AtomicU64(0)

            def work():
                self.epoch.protect()
                try:
                    while True:
                        item = frames.next_record()
                        if item is None:
                            return
                        addr, header, key, value = item
                        self.epoch.refresh_if_stale()
                        if header_is_invalid(header):
                            continue
                        tomb = header_is_tombstone(header)
                        if tomb and source == "cold":
                            continue  # nothing older can exist below begin
                        kh = hash_key(key)
                        if source == "hot":
                            ok = self._conditional_insert_hot_to_cold(
                                key, kh, value, tomb, addr)
                        else:
                            ok = self._conditional_insert_cold(
                                key, kh, value, tomb, addr)
                        if ok:
                            live.fetch_add(1)
                finally:
                    self.epoch.unprotect()

            if thread_count <= 1:
                work()
            else:
                workers = [threading.Thread(target=work, daemon=True)
                           for _ in range(thread_count)]
                for w in workers:
                    w.start()
                for w in workers:
                    w.join()

            src.truncate_begin(until)
            if source == "hot":
                self.hot_index.scrub_stale_entries(until)
                self._counters["hot_compactions"].fetch_add(1)
            else:
                self._scrub_cold_entries(until)
                self._counters["cold_compactions"].fetch_add(1)
            return live.load()

    def _scrub_cold_entries(self, until: int) -> None:
        """Free chunk entries that still point below the new cold begin."""
        chunk_bits = self.cold_index.chunk_bits
        for (chunk_id, offset), entry in self.cold_index.scan_entries():
            if entry_address(entry) < until:
                pseudo_hash = chunk_id | (offset << chunk_bits)
                self.cold_index.modify_entry(pseudo_hash, entry, 0)

    def compact_chunk_log(self, until: int | None = None) -> int:
        with self._compaction_locks["chunks"]:
            moved = self.cold_index.compact_chunk_log(until)
            self._counters["chunk_compactions"].fetch_add(1)
            return moved

    # -- background compaction ------------------------------------------------------

    def start_background_compaction(self, interval: float = 0.02) -> None:
        """Monitor disk budgets; compact the oldest fraction past trigger."""
        if self._bg_thread is not None:
            return
        self._bg_stop.clear()

        def loop():
            cfg = self.cfg
            while not self._bg_stop.wait(interval):
                try:
                    if self.hot_log.disk_size() \
                            >= cfg.trigger_fraction * cfg.hot_disk_budget:
                        self.compact("hot",
                                     thread_count=cfg.compaction_threads)
                    if self.cold_log.disk_size() \
                            >= cfg.trigger_fraction * cfg.cold_disk_budget:
                        self.compact("cold",
                                     thread_count=cfg.compaction_threads)
                    if self.cold_index.chunk_log.disk_size() \
                            >= cfg.trigger_fraction * cfg.chunk_log_disk_budget:
                        self.compact_chunk_log()
                except Exception as exc:  # surfaced via metrics/close
                    self._bg_error = exc
                    return

        self._bg_thread = threading.Thread(target=loop, daemon=True,
                                           name="f2kv-compactor")
        self._bg_thread.start()

    def stop_background_compaction(self) -> None:
        if self._bg_thread is None:
            return
        self._bg_stop.set()
        self._bg_thread.join()
        self._bg_thread = None
        if self._bg_error is not None:
            raise self._bg_error

    # -- metrics ----------------------------------------------------------------------

    def metrics(self) -> Metrics:
        devices = (self.hot_device, self.cold_device, self.chunk_device)
        cache = self.read_cache
        return Metrics(
            reads=self._counters["reads"].load(),
            upserts=self._counters["upserts"].load(),
            deletes=self._counters["deletes"].load(),
            rmws=self._counters["rmws"].load(),
            op_retries=self._counters["op_retries"].load(),
            inplace_updates=self._counters["inplace_updates"].load(),
            rcu_appends=self._counters["rcu_appends"].load(),
            cache_hits=cache.hits if cache else 0,
            cache_insert_attempts=cache.insert_attempts if cache else 0,
            cache_insert_aborts=cache.insert_aborts if cache else 0,
            cache_evicted_records=cache.evicted_records if cache else 0,
            false_absence_rescans=self._counters["false_absence_rescans"].load(),
            possibly_superfluous_cold_writes=self._counters[
                "possibly_superfluous_cold_writes"].load(),
            compaction_cold_inserts=self._counters[
                "compaction_cold_inserts"].load(),
            hot_compactions=self._counters["hot_compactions"].load(),
            cold_compactions=self._counters["cold_compactions"].load(),
            chunk_compactions=self._counters["chunk_compactions"].load(),
            num_truncs_cold=self.cold_log.num_truncs.load(),
            device_read_bytes=sum(d.bytes_read.load() for d in devices),
            device_write_bytes=sum(d.bytes_written.load() for d in devices),
            device_reads=sum(d.reads_completed.load() for d in devices),
            device_writes=sum(d.writes_completed.load() for d in devices),
            compaction_peak_frame_bytes=self._compaction_peak,
            hot_markers=self.hot_log.markers(),
            cold_markers=self.cold_log.markers(),
            cold_index_memory_bytes=self.cold_index.memory_bytes(),
        )
