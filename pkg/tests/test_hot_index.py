"""Latch-free hash table: lookup, tentative creation, CAS, scrubbing."""

import itertools
import threading

import pytest

from f2kv._atomics import AtomicU64Array
from f2kv.errors import CapacityError
from f2kv.hot_index import ENTRY_SLOTS, HashTable
from f2kv.records import (ENTRY_TENTATIVE_BIT, INVALID_ADDRESS, TAG_SHIFT,
                          entry_address, entry_tag, make_entry,
                          with_read_cache)


def make_hash(bucket, tag, bucket_bits=4):
    return (bucket & ((1 << bucket_bits) - 1)) | (tag << TAG_SHIFT)


@pytest.fixture
def table():
    return HashTable(16)


def test_find_entry_empty(table):
    assert table.find_entry(make_hash(3, 7)) is None


def test_create_then_find(table):
    h = make_hash(3, 7)
    entry, handle = table.find_or_create_entry(h)
    assert entry_address(entry) == INVALID_ADDRESS
    assert entry_tag(entry) == 7
    found = table.find_entry(h)
    assert found is not None and found[0] == entry
    assert found[1].index == handle.index


def test_same_bucket_distinct_tags_separate_entries(table):
    # Brute force every ordered pair of distinct tags placed in one
    # bucket: each hash must find its own entry.
    for t1, t2 in itertools.permutations(range(1, 5), 2):
        tbl = HashTable(16)
        h1, h2 = make_hash(5, t1), make_hash(5, t2)
        e1, h1h = tbl.find_or_create_entry(h1)
        e2, h2h = tbl.find_or_create_entry(h2)
        assert h1h.index != h2h.index
        tbl.try_update(h1h, e1, make_entry(0x100, t1))
        tbl.try_update(h2h, e2, make_entry(0x200, t2))
        assert entry_address(tbl.find_entry(h1)[0]) == 0x100
        assert entry_address(tbl.find_entry(h2)[0]) == 0x200


def test_try_update_semantics(table):
    h = make_hash(0, 9)
    entry, handle = table.find_or_create_entry(h)
    new = make_entry(0x40, 9)
    assert table.try_update(handle, entry, new)
    assert not table.try_update(handle, entry, make_entry(0x80, 9))
    assert table.find_entry(h)[0] == new


def test_aba_tolerated_by_design(table):
    # Slot changes away and back: CAS succeeds.  Acceptable because log
    # addresses are monotonic and never repeat in store usage.
    h = make_hash(0, 9)
    entry, handle = table.find_or_create_entry(h)
    mid = make_entry(0x40, 9)
    assert table.try_update(handle, entry, mid)
    assert table.try_update(handle, mid, entry)
    assert table.try_update(handle, entry, make_entry(0x80, 9))


def test_concurrent_create_storm_single_survivor():
    for rounds in range(20):
        tbl = HashTable(8)
        h = make_hash(2, 11, bucket_bits=3)
        results = []
        barrier = threading.Barrier(8)
        lock = threading.Lock()

        def worker():
            barrier.wait()
            entry, handle = tbl.find_or_create_entry(h)
            with lock:
                results.append((handle._array is tbl._main, handle.index))

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        # every caller adopted the same slot
        assert len(set(results)) == 1
        matches = [hd.load() for _, hd in tbl.all_handles()
                   if hd.load() and entry_tag(hd.load()) == 11]
        assert len(matches) == 1
        assert not matches[0] & ENTRY_TENTATIVE_BIT


class HookedArray(AtomicU64Array):
    """Shares another array's storage, calling a hook around each CAS."""

    __slots__ = ("after_cas",)

    def __init__(self, base: AtomicU64Array):
        self._slots = base._slots
        self._locks = base._locks
        self.after_cas = None

    def compare_exchange(self, i, expected, desired):
        ok = AtomicU64Array.compare_exchange(self, i, expected, desired)
        if self.after_cas is not None:
            self.after_cas(ok, i, expected, desired)
        return ok


def test_forced_tentative_collision_resolves():
    # Deterministic schedule: both threads claim tentative slots before
    # either rescans.  The earlier slot must win; both callers agree.
    tbl = HashTable(8)
    h = make_hash(1, 5, bucket_bits=3)
    claimed = threading.Barrier(2)
    passed = threading.local()
    hooked = HookedArray(tbl._main)

    def gate(ok, i, expected, desired):
        if ok and desired & ENTRY_TENTATIVE_BIT \
                and not getattr(passed, "done", False):
            passed.done = True
            claimed.wait(timeout=5)  # hold until the rival also claimed

    hooked.after_cas = gate
    tbl._main = hooked
    results = []
    lock = threading.Lock()

    def worker():
        entry, handle = tbl.find_or_create_entry(h)
        with lock:
            results.append(handle.index)

    threads = [threading.Thread(target=worker) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1
    live = [hd.load() for _, hd in tbl.all_handles()
            if hd.load() and entry_tag(hd.load()) == 5]
    assert len(live) == 1 and not live[0] & ENTRY_TENTATIVE_BIT


def test_overflow_bucket_allocation(table):
    # Fill the seven entry slots of one bucket, then add more tags: the
    # eighth entry must land in an overflow bucket and stay findable.
    hashes = [make_hash(6, t) for t in range(1, 12)]
    handles = {}
    for h in hashes:
        entry, handle = table.find_or_create_entry(h)
        handles[h] = handle
    assert len({(id(h._array), h.index) for h in handles.values()}) == len(hashes)
    for h in hashes:
        assert table.find_entry(h) is not None
    assert table.memory_bytes() > table.bucket_count * 64


def test_overflow_pool_capacity_error():
    tbl = HashTable(8, overflow_capacity=1)
    created = 0
    with pytest.raises(CapacityError):
        for t in range(1, 40):
            tbl.find_or_create_entry(make_hash(0, t, bucket_bits=3))
            created += 1
    assert created >= ENTRY_SLOTS


def test_scrub_frees_stale_entries(table):
    h1, h2 = make_hash(1, 3), make_hash(2, 4)
    e1, hd1 = table.find_or_create_entry(h1)
    e2, hd2 = table.find_or_create_entry(h2)
    table.try_update(hd1, e1, make_entry(0x100, 3))
    table.try_update(hd2, e2, make_entry(0x9000, 4))
    assert table.scrub_stale_entries(0x1000) == 1
    assert table.find_entry(h1) is None
    assert entry_address(table.find_entry(h2)[0]) == 0x9000


def test_scrub_skips_read_cache_entries(table):
    h = make_hash(1, 3)
    e, hd = table.find_or_create_entry(h)
    table.try_update(hd, e, make_entry(with_read_cache(0x10), 3))
    assert table.scrub_stale_entries(0x1000) == 0
    assert table.find_entry(h) is not None


def test_scrub_leaves_concurrently_moved_entries(table):
    h = make_hash(1, 3)
    e, hd = table.find_or_create_entry(h)
    table.try_update(hd, e, make_entry(0x10, 3))

    class RacingArray(HookedArray):
        __slots__ = ()

        def compare_exchange(self, i, expected, desired):
            if desired == 0:
                # Another thread moves the entry to a tail address just
                # before the scrub's CAS: the scrub must lose and skip.
                AtomicU64Array.compare_exchange(self, i, expected,
                                                make_entry(0x9999_8, 3))
            return AtomicU64Array.compare_exchange(self, i, expected, desired)

    table._main = RacingArray(table._main)
    assert table.scrub_stale_entries(0x1000) == 0
    assert entry_address(table.find_entry(h)[0]) == 0x9999_8


def test_at_most_one_entry_per_tag_after_storm():
    tbl = HashTable(4)
    hashes = [make_hash(b, t, bucket_bits=2)
              for b in range(4) for t in range(1, 6)]
    barrier = threading.Barrier(6)

    def worker(seed):
        barrier.wait()
        for h in hashes[seed % 2 :: 1]:
            tbl.find_or_create_entry(h)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    per_key = {}
    for bucket, hd in tbl.all_handles():
        e = hd.load()
        if e and not e & ENTRY_TENTATIVE_BIT:
            per_key.setdefault((bucket, entry_tag(e)), []).append(e)
    assert per_key and all(len(v) == 1 for v in per_key.values())


def test_entry_count_and_memory_accounting():
    tbl = HashTable(16, overflow_capacity=8)
    assert tbl.memory_bytes() == 16 * 64  # nothing allocated beyond buckets
    for t in range(1, 4):
        tbl.find_or_create_entry(make_hash(1, t))
    assert tbl.entry_count() == 3
