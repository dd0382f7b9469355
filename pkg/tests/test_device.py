"""Device layer: aligned async I/O, segmentation, truncation, counters."""

import os
import threading

import pytest

from f2kv.device import RamDevice, SegmentedFile
from f2kv.errors import AlignmentError, DeviceError, StaleAddressError

SECTOR = 4096


@pytest.fixture(params=["file", "ram"])
def device(request, tmp_path):
    if request.param == "file":
        dev = SegmentedFile(str(tmp_path / "t"), segment_size=4 * SECTOR,
                            direct_io=False)
    else:
        dev = RamDevice(segment_size=4 * SECTOR)
    yield dev
    dev.close()


def pattern(length, seed=0):
    return bytes((i * 131 + seed) % 256 for i in range(length))


def write_sync(dev, offset, data):
    dev.write_async(offset, data).result(timeout=10)


def read_sync(dev, offset, length):
    return dev.read_async(offset, length).result(timeout=10)


def test_write_read_back(device):
    data = pattern(SECTOR)
    results = []
    device.write_async(0, data, completion=lambda err: results.append(err)) \
        .result(timeout=10)
    assert results == [None]
    assert read_sync(device, 0, SECTOR) == data
    assert device.bytes_written.load() == SECTOR
    assert device.bytes_read.load() == SECTOR


def test_misaligned_write_rejected(device):
    with pytest.raises(AlignmentError):
        device.write_async(SECTOR - 1, bytes(SECTOR))
    with pytest.raises(AlignmentError):
        device.write_async(0, bytes(SECTOR - 5))
    with pytest.raises(AlignmentError):
        device.read_async(0, 100)


def test_write_spanning_segments(device):
    # Segment size is 4 sectors; this write covers the last sector of
    # segment 0 and the first of segment 1.  Oracle: byte-for-byte
    # read-back of both halves and of the whole range.
    data = pattern(2 * SECTOR, seed=3)
    offset = 3 * SECTOR
    write_sync(device, offset, data)
    assert read_sync(device, offset, 2 * SECTOR) == data
    assert read_sync(device, offset, SECTOR) == data[:SECTOR]
    assert read_sync(device, 4 * SECTOR, SECTOR) == data[SECTOR:]


def test_read_unwritten_errors(device):
    errors = []
    write_sync(device, 0, bytes(SECTOR))
    fut = device.read_async(8 * SECTOR, SECTOR,
                            completion=lambda e, d: errors.append(e))
    with pytest.raises(DeviceError):
        fut.result(timeout=10)
    assert isinstance(errors[0], DeviceError)


def test_concurrent_overlapping_reads(device):
    data = pattern(SECTOR, seed=9)
    write_sync(device, 0, data)
    results = []
    lock = threading.Lock()

    def reader():
        got = read_sync(device, 0, SECTOR)
        with lock:
            results.append(got)

    threads = [threading.Thread(target=reader) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == data for r in results)


def test_truncate_below_deletes_whole_segments(tmp_path):
    dev = SegmentedFile(str(tmp_path / "t"), segment_size=4 * SECTOR,
                        direct_io=False)
    for seg in range(3):
        write_sync(dev, seg * 4 * SECTOR, pattern(4 * SECTOR, seed=seg))
    assert (tmp_path / "t.log.0").exists()
    dev.truncate_below(2 * 4 * SECTOR)
    assert not (tmp_path / "t.log.0").exists()
    assert not (tmp_path / "t.log.1").exists()
    assert (tmp_path / "t.log.2").exists()
    with pytest.raises(StaleAddressError):
        read_sync(dev, 0, SECTOR)
    assert read_sync(dev, 2 * 4 * SECTOR, SECTOR) == pattern(4 * SECTOR, seed=2)[:SECTOR]
    dev.close()


def test_truncate_zero_is_noop(device):
    write_sync(device, 0, pattern(SECTOR))
    device.truncate_below(0)
    assert read_sync(device, 0, SECTOR) == pattern(SECTOR)


def test_truncate_mid_segment_rounds_down(device):
    seg = device.segment_size
    for s in range(2):
        write_sync(device, s * seg, pattern(seg, seed=s))
    device.truncate_below(seg + SECTOR)  # mid segment 1: only seg 0 goes
    with pytest.raises(StaleAddressError):
        read_sync(device, 0, SECTOR)
    assert read_sync(device, seg, SECTOR) == pattern(seg, seed=1)[:SECTOR]


def test_counters_sum_of_transfers(device):
    sizes = [SECTOR, 2 * SECTOR, SECTOR, 3 * SECTOR]
    offset = 0
    for s in sizes:
        write_sync(device, offset, pattern(s))
        offset += s
    reads = [SECTOR, 4 * SECTOR]
    offset = 0
    for s in reads:
        read_sync(device, offset, s)
        offset += s
    assert device.bytes_written.load() == sum(sizes)
    assert device.bytes_read.load() == sum(reads)
    assert device.writes_completed.load() == len(sizes)
    assert device.reads_completed.load() == len(reads)


def test_direct_io_attempt_falls_back(tmp_path):
    dev = SegmentedFile(str(tmp_path / "d"), segment_size=4 * SECTOR,
                        direct_io=True)
    data = pattern(2 * SECTOR, seed=1)
    write_sync(dev, 0, data)
    assert read_sync(dev, 0, 2 * SECTOR) == data
    assert isinstance(dev.using_direct_io, bool)
    dev.close()


def test_reopen_discovers_existing_segments(tmp_path):
    dev = SegmentedFile(str(tmp_path / "r"), segment_size=4 * SECTOR,
                        direct_io=False)
    data = pattern(4 * SECTOR, seed=5)
    write_sync(dev, 0, data)
    dev.close()
    dev2 = SegmentedFile(str(tmp_path / "r"), segment_size=4 * SECTOR,
                         direct_io=False)
    assert read_sync(dev2, 0, 4 * SECTOR) == data
    dev2.close()


def test_last_write_wins_per_sector(device):
    write_sync(device, 0, pattern(2 * SECTOR, seed=1))
    write_sync(device, SECTOR, pattern(SECTOR, seed=2))
    assert read_sync(device, 0, SECTOR) == pattern(2 * SECTOR, seed=1)[:SECTOR]
    assert read_sync(device, SECTOR, SECTOR) == pattern(SECTOR, seed=2)


def test_read_delay_hook_runs_in_io_path(device):
    seen = []
    device.read_delay = lambda off, ln: seen.append((off, ln))
    write_sync(device, 0, bytes(SECTOR))
    read_sync(device, 0, SECTOR)
    assert seen == [(0, SECTOR)]
