import pytest

from f2kv.device import RamDevice
from f2kv.epoch import EpochFramework
from f2kv.hybrid_log import HybridLog
from f2kv.records import RecordFormat
from f2kv.store import F2Store, StoreConfig


@pytest.fixture
def epoch():
    return EpochFramework()


@pytest.fixture
def ram_device():
    return RamDevice(segment_size=1 << 20)


def make_log(epoch, device=None, key_size=8, value_size=24, page_size=4096,
             memory_pages=4, **kw):
    device = device or RamDevice(segment_size=1 << 20, sector_size=512)
    fmt = RecordFormat(key_size, value_size)
    return HybridLog(fmt, page_size, memory_pages, epoch, device=device, **kw)


@pytest.fixture
def small_store():
    store = F2Store(StoreConfig.small())
    yield store
    store.close()


@pytest.fixture
def small_store_no_cache():
    store = F2Store(StoreConfig.small(read_cache_bytes=0))
    yield store
    store.close()


def value_for(i: int, size: int = 108) -> bytes:
    stamp = (i & ((1 << 64) - 1)).to_bytes(8, "little")
    return (stamp * ((size + 7) // 8))[:size]


def key_for(i: int) -> bytes:
    return i.to_bytes(8, "little")
