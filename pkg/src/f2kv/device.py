"""Page-aligned persistent storage behind the record logs.

A log's address space maps 1:1 onto a growing sequence of segment files
(`<prefix>.log.<n>`, raw pages, no header).  All I/O is asynchronous and
sector aligned; completions may fire on any thread.  Truncating a dead
prefix unlinks whole segments.  Byte counters feed the amplification
accounting in the benchmark reports.

Direct (cache-bypassing) I/O is attempted when requested; platforms or
filesystems that reject O_DIRECT silently fall back to buffered I/O.
An in-memory double (`RamDevice`) implements the same interface for
unit tests and fault injection.
"""

from __future__ import annotations

import glob
import mmap
import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Optional

from ._atomics import AtomicU64
from .errors import AlignmentError, DeviceError, StaleAddressError

SECTOR_SIZE = 4096
DEFAULT_SEGMENT_SIZE = 1 << 30  # 1 GiB: truncation is a cheap unlink

Completion = Callable[[Optional[Exception]], None]
ReadCompletion = Callable[[Optional[Exception], Optional[bytes]], None]


class _DeviceBase:
    """Shared counters, alignment checks, and fault-injection hooks."""

    def __init__(self, sector_size: int = SECTOR_SIZE):
        self.sector_size = sector_size
        self.bytes_read = AtomicU64(0)
        self.bytes_written = AtomicU64(0)
        self.reads_completed = AtomicU64(0)
        self.writes_completed = AtomicU64(0)
        # Optional hooks, called in the I/O thread before the transfer.
        self.read_delay: Callable[[int, int], None] | None = None
        self.write_delay: Callable[[int, int], None] | None = None

    def _check_aligned(self, offset: int, length: int) -> None:
        if offset % self.sector_size or length % self.sector_size or length <= 0:
            raise AlignmentError(
                f"offset={offset} length={length} not multiples of {self.sector_size}")


class SegmentedFile(_DeviceBase):
    """Asynchronous sector-aligned I/O over `<prefix>.log.<n>` segments."""

    def __init__(self, prefix: str, segment_size: int = DEFAULT_SEGMENT_SIZE,
                 sector_size: int = SECTOR_SIZE, direct_io: bool | str = "auto",
                 io_threads: int = 2):
        super().__init__(sector_size)
        self.prefix = str(prefix)
        self.segment_size = segment_size
        self._want_direct = direct_io in (True, "auto")
        self._direct_failed = direct_io is False
        self._fds: dict[int, int] = {}
        self._fd_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=io_threads,
                                        thread_name_prefix="f2kv-io")
        self._high_water = AtomicU64(0)
        self.truncated_below = 0
        self._first_segment = 0
        self._closed = False
        self._discover()

    @property
    def using_direct_io(self) -> bool:
        return self._want_direct and not self._direct_failed

    def _segment_path(self, segment: int) -> str:
        return f"{self.prefix}.log.{segment}"

    def _discover(self) -> None:
        # Pick up segments from a previous open of the same prefix.
        for path in glob.glob(glob.escape(self.prefix) + ".log.*"):
            try:
                segment = int(path.rsplit(".", 1)[1])
            except ValueError:
                continue
            end = segment * self.segment_size + os.path.getsize(path)
            self._high_water.max_update(end)

    def _open_segment(self, segment: int) -> int:
        flags = os.O_RDWR | os.O_CREAT
        if self.using_direct_io:
            try:
                return os.open(self._segment_path(segment),
                               flags | os.O_DIRECT, 0o644)
            except OSError:
                self._direct_failed = True
        return os.open(self._segment_path(segment), flags, 0o644)

    def _fd(self, segment: int) -> int:
        fd = self._fds.get(segment)
        if fd is not None:
            return fd
        with self._fd_lock:
            fd = self._fds.get(segment)
            if fd is None:
                fd = self._open_segment(segment)
                self._fds[segment] = fd
            return fd

    # -- writes --------------------------------------------------------

    def write_async(self, offset: int, data: bytes,
                    completion: Completion | None = None) -> Future:
        self._check_aligned(offset, len(data))
        if self._closed:
            raise DeviceError("device is closed")

        def task() -> None:
            if self.write_delay:
                self.write_delay(offset, len(data))
            pos = 0
            while pos < len(data):
                at = offset + pos
                segment, in_seg = divmod(at, self.segment_size)
                chunk = data[pos : pos + min(len(data) - pos,
                                             self.segment_size - in_seg)]
                self._pwrite(self._fd(segment), chunk, in_seg)
                pos += len(chunk)
            self._high_water.max_update(offset + len(data))
            self.bytes_written.fetch_add(len(data))
            self.writes_completed.fetch_add(1)

        return self._submit(task, completion)

    def _pwrite(self, fd: int, data: bytes, file_offset: int) -> None:
        if self.using_direct_io:
            buf = mmap.mmap(-1, len(data))
            try:
                buf[:] = data
                os.pwritev(fd, [buf], file_offset)
                return
            except OSError:
                self._direct_failed = True
            finally:
                buf.close()
        os.pwrite(fd, data, file_offset)

    # -- reads ---------------------------------------------------------

    def read_async(self, offset: int, length: int,
                   completion: ReadCompletion | None = None) -> Future:
        self._check_aligned(offset, length)
        if self._closed:
            raise DeviceError("device is closed")

        def task() -> bytes:
            if self.read_delay:
                self.read_delay(offset, length)
            if offset < self.truncated_below:
                raise StaleAddressError(
                    f"read at {offset} below truncation boundary {self.truncated_below}")
            if offset + length > self._high_water.load():
                raise DeviceError(f"read of unwritten range [{offset}, {offset + length})")
            out = bytearray()
            pos = 0
            while pos < length:
                at = offset + pos
                segment, in_seg = divmod(at, self.segment_size)
                n = min(length - pos, self.segment_size - in_seg)
                out += self._pread(self._fd(segment), n, in_seg)
                pos += n
            self.bytes_read.fetch_add(length)
            self.reads_completed.fetch_add(1)
            return bytes(out)

        return self._submit(task, completion, with_data=True)

    def _pread(self, fd: int, length: int, file_offset: int) -> bytes:
        if self.using_direct_io:
            buf = mmap.mmap(-1, length)
            try:
                n = os.preadv(fd, [buf], file_offset)
                data = bytes(buf[:length])
            except OSError:
                self._direct_failed = True
            else:
                if n < length:
                    data = data[:n] + bytes(length - n)
                return data
            finally:
                buf.close()
        data = os.pread(fd, length, file_offset)
        if len(data) < length:
            data += bytes(length - len(data))
        return data

    def _submit(self, task, completion, with_data: bool = False) -> Future:
        future: Future = Future()

        def run() -> None:
            try:
                result = task()
            except Exception as exc:  # surfaced through the completion
                future.set_exception(exc)
                if completion:
                    completion(exc, None) if with_data else completion(exc)
            else:
                future.set_result(result)
                if completion:
                    completion(None, result) if with_data else completion(None)

        self._pool.submit(run)
        return future

    # -- truncation and lifecycle ---------------------------------------

    def truncate_below(self, offset: int) -> None:
        """Unlink all segments entirely below offset (rounded down)."""
        boundary_segment = offset // self.segment_size
        with self._fd_lock:
            while self._first_segment < boundary_segment:
                path = self._segment_path(self._first_segment)
                # Keep any open fd so in-flight reads are unaffected.
                if os.path.exists(path):
                    os.unlink(path)
                self._first_segment += 1
            boundary = boundary_segment * self.segment_size
            if boundary > self.truncated_below:
                self.truncated_below = boundary

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._pool.shutdown(wait=True)
        with self._fd_lock:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()


class RamDevice(_DeviceBase):
    """In-memory device double: same interface, inline completions."""

    def __init__(self, segment_size: int = DEFAULT_SEGMENT_SIZE,
                 sector_size: int = SECTOR_SIZE):
        super().__init__(sector_size)
        self.segment_size = segment_size
        self._segments: dict[int, bytearray] = {}
        self._lock = threading.Lock()
        self._high_water = AtomicU64(0)
        self.truncated_below = 0

    def _segment(self, index: int) -> bytearray:
        seg = self._segments.get(index)
        if seg is None:
            with self._lock:
                seg = self._segments.setdefault(index, bytearray(self.segment_size))
        return seg

    def write_async(self, offset: int, data: bytes,
                    completion: Completion | None = None) -> Future:
        self._check_aligned(offset, len(data))
        future: Future = Future()
        try:
            if self.write_delay:
                self.write_delay(offset, len(data))
            pos = 0
            while pos < len(data):
                at = offset + pos
                segment, in_seg = divmod(at, self.segment_size)
                n = min(len(data) - pos, self.segment_size - in_seg)
                self._segment(segment)[in_seg : in_seg + n] = data[pos : pos + n]
                pos += n
            self._high_water.max_update(offset + len(data))
            self.bytes_written.fetch_add(len(data))
            self.writes_completed.fetch_add(1)
        except Exception as exc:
            future.set_exception(exc)
            if completion:
                completion(exc)
            return future
        future.set_result(None)
        if completion:
            completion(None)
        return future

    def read_async(self, offset: int, length: int,
                   completion: ReadCompletion | None = None) -> Future:
        self._check_aligned(offset, length)
        future: Future = Future()
        try:
            if self.read_delay:
                self.read_delay(offset, length)
            if offset < self.truncated_below:
                raise StaleAddressError(
                    f"read at {offset} below truncation boundary {self.truncated_below}")
            if offset + length > self._high_water.load():
                raise DeviceError(f"read of unwritten range [{offset}, {offset + length})")
            out = bytearray()
            pos = 0
            while pos < length:
                at = offset + pos
                segment, in_seg = divmod(at, self.segment_size)
                n = min(length - pos, self.segment_size - in_seg)
                out += self._segment(segment)[in_seg : in_seg + n]
                pos += n
            self.bytes_read.fetch_add(length)
            self.reads_completed.fetch_add(1)
        except Exception as exc:
            future.set_exception(exc)
            if completion:
                completion(exc, None)
            return future
        data = bytes(out)
        future.set_result(data)
        if completion:
            completion(None, data)
        return future

    def truncate_below(self, offset: int) -> None:
        boundary_segment = offset // self.segment_size
        with self._lock:
            for index in [i for i in self._segments if i < boundary_segment]:
                del self._segments[index]
            boundary = boundary_segment * self.segment_size
            if boundary > self.truncated_below:
                self.truncated_below = boundary

    def close(self) -> None:
        self._segments.clear()
