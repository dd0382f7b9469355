"""Workload driver: load, warm-up, timed run, and report generation.

Reproduces the YCSB-style experiments at desk scale: pick a mix (A, B,
C, D, or F), a key distribution, and counts; the driver loads the
dataset, warms the store, runs the timed phase with one client thread
per worker, and reports throughput plus device-level read and write
amplification.

Amplification is defined against device counters: read amplification is
device bytes read divided by (records returned x record size), write
amplification is device bytes written divided by (user writes x record
size), where record size is the full stored record (header + key +
value, 8-aligned).
"""

from __future__ import annotations

import csv
import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .records import RecordFormat, mix_hash
from .store import F2Store, Status, StoreConfig
from .workloads import (WORKLOAD_MIXES, KeyDistribution, encode_key,
                        parse_distribution)


@dataclass
class WorkloadSpec:
    workload: str = "A"
    distribution: str = "zipfian"
    key_count: int = 1_000_000
    key_size: int = 8
    value_size: int = 108
    op_count: int = 1_000_000
    warmup_ops: int = 100_000
    thread_count: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.workload not in WORKLOAD_MIXES:
            raise ValueError(f"unknown workload {self.workload!r}")


@dataclass
class RunReport:
    workload: str
    distribution: str
    key_count: int
    op_count: int
    thread_count: int
    seed: int
    duration_s: float
    completed_ops: int
    throughput_kops: float
    records_returned: int
    user_writes: int
    record_size: int
    device_read_bytes: int
    device_write_bytes: int
    read_amplification: float
    write_amplification: float
    retries: int
    num_truncs: int
    cache_hits: int
    hot_compactions: int
    cold_compactions: int
    timeline: list = field(default_factory=list)  # (t_seconds, ops_total)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        lines = [
            f"workload {self.workload} ({self.distribution}), "
            f"{self.key_count} keys, {self.thread_count} thread(s), "
            f"seed {self.seed}",
            f"  ops completed     : {self.completed_ops} in {self.duration_s:.2f}s",
            f"  throughput        : {self.throughput_kops:.1f} kops/s",
            f"  device read bytes : {self.device_read_bytes}",
            f"  device write bytes: {self.device_write_bytes}",
            f"  read amplification : {self.read_amplification:.3f}",
            f"  write amplification: {self.write_amplification:.3f}",
            f"  retries: {self.retries}  truncations: {self.num_truncs}  "
            f"cache hits: {self.cache_hits}",
            f"  compactions: hot {self.hot_compactions}, "
            f"cold {self.cold_compactions}",
        ]
        return "\n".join(lines)


def make_value(key_index: int, value_size: int) -> bytes:
    stamp = mix_hash(key_index).to_bytes(8, "little")
    reps = -(-value_size // 8)
    return (stamp * reps)[:value_size]


def bench_updater(old: bytes, _input) -> bytes:
    """RMW logic for the F mix: bump the low 8 bytes, keep the rest."""
    counter = int.from_bytes(old[:8], "little") + 1
    return counter.to_bytes(8, "little") + old[8:]


def set_read_latency(store: F2Store, seconds: float) -> None:
    """Inject a fixed per-read device latency (NVMe-style simulation)."""
    def delay(_offset, _length, s=seconds):
        time.sleep(s)
    for dev in (store.hot_device, store.cold_device, store.chunk_device):
        dev.read_delay = delay if seconds > 0 else None


class _Worker(threading.Thread):
    def __init__(self, index: int, spec: WorkloadSpec, store: F2Store,
                 op_quota: int, barrier: threading.Barrier):
        super().__init__(daemon=True, name=f"bench-{index}")
        self.index = index
        self.spec = spec
        self.store = store
        self.quota = op_quota
        self.barrier = barrier
        self.dist = parse_distribution(spec.distribution, spec.key_count,
                                       spec.seed + 7777 * index)
        self.mix = WORKLOAD_MIXES[spec.workload]
        self.completed = 0
        self.records_returned = 0
        self.user_writes = 0
        self.insert_cursor = spec.key_count + index
        self.error: Exception | None = None

    def run(self):
        spec = self.spec
        store = self.store
        rng = self.dist.rng
        read_p, update_p, insert_p, _rmw_p = self.mix
        initializer = lambda _key, _inp: bytes(spec.value_size)
        try:
            self.barrier.wait()
            with store.session():
                while self.completed < self.quota:
                    r = rng.random()
                    if r < read_p:
                        key = encode_key(self.dist.draw(), spec.key_size)
                        status, _ = store.read(key)
                        if status is Status.OK:
                            self.records_returned += 1
                    elif r < read_p + update_p:
                        index = self.dist.draw()
                        store.upsert(encode_key(index, spec.key_size),
                                     make_value(index, spec.value_size))
                        self.user_writes += 1
                    elif r < read_p + update_p + insert_p:
                        index = self.insert_cursor
                        self.insert_cursor += spec.thread_count
                        self.dist.record_insert()
                        store.upsert(encode_key(index, spec.key_size),
                                     make_value(index, spec.value_size))
                        self.user_writes += 1
                    else:
                        key = encode_key(self.dist.draw(), spec.key_size)
                        store.rmw(key, None, bench_updater, initializer)
                        self.user_writes += 1
                    self.completed += 1
        except Exception as exc:  # aborts the run with diagnostics
            self.error = exc


def load_phase(spec: WorkloadSpec, store: F2Store) -> None:
    with store.session():
        for index in range(spec.key_count):
            store.upsert(encode_key(index, spec.key_size),
                         make_value(index, spec.value_size))


def _run_phase(spec: WorkloadSpec, store: F2Store, total_ops: int,
               timeline: list | None = None) -> tuple[float, list[_Worker]]:
    per_worker = total_ops // spec.thread_count
    quotas = [per_worker] * spec.thread_count
    quotas[0] += total_ops - per_worker * spec.thread_count
    barrier = threading.Barrier(spec.thread_count + 1)
    workers = [_Worker(i, spec, store, quotas[i], barrier)
               for i in range(spec.thread_count)]
    for w in workers:
        w.start()
    barrier.wait()
    started = time.perf_counter()
    while any(w.is_alive() for w in workers):
        time.sleep(0.05)
        if timeline is not None:
            timeline.append((time.perf_counter() - started,
                             sum(w.completed for w in workers)))
    duration = time.perf_counter() - started
    for w in workers:
        w.join()
        if w.error is not None:
            raise RuntimeError(f"worker {w.index} failed") from w.error
    return duration, workers


def run(spec: WorkloadSpec, store: F2Store, load: bool = True) -> RunReport:
    """Execute load, warm-up, and the timed phase; return the report."""
    if load:
        load_phase(spec, store)
    if spec.warmup_ops:
        _run_phase(spec, store, spec.warmup_ops)
    store.quiesce()

    before = store.metrics()
    timeline: list = []
    duration, workers = _run_phase(spec, store, spec.op_count, timeline)
    store.quiesce()
    after = store.metrics()

    completed = sum(w.completed for w in workers)
    returned = sum(w.records_returned for w in workers)
    writes = sum(w.user_writes for w in workers)
    record_size = RecordFormat(spec.key_size, spec.value_size).record_size
    read_bytes = after.device_read_bytes - before.device_read_bytes
    write_bytes = after.device_write_bytes - before.device_write_bytes
    return RunReport(
        workload=spec.workload,
        distribution=spec.distribution,
        key_count=spec.key_count,
        op_count=spec.op_count,
        thread_count=spec.thread_count,
        seed=spec.seed,
        duration_s=duration,
        completed_ops=completed,
        throughput_kops=completed / duration / 1000.0 if duration else 0.0,
        records_returned=returned,
        user_writes=writes,
        record_size=record_size,
        device_read_bytes=read_bytes,
        device_write_bytes=write_bytes,
        read_amplification=(read_bytes / (returned * record_size)
                            if returned else 0.0),
        write_amplification=(write_bytes / (writes * record_size)
                             if writes else 0.0),
        retries=after.op_retries - before.op_retries,
        num_truncs=after.num_truncs_cold - before.num_truncs_cold,
        cache_hits=after.cache_hits - before.cache_hits,
        hot_compactions=after.hot_compactions - before.hot_compactions,
        cold_compactions=after.cold_compactions - before.cold_compactions,
        timeline=timeline,
    )


# -- report files and figures --------------------------------------------------


def write_report_files(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write report.json, timeline.csv, and PNG figures into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out / "report.json"
    json_path.write_text(report.to_json())
    written.append(json_path)

    csv_path = out / "timeline.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seconds", "ops_total", "kops_per_s"])
        prev_t, prev_ops = 0.0, 0
        for t, ops in report.timeline:
            rate = (ops - prev_ops) / (t - prev_t) / 1000.0 if t > prev_t else 0.0
            writer.writerow([f"{t:.3f}", ops, f"{rate:.2f}"])
            prev_t, prev_ops = t, ops
    written.append(csv_path)

    written.extend(render_figures(report, out))
    return written


def render_figures(report: RunReport, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    if report.timeline:
        times = [t for t, _ in report.timeline]
        rates = []
        prev_t, prev_ops = 0.0, 0
        for t, ops in report.timeline:
            rates.append((ops - prev_ops) / (t - prev_t) / 1000.0
                         if t > prev_t else 0.0)
            prev_t, prev_ops = t, ops
        ax.plot(times, rates, lw=1.2)
    ax.set_xlabel("elapsed (s)")
    ax.set_ylabel("kops/s")
    ax.set_title(f"YCSB-{report.workload} {report.distribution}: throughput")
    fig.tight_layout()
    p = out_dir / "throughput_timeline.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    ax.bar(["read", "write"],
           [report.read_amplification, report.write_amplification],
           color=["#4878d0", "#ee854a"])
    ax.set_ylabel("amplification (device bytes / user bytes)")
    ax.set_title(f"YCSB-{report.workload}: I/O amplification")
    fig.tight_layout()
    p = out_dir / "amplification.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def derive_config(mem_budget: int, key_count: int, value_size: int = 108,
                  read_cache_bytes: int | None = None,
                  hot_disk: int | None = None, cold_disk: int | None = None,
                  chunk_size: int = 256) -> StoreConfig:
    """Split one memory budget across components, desk-scale heuristics."""
    def pow2_at_most(n: int, lo: int) -> int:
        n = max(n, lo)
        return 1 << (n.bit_length() - 1)

    index_bytes = max(64 << 10, mem_budget // 6)
    buckets = pow2_at_most(index_bytes // 64, 64)
    if read_cache_bytes is None:
        read_cache_bytes = mem_budget // 4
    cold_mem = min(64 << 20, max(128 << 10, mem_budget // 8))
    chunk_mem = min(96 << 20, max(128 << 10, mem_budget // 8))
    hot_mem = max(192 << 10, mem_budget - index_bytes - read_cache_bytes
                  - cold_mem - chunk_mem)
    page = pow2_at_most(min(32 << 20, hot_mem // 3), 64 << 10)
    entries_per_chunk = chunk_size // 8
    num_chunks = pow2_at_most(
        max(64, -(-key_count // entries_per_chunk)) * 2 - 1, 64)
    return StoreConfig(
        value_size=value_size,
        hot_index_buckets=buckets,
        hot_log_memory_bytes=hot_mem,
        hot_log_page_bytes=page,
        cold_log_memory_bytes=cold_mem,
        cold_log_page_bytes=page,
        num_chunks=num_chunks,
        chunk_size=chunk_size,
        chunk_log_memory_bytes=chunk_mem,
        chunk_log_page_bytes=max(32 << 10, min(1 << 20, page)),
        read_cache_bytes=read_cache_bytes,
        read_cache_page_bytes=max(32 << 10, min(2 << 20, page)),
        hot_disk_budget=hot_disk if hot_disk else 5 << 30,
        cold_disk_budget=cold_disk if cold_disk else 35 << 30,
        segment_size=max(1 << 20, min(1 << 30, page * 8)),
    )
