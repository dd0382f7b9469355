"""f2bench: command-line driver for the benchmark workloads.

Example:

    f2bench --workload B --dist zipfian --keys 100000 --ops 200000 \\
        --warmup 20000 --threads 2 --mem-budget 64M --read-cache 16M \\
        --dir /tmp/f2 --report json --out results/

`--out DIR` additionally writes report.json, timeline.csv, and PNG
figures (throughput timeline, I/O amplification) into DIR.
"""

from __future__ import annotations

import argparse
import sys
import tempfile

from . import bench
from .store import F2Store

_SUFFIXES = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_bytes(text: str) -> int:
    text = text.strip().lower()
    if text and text[-1] in _SUFFIXES:
        return int(float(text[:-1]) * _SUFFIXES[text[-1]])
    return int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="f2bench",
        description="YCSB-style benchmark driver for the f2-kv store")
    p.add_argument("--workload", choices=sorted(bench.WORKLOAD_MIXES),
                   default="A")
    p.add_argument("--dist", default="zipfian",
                   help="zipfian | hotspot:FRACTION | latest | uniform")
    p.add_argument("--keys", type=int, default=1_000_000)
    p.add_argument("--ops", type=int, default=1_000_000)
    p.add_argument("--warmup", type=int, default=100_000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--mem-budget", type=parse_bytes, default=str(256 << 20),
                   help="total memory budget split across components")
    p.add_argument("--hot-disk", type=parse_bytes, default=str(5 << 30))
    p.add_argument("--cold-disk", type=parse_bytes, default=str(35 << 30))
    p.add_argument("--read-cache", type=parse_bytes, default=None,
                   help="read cache bytes (0 disables; default budget/4)")
    p.add_argument("--chunk-size", type=parse_bytes, default=256)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--report", choices=("text", "json"), default="text")
    p.add_argument("--value-size", type=int, default=108)
    p.add_argument("--dir", default=None,
                   help="store directory (default: a fresh temp dir)")
    p.add_argument("--out", default=None,
                   help="write report.json, timeline.csv, and figures here")
    p.add_argument("--read-latency-us", type=float, default=0.0,
                   help="simulated per-read device latency in microseconds")
    p.add_argument("--no-background-compaction", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = bench.WorkloadSpec(
        workload=args.workload, distribution=args.dist, key_count=args.keys,
        value_size=args.value_size, op_count=args.ops,
        warmup_ops=args.warmup, thread_count=args.threads, seed=args.seed)
    config = bench.derive_config(
        args.mem_budget, args.keys, value_size=args.value_size,
        read_cache_bytes=args.read_cache, hot_disk=args.hot_disk,
        cold_disk=args.cold_disk, chunk_size=args.chunk_size)

    tempdir = None
    directory = args.dir
    if directory is None:
        tempdir = tempfile.TemporaryDirectory(prefix="f2bench-")
        directory = tempdir.name

    store = F2Store(config, directory=directory)
    try:
        if args.read_latency_us:
            bench.set_read_latency(store, args.read_latency_us / 1e6)
        if not args.no_background_compaction:
            store.start_background_compaction()
        report = bench.run(spec, store)
        if args.report == "json":
            print(report.to_json())
        else:
            print(report.to_text())
        if args.out:
            for path in bench.write_report_files(report, args.out):
                print(f"wrote {path}", file=sys.stderr)
    finally:
        store.close()
        if tempdir is not None:
            tempdir.cleanup()
    return 0


if __name__ == "__main__":
    sys.exit(main())
