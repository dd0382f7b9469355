"""Key distributions and operation mixes for the benchmark driver.

Standard YCSB-style generators: scrambled zipfian (theta 0.99), hotspot
(a hot fraction of the keyspace taking 90% of accesses, uniform inside
each set), latest (zipfian over recency rank of inserted keys), and
uniform.  All are deterministic under a fixed seed.
"""

from __future__ import annotations

import random

import numpy as np

from .records import mix_hash

ZIPFIAN_THETA = 0.99
HOTSPOT_ACCESS_PROB = 0.9

WORKLOAD_MIXES = {
    # name: (read, update, insert, rmw) fractions
    "A": (0.5, 0.5, 0.0, 0.0),
    "B": (0.95, 0.05, 0.0, 0.0),
    "C": (1.0, 0.0, 0.0, 0.0),
    "D": (0.95, 0.0, 0.05, 0.0),
    "F": (0.5, 0.0, 0.0, 0.5),
}


class ZipfianGenerator:
    """Rejection-free zipfian sampler over [0, item_count).

    Rank 0 is the most popular item; callers scramble ranks themselves
    when they want popularity decoupled from key order.
    """

    def __init__(self, item_count: int, theta: float = ZIPFIAN_THETA,
                 rng: random.Random | None = None):
        if item_count <= 0:
            raise ValueError("item_count must be positive")
        self.item_count = item_count
        self.theta = theta
        self.rng = rng or random.Random()
        self.zeta_n = self._zeta(item_count, theta)
        self.alpha = 1.0 / (1.0 - theta)
        zeta2 = self._zeta(2, theta)
        self.eta = (1 - (2.0 / item_count) ** (1 - theta)) \
            / (1 - zeta2 / self.zeta_n)

    _zeta_cache: dict[tuple[int, float], float] = {}

    @classmethod
    def _zeta(cls, n: int, theta: float) -> float:
        cached = cls._zeta_cache.get((n, theta))
        if cached is None:
            cached = float(np.sum(np.arange(1, n + 1, dtype=np.float64)
                                  ** -theta))
            cls._zeta_cache[(n, theta)] = cached
        return cached

    def next_rank(self) -> int:
        u = self.rng.random()
        uz = u * self.zeta_n
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return int(self.item_count * (self.eta * u - self.eta + 1) ** self.alpha)


class KeyDistribution:
    """Maps draw() calls to key indexes in [0, key_count)."""

    def __init__(self, kind: str, key_count: int, seed: int = 0,
                 hot_fraction: float = 0.1,
                 hot_access_prob: float = HOTSPOT_ACCESS_PROB,
                 theta: float = ZIPFIAN_THETA):
        self.kind = kind
        self.key_count = key_count
        self.rng = random.Random(seed)
        self.hot_fraction = hot_fraction
        self.hot_access_prob = hot_access_prob
        self.inserted = key_count  # grows for the latest distribution
        if kind == "zipfian":
            self._zipf = ZipfianGenerator(key_count, theta, self.rng)
        elif kind == "latest":
            self._zipf = ZipfianGenerator(max(key_count, 1), theta, self.rng)
        elif kind == "hotspot":
            if not 0 < hot_fraction < 1:
                raise ValueError("hot_fraction must be in (0, 1)")
            self.hot_count = max(1, int(key_count * hot_fraction))
        elif kind != "uniform":
            raise ValueError(f"unknown distribution {kind!r}")

    def draw(self) -> int:
        if self.kind == "uniform":
            return self.rng.randrange(self.key_count)
        if self.kind == "zipfian":
            # Scramble so popular keys are spread over the keyspace.
            rank = self._zipf.next_rank()
            return mix_hash(rank) % self.key_count
        if self.kind == "hotspot":
            if self.rng.random() < self.hot_access_prob:
                return self.rng.randrange(self.hot_count)
            cold = self.key_count - self.hot_count
            return self.hot_count + self.rng.randrange(cold) if cold else 0
        # latest: popularity follows recency rank of inserted keys
        rank = self._zipf.next_rank() % self.inserted
        return self.inserted - 1 - rank

    def record_insert(self) -> int:
        """Register a new key (latest distribution); returns its index."""
        index = self.inserted
        self.inserted += 1
        return index

    def is_hot(self, key_index: int) -> bool:
        if self.kind != "hotspot":
            raise ValueError("hot set is defined only for hotspot")
        return key_index < self.hot_count


def parse_distribution(text: str, key_count: int, seed: int) -> KeyDistribution:
    """CLI form: zipfian | hotspot:FRACTION | latest | uniform."""
    if text.startswith("hotspot"):
        _, _, frac = text.partition(":")
        return KeyDistribution("hotspot", key_count, seed,
                               hot_fraction=float(frac) if frac else 0.1)
    return KeyDistribution(text, key_count, seed)


def encode_key(index: int, key_size: int) -> bytes:
    return index.to_bytes(key_size, "little")


def decode_key(key: bytes) -> int:
    return int.from_bytes(key, "little")
