"""Epoch framework: protection, safe-epoch math, trigger actions."""

import itertools
import queue
import random
import threading

import pytest

from f2kv.epoch import DRAIN_CAPACITY, SLOT_COUNT, EpochFramework
from f2kv.errors import CapacityError


class Actor(threading.Thread):
    """Runs closures on a dedicated thread, for per-thread epoch slots."""

    def __init__(self):
        super().__init__(daemon=True)
        self._inbox = queue.Queue()
        self.start()

    def run(self):
        while True:
            fn, out = self._inbox.get()
            if fn is None:
                return
            try:
                out.put((True, fn()))
            except Exception as exc:
                out.put((False, exc))

    def do(self, fn):
        out = queue.Queue()
        self._inbox.put((fn, out))
        ok, result = out.get()
        if not ok:
            raise result
        return result

    def stop(self):
        self._inbox.put((None, None))


def test_protect_copies_global_epoch(epoch):
    for _ in range(6):
        epoch.bump()
    assert epoch.current() == 7
    assert epoch.protect() == 7


def test_protect_refreshes_stale_local(epoch):
    epoch.protect()
    for _ in range(6):
        epoch.bump()
    assert epoch.protect() == 7
    assert epoch.protected_locals() == [7]


def test_slot_table_capacity_error(epoch):
    for i in range(SLOT_COUNT):
        epoch._slots.store(i, 1)  # simulate 64 protected threads
    with pytest.raises(CapacityError):
        epoch.protect()


def test_safe_epoch_is_min_minus_one(epoch):
    epoch._global.store(7)
    epoch._slots.store(0, 5)
    epoch._slots.store(1, 7)
    assert epoch.safe_epoch() == 4


def test_safe_epoch_no_protected_threads(epoch):
    epoch._global.store(9)
    assert epoch.safe_epoch() == 8


def test_safe_epoch_equal_locals(epoch):
    epoch._global.store(3)
    for i in range(3):
        epoch._slots.store(i, 3)
    assert epoch.safe_epoch() == 2


def test_action_runs_after_single_thread_refreshes(epoch):
    fired = []
    epoch._global.store(7)
    epoch.protect()
    epoch.bump_with_action(lambda: fired.append(1))
    assert epoch.current() == 8
    assert not fired  # our local epoch still pins it
    epoch.refresh()
    assert fired == [1]


def test_action_with_no_protected_threads_runs_on_drain(epoch):
    fired = []
    epoch.bump_with_action(lambda: fired.append(1))
    assert fired == [1]  # bump drains and the epoch is instantly safe


def test_two_thread_refresh_orders():
    # Enumerate both refresh orders: the action must fire only after the
    # second thread refreshes, never after just one.
    for order in itertools.permutations([0, 1]):
        ep = EpochFramework()
        actors = [Actor(), Actor()]
        fired = []
        for a in actors:
            a.do(ep.protect)
        a_main = Actor()
        a_main.do(lambda: ep.bump_with_action(lambda: fired.append(1)))
        assert not fired
        first, second = order
        actors[first].do(ep.refresh)
        assert not fired, f"fired after one refresh (order {order})"
        actors[second].do(ep.refresh)
        a_main.do(ep.drain)
        assert fired == [1]
        for a in actors + [a_main]:
            a.stop()


def test_randomized_schedule_never_fires_early():
    ep = EpochFramework()
    violations = []
    stop = threading.Event()

    def record_action(reg_epoch):
        def action():
            for local in ep.protected_locals():
                if local <= reg_epoch:
                    violations.append((reg_epoch, local))
        return action

    def worker(seed):
        rng = random.Random(seed)
        ep.protect()
        for _ in range(400):
            op = rng.random()
            if op < 0.5:
                ep.refresh()
            elif op < 0.8:
                reg = ep.current()
                ep.bump_with_action(record_action(reg))
            elif op < 0.9:
                ep.unprotect()
                ep.protect()
            else:
                ep.drain()
        ep.unprotect()

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    ep.drain_all()
    assert not violations


def test_action_count_conservation():
    ep = EpochFramework()

    def worker(seed):
        rng = random.Random(seed)
        ep.protect()
        for _ in range(300):
            if rng.random() < 0.4:
                ep.bump_with_action(lambda: None)
            else:
                ep.refresh()
        ep.unprotect()

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ep.drain_all()
    assert ep.actions_fired.load() == ep.actions_registered.load() > 0


def test_drain_list_overflow_caller_runs(epoch):
    fired = []
    epoch.protect()
    for i in range(DRAIN_CAPACITY + 50):
        epoch.bump_with_action(lambda i=i: fired.append(i))
        epoch.refresh()
    epoch.drain_all()
    assert len(fired) == DRAIN_CAPACITY + 50


def test_trigger_action_runs_exactly_once():
    ep = EpochFramework()
    counts = [0] * 200
    ep.protect()
    for i in range(200):
        def action(i=i):
            counts[i] += 1
        ep.bump_with_action(action)
    ep.refresh()
    # Drain aggressively from several threads; each action still fires once.
    threads = [threading.Thread(target=ep.drain) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ep.unprotect()
    ep.drain_all()
    assert counts == [1] * 200
