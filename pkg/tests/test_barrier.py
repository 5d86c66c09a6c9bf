import threading
import time

import pytest

from lpf.errors import FatalError
from lpf.sync.barrier import TreeBarrier, tree_depth


@pytest.mark.parametrize("p, fanin, depth", [
    (1, 2, 0), (2, 2, 1), (3, 2, 2), (8, 2, 3), (128, 2, 7), (129, 2, 8),
    (16, 4, 2), (17, 4, 3), (64, 8, 2),
])
def test_tree_depth(p, fanin, depth):
    assert tree_depth(p, fanin) == depth
    assert TreeBarrier(p, fanin).depth == depth


def _run(p, body):
    errors = []

    def wrap(pid):
        try:
            body(pid)
        except BaseException as exc:  # noqa: BLE001
            errors.append((pid, exc))

    threads = [threading.Thread(target=wrap, args=(i,), daemon=True) for i in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
        assert not t.is_alive()
    return errors


def test_single_process_returns_immediately():
    b = TreeBarrier(1)
    b.wait(0)
    b.wait(0)


@pytest.mark.parametrize("p, fanin", [(2, 2), (5, 2), (8, 2), (8, 4), (13, 8)])
def test_nobody_leaves_before_last_arrival(p, fanin):
    b = TreeBarrier(p, fanin)
    entered, left = [0.0] * p, [0.0] * p

    def body(pid):
        for rnd in range(20):
            time.sleep(0.0005 * ((pid * 7 + rnd) % 5))
            entered[pid] = time.perf_counter()
            b.wait(pid)
            left[pid] = time.perf_counter()
            assert left[pid] >= max(entered)
            b.wait(pid)

    assert _run(p, body) == []
    assert b.generation == 40


def test_fail_releases_waiters():
    b = TreeBarrier(4, 2)

    def body(pid):
        if pid == 3:
            time.sleep(0.05)
            b.fail("boom")
            return
        b.wait(pid)

    errors = _run(4, body)
    assert sorted(pid for pid, _ in errors) == [0, 1, 2]
    assert all(isinstance(e, FatalError) for _, e in errors)
    with pytest.raises(FatalError):
        b.wait(0)


def test_leave_makes_waiters_fatal():
    b = TreeBarrier(3, 2)

    def body(pid):
        b.wait(pid)
        if pid == 2:
            b.leave(pid)
            return
        b.wait(pid)

    errors = _run(3, body)
    assert sorted(pid for pid, _ in errors) == [0, 1]
