"""Combining-tree barrier for threads of one process.

Threads are grouped ``fanin`` at a time into leaf nodes, nodes are grouped
the same way into parents, and so on up to a single root. The last thread to
arrive at a node climbs to the parent; the thread completing the root bumps
the generation and releases nodes top-down along its path, each released
waiter doing the same for the nodes it won. Depth is ceil(log_fanin p).
"""

from __future__ import annotations

import threading

from lpf.errors import FatalError


def tree_depth(p: int, fanin: int) -> int:
    if p < 1 or fanin < 2:
        raise ValueError("need p >= 1 and fanin >= 2")
    depth, width = 0, 1
    while width < p:
        width *= fanin
        depth += 1
    return depth


class _Node:
    __slots__ = ("cond", "count", "expected", "parent", "sense")

    def __init__(self, expected: int):
        self.cond = threading.Condition(threading.Lock())
        self.count = 0
        self.expected = expected
        self.parent: _Node | None = None
        self.sense = False


class TreeBarrier:
    def __init__(self, p: int, fanin: int = 4):
        self.p = p
        self.fanin = fanin
        self.depth = tree_depth(p, fanin)
        self.generation = 0
        self._sense = [False] * p
        self._failure: str | None = None
        self._gone: set[int] = set()
        self._nodes: list[_Node] = []
        self._leaf_of: list[_Node | None] = [None] * p

        members = p
        level: list[_Node] = []
        for start in range(0, p, fanin):
            node = _Node(min(fanin, p - start))
            level.append(node)
            for pid in range(start, min(start + fanin, p)):
                self._leaf_of[pid] = node
        self._nodes.extend(level)
        members = len(level)
        while members > 1:
            parents = []
            for start in range(0, members, fanin):
                parent = _Node(min(fanin, members - start))
                for child in level[start:start + fanin]:
                    child.parent = parent
                parents.append(parent)
            self._nodes.extend(parents)
            level, members = parents, len(parents)

    def wait(self, pid: int) -> None:
        if self.p == 1:
            self._check(self.generation)
            return
        sense = not self._sense[pid]
        self._sense[pid] = sense
        gen = self.generation
        self._check(gen)
        won = []
        node = self._leaf_of[pid]
        while node is not None:
            with node.cond:
                node.count += 1
                if node.count < node.expected:
                    while node.sense != sense:
                        self._check(gen)
                        node.cond.wait(0.5)
                    break
                node.count = 0
                if node.parent is None:
                    self.generation += 1
            won.append(node)
            node = node.parent
        for node in reversed(won):
            with node.cond:
                node.sense = sense
                node.cond.notify_all()

    def _check(self, gen: int) -> None:
        if self.generation != gen:
            return
        if self._failure is not None:
            raise FatalError(self._failure)
        if self._gone:
            raise FatalError(f"process(es) {sorted(self._gone)} left without synchronising")

    def fail(self, reason: str) -> None:
        """Make every pending and future wait raise."""
        if self._failure is None:
            self._failure = reason
        self._wake()

    def leave(self, pid: int) -> None:
        """``pid`` will never arrive again; peers still waiting cannot complete."""
        self._gone.add(pid)
        self._wake()

    def _wake(self) -> None:
        for node in self._nodes:
            with node.cond:
                node.cond.notify_all()
