"""Interface a backend offers to the sync engine."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Counters:
    messages: int = 0       # point-to-point messages to other processes
    control_bytes: int = 0  # metadata/routing bytes to other processes
    payload_bytes: int = 0  # user payload bytes written into registered memory
    supersteps: int = 0

    def snapshot(self) -> Counters:
        return Counters(self.messages, self.control_bytes, self.payload_bytes, self.supersteps)


class Channel:
    """Collective transport shared by all contexts living on one process set.

    ``alltoall`` and ``shift`` both synchronise: no process returns before the
    data it waits for was produced by its peers.
    """

    pid: int
    nprocs: int
    counters: Counters

    def barrier(self) -> None:
        raise NotImplementedError

    def alltoall(self, blocks: list[bytes], tag: bytes) -> list[bytes]:
        raise NotImplementedError

    def shift(self, dst: int, data: bytes, src: int, tag: bytes) -> bytes:
        """Send ``data`` to ``dst`` and return what ``src`` sent to us."""
        raise NotImplementedError

    def data_exchange(self, ctx, recv_plan, send_plans) -> None:
        raise NotImplementedError

    def publish(self, ctx) -> None:
        """Make ``ctx`` the context peers see for this process."""

    def abort(self, reason: str) -> None:
        raise NotImplementedError
