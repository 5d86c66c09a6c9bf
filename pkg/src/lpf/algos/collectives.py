"""Collectives written purely against put/get/sync."""

from __future__ import annotations

import numpy as np

from lpf.core import Context, MemSlot

OK = 0


def broadcast(ctx: Context, root: int, slot: MemSlot, size: int) -> None:
    """Copy the first ``size`` bytes of ``slot`` on ``root`` to every process.

    One superstep. Every non-root process gets from root, so root is subject
    to p - 1 requests and needs that much message capacity; the others need 1.
    """
    if not 0 <= root < ctx.nprocs:
        raise ValueError(f"root {root} outside [0, {ctx.nprocs})")
    if ctx.pid != root and size:
        ctx.get(root, slot, 0, slot, 0, size)
    ctx.sync()


def post_error(ctx: Context, local_slot: MemSlot, global_slot: MemSlot, size: int) -> None:
    """Queue this process's error word into every process's ``global_slot``.

    Call only when the local error is set. Overlapping writes resolve by the
    conflict order, so after the next sync every process reads the same
    erring process's value without any per-process buffer.
    """
    for k in range(ctx.nprocs):
        ctx.put(local_slot, 0, k, global_slot, 0, size)


def error_allreduce(ctx: Context, local_error: int) -> int:
    """Agree on an error code: OK if nobody failed, else one failing process's code."""
    def body(inner: Context, s, p, _args):
        lerr = np.array([local_error], dtype=np.int64)
        gerr = np.array([OK], dtype=np.int64)
        inner.resize_memory_register(2)
        inner.resize_message_queue(p)
        inner.sync()
        s_lerr = inner.register_local(lerr)
        s_gerr = inner.register_global(gerr)
        if local_error != OK:
            post_error(inner, s_lerr, s_gerr, lerr.nbytes)
        inner.sync()
        inner.deregister(s_lerr)
        inner.deregister(s_gerr)
        return int(gerr[0])

    return ctx.rehook(body)
