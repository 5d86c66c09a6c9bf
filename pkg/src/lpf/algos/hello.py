"""Bootstrap of a row-distributed matrix computation with error agreement.

Root holds the global matrix dimensions; everyone else fetches them, checks
its local share and, if anything is wrong, writes its error code into every
process's global error word. Conflicting writes resolve deterministically,
so all processes leave with the same verdict.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

import numpy as np

from lpf.algos.collectives import post_error
from lpf.core import MAX_P, ROOT_PID, Args

OK, ILLEGAL_INPUT = 0, 1
DIMS = struct.Struct("<ii")


def make_spmd(inject=None):
    """Build the SPMD function; ``inject(s, p, lerr)`` may override the local error."""

    def spmd(ctx, s, p, args: Args) -> int:
        lerr = np.array([OK], dtype=np.int32)
        gerr = np.array([OK], dtype=np.int32)
        mdim = np.zeros(2, dtype=np.int32)
        if args.input_size:
            mdim[:] = DIMS.unpack(bytes(args.input[:DIMS.size]))

        ctx.resize_memory_register(3)
        ctx.resize_message_queue(2 * p)
        ctx.sync()

        s_lerr = ctx.register_local(lerr)
        s_gerr = ctx.register_global(gerr)
        s_mdim = ctx.register_global(mdim)

        if args.input_size == 0:
            ctx.get(ROOT_PID, s_mdim, 0, s_mdim, 0, mdim.nbytes)
        ctx.sync()

        rows = (int(mdim[0]) + p - s - 1) // p
        cols = int(mdim[1])
        if rows <= 0 or cols <= 0:
            lerr[0] = ILLEGAL_INPUT
        if inject is not None:
            lerr[0] = inject(s, p, int(lerr[0]))

        if lerr[0] != OK:
            post_error(ctx, s_lerr, s_gerr, lerr.nbytes)
        ctx.sync()

        if gerr[0] == OK:
            pass  # the matrix computation would go here

        ctx.deregister(s_lerr)
        ctx.deregister(s_gerr)
        ctx.deregister(s_mdim)
        if args.output_size == gerr.nbytes:
            memoryview(args.output).cast("B")[:] = gerr.tobytes()
        return int(gerr[0])

    return spmd


spmd = make_spmd()


def run_shm(m: int, n: int, p=MAX_P, inject=None) -> int:
    """Launch from the sequential root context; returns the agreed error code."""
    from lpf.core import root_context

    out = bytearray(4)
    root_context().exec(p, make_spmd(inject), Args(input=DIMS.pack(m, n), output=out))
    return struct.unpack("<i", out)[0]


def _parse_fail(spec: str):
    pid, _, code = spec.partition(":")
    return int(pid), int(code or ILLEGAL_INPUT)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lpf-hello", description=__doc__.splitlines()[0])
    ap.add_argument("rows", type=int)
    ap.add_argument("cols", type=int)
    ap.add_argument("--backend", choices=("shm", "tcp"), default="shm")
    ap.add_argument("-p", "--nprocs", type=int, default=None, help="default: all cores")
    ap.add_argument("--fail", action="append", default=[], type=_parse_fail,
                    metavar="PID[:CODE]", help="force an error on a process")
    ns = ap.parse_args(argv)
    failures = dict(ns.fail)

    def inject(s, p, lerr):
        return failures.get(s, lerr)

    if ns.backend == "shm":
        gerr = run_shm(ns.rows, ns.cols, ns.nprocs, inject)
        print(f"gerr={gerr}")
        return gerr

    from lpf import tcp
    from lpf.launcher import relaunch

    if "LPF_PID" not in os.environ:
        return relaunch(ns.nprocs or 2, "lpf.algos.hello", sys.argv[1:] if argv is None else argv)
    init = tcp.init_from_env()
    try:
        data = DIMS.pack(ns.rows, ns.cols) if init.pid == ROOT_PID else b""
        gerr = tcp.hook(init, make_spmd(inject), Args(input=data))
    finally:
        tcp.finalize(init)
    print(f"process {init.pid}: gerr={gerr}")
    return gerr


if __name__ == "__main__":
    sys.exit(main())
