"""``lpf-run``: start p local OS processes bound to one TCP master.

    lpf-run -n 4 -- python3 prog.py --flag

Every child sees LPF_PID, LPF_NPROCS and LPF_MASTER=host:port and is
expected to call :func:`lpf.tcp.init_from_env`.
"""

from __future__ import annotations

import argparse
import os
import socket
import subprocess
import sys
import time


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def child_env(pid: int, nprocs: int, master: str, base=None) -> dict[str, str]:
    env = dict(os.environ if base is None else base)
    env.update(LPF_PID=str(pid), LPF_NPROCS=str(nprocs), LPF_MASTER=master)
    return env


def launch(nprocs: int, command: list[str], host: str = "127.0.0.1", port: int = 0,
           timeout: float | None = None) -> list[int]:
    """Run ``command`` nprocs times; returns the exit codes in pid order."""
    if nprocs < 1:
        raise ValueError("need at least one process")
    if not command:
        raise ValueError("no program given")
    if command[0].endswith(".py"):
        command = [sys.executable, *command]
    master = f"{host}:{port or free_port(host)}"
    procs = [subprocess.Popen(command, env=child_env(pid, nprocs, master))
             for pid in range(nprocs)]
    deadline = None if timeout is None else time.monotonic() + timeout
    codes = []
    try:
        for proc in procs:
            left = None if deadline is None else max(0.0, deadline - time.monotonic())
            codes.append(proc.wait(left))
    except subprocess.TimeoutExpired:
        for proc in procs:
            proc.kill()
        codes = [proc.wait() for proc in procs]
    except KeyboardInterrupt:
        for proc in procs:
            proc.terminate()
        raise
    return codes


def relaunch(nprocs: int, module: str, argv=None, **kw) -> int:
    """Re-run ``python -m module argv`` as ``nprocs`` TCP-connected processes."""
    argv = sys.argv[1:] if argv is None else list(argv)
    codes = launch(nprocs, [sys.executable, "-m", module, *argv], **kw)
    bad = [c for c in codes if c]
    return bad[0] if bad else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lpf-run", description=__doc__.splitlines()[0])
    parser.add_argument("-n", "--nprocs", type=int, required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0, help="master port (0: pick a free one)")
    parser.add_argument("--timeout", type=float, default=None, help="kill everything after this many seconds")
    parser.add_argument("command", nargs=argparse.REMAINDER)
    ns = parser.parse_args(argv)
    command = ns.command[1:] if ns.command[:1] == ["--"] else ns.command
    if not command:
        parser.error("missing program after --")
    codes = launch(ns.nprocs, command, ns.host, ns.port, ns.timeout)
    bad = [c for c in codes if c]
    return bad[0] if bad else 0


if __name__ == "__main__":
    sys.exit(main())
