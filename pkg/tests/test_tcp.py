import subprocess
import sys
import time
from pathlib import Path

import pytest

from lpf import tcp
from lpf.errors import FatalError
from lpf.launcher import child_env, launch
from lpf.launcher import main as lpf_run

from conftest import free_port, run_threads

WORKER = Path(__file__).parent / "helpers" / "tcp_worker.py"
sys.path.insert(0, str(WORKER.parent))
from tcp_worker import total_exchange  # noqa: E402


def bind_all(n, port, timeout_ms=5000, **kw):
    return run_threads(n, lambda i: tcp.init_over_tcp("127.0.0.1", port, timeout_ms, i, n, **kw))


def test_single_process_needs_no_network():
    start = time.monotonic()
    init = tcp.init_over_tcp("127.0.0.1", 1, 30000, 0, 1)
    assert time.monotonic() - start < 1
    assert tcp.hook(init, lambda ctx, s, p, a: (s, p)) == (0, 1)
    tcp.finalize(init)


def test_four_processes_share_one_address_book(port):
    inits, errors = bind_all(4, port)
    assert errors == [None] * 4
    books = [h.peers for h in inits]
    assert all(b == books[0] for b in books)
    assert sorted(books[0]) == [0, 1, 2, 3]
    assert books[0][0] == ("127.0.0.1", port)
    for h in inits:
        tcp.finalize(h)


@pytest.mark.parametrize("meta", ["direct", "bruck"])
def test_two_hooks_on_one_handle(port, meta):
    def body(i):
        init = tcp.init_over_tcp("127.0.0.1", port, 5000, i, 4)
        seen = [tcp.hook(init, lambda ctx, s, p, a: (s, p))]
        seen.append(tcp.hook(init, total_exchange, meta_exchange=meta))
        seen.append(tcp.hook(init, total_exchange, meta_exchange=meta))
        tcp.finalize(init)
        return seen

    results, errors = run_threads(4, body)
    assert errors == [None] * 4
    assert sorted(r[0] for r in results) == [(s, 4) for s in range(4)]
    assert all(r[1] == r[2] for r in results)


def test_duplicate_pid_is_fatal(port):
    pids = [0, 1, 1]
    _, errors = run_threads(3, lambda i: tcp.init_over_tcp("127.0.0.1", port, 3000, pids[i], 3))
    assert all(isinstance(e, FatalError) for e in errors)


def test_nprocs_mismatch_is_fatal(port):
    sizes = [3, 3, 4]
    pids = [0, 1, 2]
    _, errors = run_threads(
        3, lambda i: tcp.init_over_tcp("127.0.0.1", port, 3000, pids[i], sizes[i]))
    assert all(isinstance(e, FatalError) for e in errors)


def test_absent_peer_times_out(port):
    start = time.monotonic()
    # pid 2 of 3 never shows up
    _, errors = run_threads(2, lambda i: tcp.init_over_tcp("127.0.0.1", port, 1000, i, 3))
    elapsed = time.monotonic() - start
    assert all(isinstance(e, FatalError) for e in errors)
    assert 0.9 < elapsed < 5


def test_peer_that_never_hooks(port):
    def body(i):
        init = tcp.init_over_tcp("127.0.0.1", port, 1500, i, 3)
        try:
            if i == 2:
                time.sleep(3)
                return "skipped"
            return tcp.hook(init, lambda ctx, s, p, a: s)
        finally:
            tcp.finalize(init)

    results, errors = run_threads(3, body)
    assert results[2] == "skipped"
    assert isinstance(errors[0], FatalError) and isinstance(errors[1], FatalError)


def test_failure_in_one_process_aborts_all(port):
    def spmd(ctx, s, p, args):
        ctx.resize_message_queue(1)
        if s == 1:
            raise RuntimeError("boom")
        ctx.sync()
        ctx.sync()

    def body(i):
        init = tcp.init_over_tcp("127.0.0.1", port, 5000, i, 3)
        try:
            return tcp.hook(init, spmd)
        finally:
            tcp.finalize(init)

    _, errors = run_threads(3, body)
    assert all(isinstance(e, FatalError) for e in errors)
    assert isinstance(errors[1].__cause__, RuntimeError)


def test_exit_without_sync_is_fatal_for_peers(port):
    def spmd(ctx, s, p, args):
        if s == 0:
            return
        ctx.sync()

    def body(i):
        init = tcp.init_over_tcp("127.0.0.1", port, 5000, i, 3)
        try:
            return tcp.hook(init, spmd)
        finally:
            tcp.finalize(init)

    _, errors = run_threads(3, body)
    assert all(isinstance(e, FatalError) for e in errors)


def test_remote_range_error_is_fatal_on_all(port):
    def spmd(ctx, s, p, args):
        ctx.resize_memory_register(2)
        ctx.resize_message_queue(2)
        ctx.sync()
        g = ctx.register_global(bytearray(4))
        loc = ctx.register_local(bytearray(16))
        if s == 1:
            ctx.put(loc, 0, 0, g, 0, 16)
        ctx.sync()

    def body(i):
        init = tcp.init_over_tcp("127.0.0.1", port, 5000, i, 2)
        try:
            return tcp.hook(init, spmd)
        finally:
            tcp.finalize(init)

    _, errors = run_threads(2, body)
    assert all(isinstance(e, FatalError) for e in errors)


def test_finalize_rules():
    init = tcp.init_over_tcp("127.0.0.1", 1, 1000, 0, 1)
    tcp.finalize(init)
    tcp.finalize(init)  # release mode: no-op
    with pytest.raises(FatalError):
        tcp.hook(init, lambda *a: None)
    dbg = tcp.init_over_tcp("127.0.0.1", 1, 1000, 0, 1, debug=True)
    tcp.finalize(dbg)
    with pytest.raises(FatalError):
        tcp.finalize(dbg)


def test_invalid_pid_rejected():
    with pytest.raises(FatalError):
        tcp.init_over_tcp("127.0.0.1", 1, 1000, 3, 2)


def test_init_from_env_requires_variables(monkeypatch):
    for name in ("LPF_PID", "LPF_NPROCS", "LPF_MASTER"):
        monkeypatch.delenv(name, raising=False)
    with pytest.raises(FatalError):
        tcp.init_from_env()


def test_child_env():
    env = child_env(2, 4, "h:1", base={})
    assert env == {"LPF_PID": "2", "LPF_NPROCS": "4", "LPF_MASTER": "h:1"}


def test_os_processes_via_launcher(capfd):
    codes = launch(4, [sys.executable, str(WORKER)], timeout=60)
    assert codes == [0] * 4
    out = capfd.readouterr().out
    assert out.count("hook 1: ok") == 4


def test_lpf_run_cli(capfd):
    rc = lpf_run(["-n", "2", "--timeout", "60", "--", str(WORKER), "--hooks", "1"])
    assert rc == 0
    assert capfd.readouterr().out.count("hook 0: ok") == 2


def test_os_process_absent_peer():
    master = f"127.0.0.1:{free_port()}"
    procs = [subprocess.Popen([sys.executable, str(WORKER), "--timeout-ms", "2000"],
                              env=child_env(pid, 4, master), stdout=subprocess.PIPE, text=True)
             for pid in range(3)]
    start = time.monotonic()
    outs = [p.communicate(timeout=30)[0] for p in procs]
    assert time.monotonic() - start < 10
    assert [p.returncode for p in procs] == [3, 3, 3]
    assert all("FATAL" in o for o in outs)
