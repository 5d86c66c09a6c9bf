import socket
import threading

import pytest

from lpf.core import NO_ARGS, Config
from lpf.shm import spawn_group


def run_spmd(p, spmd, args=NO_ARGS, **config):
    """Run spmd on p threads; returns the list of per-process results."""
    return spawn_group(p, spmd, lambda pid: args, Config().with_(**config))


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_threads(n, target, timeout=60):
    """Call target(i) on n threads; returns (results, errors) lists."""
    results, errors = [None] * n, [None] * n

    def body(i):
        try:
            results[i] = target(i)
        except BaseException as exc:  # noqa: BLE001
            errors[i] = exc

    threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        assert not t.is_alive(), "thread did not finish"
    return results, errors


@pytest.fixture
def port():
    return free_port()


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    entry = ACCEPTANCE.setdefault(marker.args[0], {"ok": True, "notes": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} {rep.outcome}")


@pytest.fixture
def note(request):
    """Attach a line of measured detail to this test's acceptance criterion."""
    marker = request.node.get_closest_marker("acceptance")

    def add(text):
        print(text)
        if marker is not None:
            ACCEPTANCE.setdefault(marker.args[0], {"ok": True, "notes": []})["notes"].append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[n]
        verdict = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n}: {verdict}" + (f"  ({detail})" if detail else ""))
