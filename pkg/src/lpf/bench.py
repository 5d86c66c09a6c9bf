"""Measure g and l, check that sync cost is affine in h, write the params file.

Two traffic patterns:

* total exchange: every process sends h words, spread evenly over all p
  processes, and receives h words; the worst case permutation-free pattern
  used to estimate g and l;
* round-robin: n small messages (default 4 KiB) per process, destination
  cycling over the peers.

Each timed sample starts when the last process leaves a barrier (i.e. when
the last one enters sync) and ends when sync returns. The h values of one
repetition are visited in a random order shared by all processes.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import math
import os
import random
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from lpf import machine

log = logging.getLogger(__name__)

DEFAULT_REPS = 200
DEFAULT_WARMUP = 10
SMALL_MSG = 4096
FALLBACK_LLC = 32 << 20


@dataclass
class Measurement:
    pattern: str
    word_size: int
    h: int
    times: list[float] = field(default_factory=list)

    @property
    def reps(self) -> int:
        return len(self.times)

    @property
    def mean(self) -> float:
        return float(np.mean(self.times))

    @property
    def ci95(self) -> float:
        """Half-width of the Student-t 95% interval for the mean."""
        n = len(self.times)
        if n < 2:
            return float("nan")
        sem = float(np.std(self.times, ddof=1)) / math.sqrt(n)
        return float(stats.t.ppf(0.975, n - 1)) * sem


# -- estimators and fits ----------------------------------------------------

def estimate_params(T, p: int, n_max: int) -> tuple[float, float]:
    """g = (T(n_max) - T(2p)) / (n_max - 2p),  l = max(T(0), 2 T(p) - T(2p))."""
    missing = [h for h in (0, p, 2 * p, n_max) if h not in T]
    if missing:
        raise ValueError(f"T lacks samples at h = {missing}")
    if n_max <= 2 * p:
        raise ValueError(f"n_max = {n_max} must exceed 2p = {2 * p}")
    g = (T[n_max] - T[2 * p]) / (n_max - 2 * p)
    l = max(T[0], 2 * T[p] - T[2 * p])
    return g, l


@dataclass
class Verdict:
    compliant: bool
    r2: float
    slope: float
    intercept: float
    deviating: tuple[int, int] | None = None

    def __str__(self) -> str:
        word = "compliant" if self.compliant else "NOT compliant"
        extra = f", deviating h in [{self.deviating[0]}, {self.deviating[1]}]" \
            if self.deviating else ""
        return (f"{word}: T(h) ~ {self.slope:.4g} h + {self.intercept:.4g}, "
                f"R^2 = {self.r2:.4f}{extra}")


def affine_fit(hs, ts) -> tuple[float, float, float]:
    """Least-squares T = a h + b; returns (a, b, R^2)."""
    h = np.asarray(hs, dtype=float)
    t = np.asarray(ts, dtype=float)
    a, b = np.polyfit(h, t, 1)
    resid = t - (a * h + b)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def compliance(hs, ts, threshold: float = 0.9) -> Verdict:
    a, b, r2 = affine_fit(hs, ts)
    verdict = Verdict(r2 >= threshold, r2, a, b)
    if not verdict.compliant:
        h = np.asarray(hs, dtype=float)
        resid = np.asarray(ts, dtype=float) - (a * h + b)
        bad = np.abs(resid) > 2 * np.std(resid)
        if not bad.any():
            bad = np.abs(resid) >= np.abs(resid).max()
        verdict.deviating = (int(h[bad].min()), int(h[bad].max()))
    return verdict


def geometric_grid(lo: int, hi: int, per_octave: int = 1) -> list[int]:
    """Sorted distinct integers from lo to hi, roughly geometric; hi included."""
    lo = max(1, lo)
    if hi < lo:
        return []
    steps = max(1, int(round(math.log2(hi / lo) * per_octave)))
    pts = {int(round(lo * (hi / lo) ** (i / steps))) for i in range(steps + 1)}
    return sorted(pts)


# -- cache detection ----------------------------------------------------------

def detect_llc_bytes() -> int:
    """Aggregate last-level cache: sum over distinct LLC instances in the system."""
    best_level, instances = -1, {}
    for index in glob.glob("/sys/devices/system/cpu/cpu*/cache/index*"):
        try:
            level = int(Path(index, "level").read_text())
            kind = Path(index, "type").read_text().strip()
            size = _parse_size(Path(index, "size").read_text())
            shared = Path(index, "shared_cpu_list").read_text().strip()
        except (OSError, ValueError):
            continue
        if kind == "Instruction":
            continue
        if level > best_level:
            best_level, instances = level, {}
        if level == best_level:
            instances[shared] = size
    return sum(instances.values()) or FALLBACK_LLC


def physical_cores() -> int:
    """Distinct (package, core) pairs from sysfs; falls back to the logical count."""
    cores = set()
    for topo in glob.glob("/sys/devices/system/cpu/cpu[0-9]*/topology"):
        try:
            cores.add((Path(topo, "physical_package_id").read_text().strip(),
                       Path(topo, "core_id").read_text().strip()))
        except OSError:
            continue
    return len(cores) or os.cpu_count() or 1


def _parse_size(text: str) -> int:
    text = text.strip().upper()
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(text[-1:], 1)
    return int(text.rstrip("KMG")) * mult


def default_nmax_bytes() -> int:
    return 4 * detect_llc_bytes()


# -- patterns -----------------------------------------------------------------

def _timed_sync(ctx) -> float:
    ctx.channel.barrier()
    start = time.perf_counter()
    ctx.sync()
    return time.perf_counter() - start


def exchange_counts(h: int, p: int, s: int) -> list[int]:
    """Words process s sends to each destination; every process also receives h."""
    base, extra = divmod(h, p)
    return [base + (1 if (d - s) % p < extra else 0) for d in range(p)]


class TotalExchange:
    """Registered buffers for total exchanges of up to ``max_bytes`` per process."""

    def __init__(self, ctx, max_bytes: int):
        self.ctx = ctx
        self.max_bytes = max_bytes
        self.src = np.zeros(max(1, max_bytes), dtype=np.uint8)
        self.dst = np.zeros(max(1, max_bytes), dtype=np.uint8)
        ctx.resize_memory_register(ctx.n_slots + 2)
        ctx.resize_message_queue(max(ctx.capacity_msgs, ctx.nprocs))
        ctx.sync()
        self.s_src = ctx.register_local(self.src)
        self.s_dst = ctx.register_global(self.dst)

    def queue(self, h: int, w: int) -> None:
        ctx = self.ctx
        p, s = ctx.nprocs, ctx.pid
        if h * w > self.max_bytes:
            raise ValueError(f"h*w = {h * w} exceeds the {self.max_bytes}-byte buffers")
        sends = exchange_counts(h, p, s)
        src_off = 0
        for d in range(p):
            if not sends[d]:
                continue
            # d receives from q the words q sends it, stacked in source order
            dst_off = sum(exchange_counts(h, p, q)[d] for q in range(s)) * w
            ctx.put(self.s_src, src_off, d, self.s_dst, dst_off, sends[d] * w)
            src_off += sends[d] * w

    def close(self) -> None:
        self.ctx.deregister(self.s_src)
        self.ctx.deregister(self.s_dst)


def run_total_exchange(ctx, h: int, w: int, reps: int = DEFAULT_REPS,
                       warmup: int = DEFAULT_WARMUP, rig: TotalExchange | None = None
                       ) -> Measurement:
    if h < 0:
        raise ValueError("h must be non-negative")
    own = rig is None
    rig = rig or TotalExchange(ctx, h * w)
    m = Measurement("total-exchange", w, h)
    try:
        for i in range(warmup + reps):
            rig.queue(h, w)
            t = _timed_sync(ctx)
            if i >= warmup:
                m.times.append(t)
    finally:
        if own:
            rig.close()
    return m


class RoundRobin:
    def __init__(self, ctx, max_messages: int, msg_size: int = SMALL_MSG):
        self.ctx = ctx
        self.msg_size = msg_size
        self.max_messages = max_messages
        self.src = np.zeros(max(1, max_messages * msg_size), dtype=np.uint8)
        self.dst = np.zeros(max(1, max_messages * msg_size), dtype=np.uint8)
        ctx.resize_memory_register(ctx.n_slots + 2)
        ctx.resize_message_queue(max(ctx.capacity_msgs, max_messages))
        ctx.sync()
        self.s_src = ctx.register_local(self.src)
        self.s_dst = ctx.register_global(self.dst)

    def queue(self, n: int) -> None:
        ctx, size = self.ctx, self.msg_size
        p, s = ctx.nprocs, ctx.pid
        for i in range(n):
            # for fixed i the destinations form a permutation, so offset i is free
            ctx.put(self.s_src, i * size, (s + 1 + i) % p, self.s_dst, i * size, size)

    def close(self) -> None:
        self.ctx.deregister(self.s_src)
        self.ctx.deregister(self.s_dst)


def run_roundrobin_small(ctx, n_messages: int, msg_size: int = SMALL_MSG,
                         reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                         rig: RoundRobin | None = None) -> Measurement:
    own = rig is None
    rig = rig or RoundRobin(ctx, n_messages, msg_size)
    m = Measurement("roundrobin", msg_size, n_messages)
    try:
        for i in range(warmup + reps):
            rig.queue(n_messages)
            t = _timed_sync(ctx)
            if i >= warmup:
                m.times.append(t)
    finally:
        if own:
            rig.close()
    return m


def sweep(ctx, rig, hs, reps: int, warmup: int, seed: int, run) -> dict[int, Measurement]:
    """Interleave the h values in a shared random order, one sample per visit."""
    order = random.Random(seed)
    hs = sorted(set(hs))
    out = {h: Measurement(run.pattern, run.word_size, h) for h in hs}
    for _ in range(warmup):
        for h in hs:
            run(rig, h)
            _timed_sync(ctx)
    for _ in range(reps):
        visit = list(hs)
        order.shuffle(visit)
        for h in visit:
            run(rig, h)
            out[h].times.append(_timed_sync(ctx))
    return out


class _Pattern:
    def __init__(self, pattern: str, word_size: int, fn):
        self.pattern, self.word_size, self.fn = pattern, word_size, fn

    def __call__(self, rig, h):
        self.fn(rig, h)


def total_exchange_sweep(ctx, hs, w: int, reps: int = DEFAULT_REPS,
                         warmup: int = DEFAULT_WARMUP, seed: int = 0) -> dict[int, Measurement]:
    rig = TotalExchange(ctx, max(hs) * w)
    try:
        run = _Pattern("total-exchange", w, lambda r, h: r.queue(h, w))
        return sweep(ctx, rig, hs, reps, warmup, seed, run)
    finally:
        rig.close()


def roundrobin_sweep(ctx, ns, msg_size: int = SMALL_MSG, reps: int = DEFAULT_REPS,
                     warmup: int = DEFAULT_WARMUP, seed: int = 0) -> dict[int, Measurement]:
    rig = RoundRobin(ctx, max(ns), msg_size)
    try:
        run = _Pattern("roundrobin", msg_size, lambda r, n: r.queue(n))
        return sweep(ctx, rig, ns, reps, warmup, seed, run)
    finally:
        rig.close()


def measure_params(ctx, word_sizes=machine.WORD_SIZES, nmax_bytes: int | None = None,
                   reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                   seed: int = 0) -> tuple[dict[int, machine.WordParams], dict]:
    """Estimate (g, l) per word size; also returns the raw sweeps for plotting."""
    p = ctx.nprocs
    budget = nmax_bytes or default_nmax_bytes()
    table, sweeps = {}, {}
    for w in word_sizes:
        # aggregate send volume p * n_max * w covers the requested budget
        n_max = max(2 * p + 1, budget // (p * w))
        hs = sorted({0, p, 2 * p, n_max, *geometric_grid(2 * p, n_max)})
        res = total_exchange_sweep(ctx, hs, w, reps, warmup, seed + w)
        T = {h: m.mean for h, m in res.items()}
        g, l = estimate_params(T, p, n_max)
        table[w] = machine.WordParams(g, l, True)
        sweeps[w] = res
        log.info("w=%d n_max=%d g=%.4g l=%.4g", w, n_max, g, l)
    return table, sweeps


def write_csv(path, measurements) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["h", "mean_s", "ci95_s"])
        for m in sorted(measurements, key=lambda m: m.h):
            out.writerow([m.h, repr(m.mean), repr(m.ci95)])


# -- CLI ----------------------------------------------------------------------

def _bench(ctx, s, p, ns):
    if ns.pattern == "roundrobin":
        ns_grid = [0] + [1 << k for k in range(ns.max_log_messages + 1)]
        res = roundrobin_sweep(ctx, ns_grid, ns.msg_size, ns.reps, ns.warmup, ns.seed)
        return {"roundrobin": res}
    table, sweeps = measure_params(ctx, ns.word_size, ns.nmax, ns.reps, ns.warmup, ns.seed)
    return {"table": table, "sweeps": sweeps}


def _report(ns, p: int, result) -> int:
    if ns.pattern == "roundrobin":
        res = result["roundrobin"]
        hs = sorted(res)
        verdict = compliance(hs, [res[h].mean for h in hs])
        if ns.csv:
            write_csv(ns.csv, res.values())
        for h in hs:
            print(f"n={h:6d}  T={res[h].mean:.6e}s  +-{res[h].ci95:.2e}")
        print(verdict)
        return 0
    table, sweeps = result["table"], result["sweeps"]
    for w, wp in sorted(table.items()):
        res = sweeps[w]
        hs = sorted(res)
        verdict = compliance(hs, [res[h].mean for h in hs])
        print(f"w={w:8d}  g={wp.g:.4e} s/word  l={wp.l:.4e} s  {verdict}")
        if ns.csv:
            path = Path(ns.csv)
            if len(table) > 1:
                path = path.with_name(f"{path.stem}.w{w}{path.suffix or '.csv'}")
            write_csv(path, res.values())
    if ns.out:
        usable = {w: (wp.g, wp.l) for w, wp in table.items() if wp.g > 0 and wp.l >= 0}
        for w in sorted(set(table) - set(usable)):
            log.warning("w=%d: estimate unusable (g=%r), left to defaults", w, table[w].g)
        machine.write_params_file(ns.out, p, usable)
        print(f"wrote {ns.out}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lpf-probe-bench", description=__doc__.splitlines()[0])
    ap.add_argument("--backend", choices=("shm", "tcp"), default="shm")
    ap.add_argument("--nprocs", type=int, default=None, help="default: all cores")
    ap.add_argument("--word-size", type=int, action="append", default=None,
                    help="bytes per word; repeatable (default: 8, 64, 1024, 1048576)")
    ap.add_argument("--nmax", type=int, default=None,
                    help="aggregate bytes at the largest h (default: 4x last-level cache)")
    ap.add_argument("--reps", type=int, default=DEFAULT_REPS)
    ap.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    ap.add_argument("--pattern", choices=("total-exchange", "roundrobin"),
                    default="total-exchange")
    ap.add_argument("--msg-size", type=int, default=SMALL_MSG)
    ap.add_argument("--max-log-messages", type=int, default=12)
    ap.add_argument("--out", help="machine-parameters file to write")
    ap.add_argument("--csv", help="write h,mean_s,ci95_s here")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    ns = ap.parse_args(argv)
    ns.word_size = tuple(ns.word_size or machine.WORD_SIZES)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING)
    if ns.reps < 1:
        ap.error("--reps must be at least 1")

    def spmd(ctx, s, p, args):
        return _bench(ctx, s, p, ns)

    if ns.backend == "shm":
        from lpf.shm import max_procs, spawn_group
        from lpf.core import NO_ARGS

        p = ns.nprocs or max_procs()
        results = spawn_group(p, spmd, lambda pid: NO_ARGS)
        return _report(ns, p, results[0])

    from lpf import tcp
    from lpf.launcher import relaunch

    if "LPF_PID" not in os.environ:
        return relaunch(ns.nprocs or 2, "lpf.bench", sys.argv[1:] if argv is None else argv)
    init = tcp.init_from_env()
    try:
        result = tcp.hook(init, spmd)
    finally:
        tcp.finalize(init)
    return _report(ns, init.nprocs, result) if init.pid == 0 else 0


if __name__ == "__main__":
    sys.exit(main())
