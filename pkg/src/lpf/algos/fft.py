"""Parallel radix-2 FFT with a single data redistribution.

Write n = p * m. Process s holds the cyclic slice x[s], x[s + p], ... which is
itself a length-m sequence, so

    X[k2 + m*k1] = sum_j1 w_p^(j1*k1) * w_n^(j1*k2) * Y_j1[k2]

with Y_j1 the length-m FFT of process j1's slice. The algorithm is:

  A. one local length-m FFT per process;
  B. one all-to-all: Y_s[q + p*i] goes to process q (m/p values per peer);
  C. twiddle by w_n^(j1*k2), then n/p^2 length-p FFTs, one per k2 held.

Process q ends up owning every k = q + p*(i + (m/p)*k1), i.e. the output is
cyclic again. Every element crosses the network once: h = n/p words.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from lpf.core import NO_ARGS, Context

WORD = np.dtype(np.complex128).itemsize


def is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class DistVector:
    """Slice of a length-n complex vector owned by process ``pid`` of ``p``."""

    n: int
    p: int
    pid: int
    local: np.ndarray
    distribution: str = "cyclic"

    def __post_init__(self):
        if self.distribution not in ("cyclic", "block"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        self.local = np.ascontiguousarray(self.local, dtype=np.complex128)
        if len(self.local) != local_length(self.n, self.p, self.pid):
            raise ValueError("local slice has the wrong length")

    def global_indices(self) -> np.ndarray:
        if self.distribution == "cyclic":
            return np.arange(self.pid, self.n, self.p)
        start = self.pid * (self.n // self.p) + min(self.pid, self.n % self.p)
        return np.arange(start, start + len(self.local))

    @classmethod
    def scatter(cls, x, p: int, pid: int, distribution: str = "cyclic") -> DistVector:
        x = np.asarray(x, dtype=np.complex128)
        dummy = cls(len(x), p, pid, np.zeros(local_length(len(x), p, pid), np.complex128),
                    distribution)
        dummy.local = x[dummy.global_indices()].copy()
        return dummy


def local_length(n: int, p: int, pid: int) -> int:
    return n // p + (1 if pid < n % p else 0)


def gather(parts) -> np.ndarray:
    """Assemble a global vector from every process's DistVector (sequential helper)."""
    parts = list(parts)
    out = np.empty(parts[0].n, dtype=np.complex128)
    for v in parts:
        out[v.global_indices()] = v.local
    return out


def _exact_twiddles(n: int, exponents: np.ndarray) -> np.ndarray:
    # reduce mod n first so large products keep full angle precision
    return np.exp(-2j * np.pi * (np.asarray(exponents, dtype=np.int64) % n) / n)


def local_fft(x, axis: int = -1) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along ``axis``."""
    a = np.moveaxis(np.array(x, dtype=np.complex128), axis, -1)
    n = a.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    a = a[..., rev]
    span = 1
    while span < n:
        w = _exact_twiddles(2 * span, np.arange(span))
        blocks = a.reshape(*a.shape[:-1], n // (2 * span), 2, span)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        a = np.concatenate((even + odd, even - odd), axis=-1).reshape(a.shape)
        span *= 2
    return np.moveaxis(a, -1, axis)


def dft_oracle(x, chunk: int = 256) -> np.ndarray:
    """Direct O(n^2) DFT, evaluated a block of output rows at a time."""
    x = np.asarray(x, dtype=np.complex128)
    n = len(x)
    j = np.arange(n, dtype=np.int64)
    out = np.empty(n, dtype=np.complex128)
    for k0 in range(0, n, chunk):
        k = np.arange(k0, min(n, k0 + chunk), dtype=np.int64)
        out[k] = _exact_twiddles(n, np.outer(k, j)) @ x
    return out


def check_shape(n: int, p: int) -> None:
    if not is_pow2(n):
        raise ValueError(f"n = {n} is not a power of two")
    if not is_pow2(p):
        raise ValueError(f"p = {p} is not a power of two")
    if n <= p * p:
        raise ValueError(f"need sqrt(n) > p, got n = {n}, p = {p}")


def fft_forward(ctx: Context, v: DistVector, trace: list | None = None) -> DistVector:
    """Forward DFT of a cyclically distributed vector; collective.

    Runs in a fresh context through ``rehook``, so the caller's slots and
    capacities are untouched. ``trace`` (if given) receives the SyncStats of
    every superstep.
    """
    n, p, s = v.n, ctx.nprocs, ctx.pid
    check_shape(n, p)
    if v.p != p or v.pid != s or v.distribution != "cyclic":
        raise ValueError("input must be this context's cyclic slice")
    m = n // p
    q_len = m // p

    def body(inner: Context, s, p, _args):
        if trace is not None:
            inner.trace = trace
        send = np.empty((p, q_len), dtype=np.complex128)
        recv = np.empty((p, q_len), dtype=np.complex128)
        inner.resize_memory_register(2)
        inner.resize_message_queue(p)
        inner.sync()
        s_send = inner.register_local(send)
        s_recv = inner.register_global(recv)

        # A: local FFT, then group by destination: send[q, i] = Y_s[q + p*i]
        y = local_fft(v.local)
        send[:] = y.reshape(q_len, p).T

        # B: the redistribution, one superstep
        row = q_len * WORD
        for q in range(p):
            inner.put(s_send, q * row, q, s_recv, s * row, row)
        inner.sync()

        # C: recv[j1, i] = Y_j1[k2] with k2 = s + p*i; twiddle, FFT over j1
        k2 = s + p * np.arange(q_len)
        z = recv * _exact_twiddles(n, np.outer(np.arange(p), k2))
        out = local_fft(z, axis=0)   # out[k1, i] = X[k2_i + m*k1]
        inner.deregister(s_send)
        inner.deregister(s_recv)
        # local index b*q_len + i holds global k2_i + m*b = s + p*(i + q_len*b)
        return out.reshape(-1)

    local = ctx.rehook(body, NO_ARGS)
    return DistVector(n, p, s, local, "cyclic")


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom else 1.0))


def _run(ctx, s, p, args, log_n, check, seed):
    n = 1 << log_n
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v = DistVector.scatter(x, p, s)
    trace: list = []
    start = time.perf_counter()
    out = fft_forward(ctx, v, trace)
    elapsed = time.perf_counter() - start
    err = None
    if check:
        expected = dft_oracle(x)
        err = relative_error(out.local, expected[out.global_indices()])
    return elapsed, err, [st.in_words(WORD).h for st in trace]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lpf-fft", description="parallel FFT demo")
    ap.add_argument("--backend", choices=("shm", "tcp"), default="shm")
    ap.add_argument("-n", type=int, default=10, help="log2 of the vector length")
    ap.add_argument("-p", type=int, default=2, help="number of processes")
    ap.add_argument("--check", action="store_true", help="compare against the naive DFT")
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args(argv)
    if not 1 <= ns.n <= 30:
        ap.error("-n is log2 of the length and must lie in [1, 30]")
    try:
        check_shape(1 << ns.n, ns.p)
    except ValueError as exc:
        ap.error(str(exc))

    def spmd(ctx, s, p, args):
        return _run(ctx, s, p, args, ns.n, ns.check, ns.seed)

    if ns.backend == "shm":
        from lpf.shm import spawn_group

        results = spawn_group(ns.p, spmd, lambda pid: NO_ARGS)
    else:
        from lpf import tcp
        from lpf.launcher import relaunch

        if "LPF_PID" not in os.environ:
            return relaunch(ns.p, "lpf.algos.fft", sys.argv[1:] if argv is None else argv)
        init = tcp.init_from_env()
        try:
            results = [tcp.hook(init, spmd)]
        finally:
            tcp.finalize(init)
        if init.pid != 0:
            return 0
    elapsed = max(r[0] for r in results)
    print(f"n=2^{ns.n} p={ns.p} time={elapsed:.6f}s h_words={results[0][2]}")
    if ns.check:
        worst = max(r[1] for r in results)
        print(f"max relative l2 error vs naive DFT: {worst:.3e}")
        return 0 if worst <= 1e-10 else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
