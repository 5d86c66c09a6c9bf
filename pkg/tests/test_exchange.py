import math
import random

import pytest

from lpf.core import Config
from lpf.shm import ThreadGroup
from lpf.sync.exchange import (
    ExchangeStats, exchange_bruck_randomized, exchange_direct, rounds_needed,
)

from conftest import run_threads


def collective(p, fn):
    """Run fn(channel, pid) on every member of a fresh thread group."""
    group = ThreadGroup(p, Config(barrier_fanin=2))
    results, errors = run_threads(p, lambda s: fn(group.channels[s], s))
    assert errors == [None] * p, errors
    return results


def random_blocks(rng, p, max_len=64):
    return [[bytes(rng.randrange(256) for _ in range(rng.randrange(max_len)))
             for _ in range(p)] for _ in range(p)]


@pytest.mark.parametrize("p, rounds", [(1, 0), (2, 1), (3, 2), (4, 2), (8, 3), (9, 4), (32, 5)])
def test_rounds_needed(p, rounds):
    assert rounds_needed(p) == rounds == math.ceil(math.log2(p))


def test_direct_identity_for_one_process():
    assert collective(1, lambda ch, s: exchange_direct(ch, [b"abc"])) == [[b"abc"]]


@pytest.mark.parametrize("p", [2, 5, 8])
def test_direct_pid_bytes(p):
    out = collective(p, lambda ch, s: exchange_direct(ch, [bytes([s])] * p))
    assert out == [[bytes([q]) for q in range(p)]] * p


@pytest.mark.parametrize("p", [1, 2, 3, 7, 8, 13])
def test_bruck_equals_transpose(p):
    rng = random.Random(p)
    sent = random_blocks(rng, p)
    stats = [ExchangeStats() for _ in range(p)]

    def body(ch, s):
        return exchange_bruck_randomized(ch, sent[s], random.Random(100 + s), stats[s])

    out = collective(p, body)
    assert out == [[sent[q][s] for q in range(p)] for s in range(p)]
    assert all(st.rounds == 2 * rounds_needed(p) for st in stats)
    assert all(st.messages <= 2 * max(1, rounds_needed(p)) for st in stats)


def test_bruck_p8_three_rounds_per_phase():
    p = 8
    stats = [ExchangeStats() for _ in range(p)]
    collective(p, lambda ch, s: exchange_bruck_randomized(
        ch, [b"x" * s] * p, random.Random(s), stats[s]))
    assert {st.rounds for st in stats} == {6}


def test_skewed_load_balanced_over_seeds():
    # everyone sends one block to process 0 only; count where blocks are parked
    p, seeds = 8, 100
    load = [0] * p
    for seed in range(seeds):
        stats = [ExchangeStats() for _ in range(p)]

        def body(ch, s):
            blocks = [b"z" * 64 if d == 0 else b"" for d in range(p)]
            out = exchange_bruck_randomized(ch, blocks, random.Random(seed * p + s), stats[s])
            if s == 0:
                assert out == [b"z" * 64] * p
            return out

        collective(p, body)
        for s in range(p):
            load[s] += stats[s].intermediate_bytes
    mean = sum(load) / p
    assert max(load) <= 3 * mean
