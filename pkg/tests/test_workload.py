import pytest
from hypothesis import given, settings, strategies as st

from servesim.config import GeneratorSpec, PrefixPoolSpec
from servesim.workload import (gen_burst_idle, gen_fixed, gen_poisson,
                               gen_pulses, generate, load_trace, save_trace)


def test_same_seed_identical():
    a = gen_poisson(rate=5.0, n=50, seed=9)
    b = gen_poisson(rate=5.0, n=50, seed=9)
    assert a.requests == b.requests


def test_different_seed_differs():
    a = gen_poisson(rate=5.0, n=50, seed=1)
    b = gen_poisson(rate=5.0, n=50, seed=2)
    assert a.requests != b.requests


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["poisson", "burst_idle", "pulses", "fixed"]),
       seed=st.integers(0, 2**16), n=st.integers(1, 60))
def test_trace_invariants(kind, seed, n):
    gen = GeneratorSpec(kind=kind, seed=seed, rate=8.0, n=n, k=max(1, n // 3),
                        pulses=3, interval=5.0, burst_rate=20.0, idle_rate=1.0,
                        period=10.0, duty=0.5, input_len=64, output_len=8)
    trace = generate(gen, "m")
    ids = [r.id for r in trace.requests]
    assert len(set(ids)) == len(ids)
    arr = [r.arrival for r in trace.requests]
    assert arr == sorted(arr)
    assert all(r.input_len >= 1 and r.output_len >= 1 for r in trace.requests)


def test_pulses_shape():
    t = gen_pulses(k=4, pulses=3, interval=60.0)
    assert len(t.requests) == 12
    arrivals = sorted({r.arrival for r in t.requests})
    assert arrivals == [0.0, 60.0, 120.0]


def test_fixed_all_at_zero():
    t = gen_fixed(n=5, input_len=10, output_len=2)
    assert len(t.requests) == 5
    assert all(r.arrival == 0.0 for r in t.requests)


def test_burst_idle_silent_idle_phase():
    t = gen_burst_idle(burst_rate=50.0, idle_rate=0.0, period=10.0, duty=0.5,
                       n=100, seed=3)
    for r in t.requests:
        assert (r.arrival % 10.0) < 5.0  # all arrivals inside bursts


def test_prefix_pool_grouping():
    pool = PrefixPoolSpec(num_groups=4, share_prob=1.0, prefix_len=32)
    t = gen_burst_idle(burst_rate=20.0, idle_rate=1.0, period=10.0, duty=0.5,
                       n=50, seed=7, prefix_pool=pool, input_len=64)
    for r in t.requests:
        assert len(r.prefix_tokens) == 32
        g = r.prefix_tokens[0] // 1_000_000
        assert r.prefix_tokens == tuple(g * 1_000_000 + i for i in range(32))
        assert r.session == f"g{g}"
        assert r.input_len >= 33  # at least one unique token past the prefix


def test_prefix_pool_share_prob_zero():
    pool = PrefixPoolSpec(num_groups=4, share_prob=0.0, prefix_len=32)
    t = gen_burst_idle(burst_rate=20.0, idle_rate=1.0, period=10.0, duty=0.5,
                       n=20, seed=7, prefix_pool=pool)
    assert all(not r.prefix_tokens for r in t.requests)


def test_trace_io_round_trip(tmp_path):
    pool = PrefixPoolSpec(num_groups=2, share_prob=0.5, prefix_len=16)
    t = gen_burst_idle(burst_rate=20.0, idle_rate=1.0, period=10.0, duty=0.5,
                       n=30, seed=11, prefix_pool=pool)
    p = tmp_path / "trace.jsonl"
    save_trace(t, str(p))
    back = load_trace(str(p))
    assert back.requests == t.requests


def test_empirical_length_dist():
    dist = {"input": [[10, 0.5], [100, 1.0]], "output": [[4, 1.0]]}
    t = gen_poisson(rate=10.0, n=200, seed=5, length_dist=dist)
    lens = {r.input_len for r in t.requests}
    assert lens <= {10, 100} and len(lens) == 2
    assert all(r.output_len == 4 for r in t.requests)
