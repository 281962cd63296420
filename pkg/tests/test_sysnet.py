import random

import pytest

from servesim.config import LinkSpec
from servesim.graphs import ALL_REDUCE, COMPUTE, P2P, ExecutionGraph
from servesim.sysnet import (RoutingError, SystemSimulator, Topology,
                             collective_time, max_min_shares)
from conftest import gpu

MiB = 1 << 20
GiB = 1 << 30


def _topo(n=2, bw=1e9, lat=0.0):
    devs = {f"g{i}": gpu(i) for i in range(n)}
    links = [LinkSpec(id=f"l{i}", endpoints=(f"g{i}", f"g{i+1}"),
                      bandwidth=bw, latency=lat) for i in range(n - 1)]
    # close the ring for collective tests with >2 devices
    if n > 2:
        links.append(LinkSpec(id=f"l{n-1}", endpoints=(f"g{n-1}", "g0"),
                              bandwidth=bw, latency=lat))
    nodes = {f"g{i}": "n0" for i in range(n)}
    return Topology(devs, links, nodes)


def test_all_reduce_formula_exact():
    # p=4, B=64 MiB, W=64 GiB/s, alpha=0 -> 2*(3/4)*B/W = 1.46484375 ms
    t = collective_time("all_reduce", 64 * MiB, 4, 64 * GiB)
    assert t == 1.46484375e-3


def test_all_to_all_formula_exact():
    # p=2, B=1 MiB, W=1 GiB/s -> (1/2)*B/W = 488.28125 us
    t = collective_time("all_to_all", 1 * MiB, 2, 1 * GiB)
    assert t == 488.28125e-6


def test_collective_latency_terms():
    a = 5e-6
    t = collective_time("all_reduce", 0, 4, 1e9, latency=a)
    assert t == pytest.approx(2 * 3 * a)
    t = collective_time("all_to_all", 0, 4, 1e9, latency=a)
    assert t == pytest.approx(3 * a)


def test_single_rank_collective_free():
    assert collective_time("all_reduce", 1 * MiB, 1, 1e9) == 0.0


def test_topology_collective_uses_ring_min_bw():
    topo = _topo(n=4, bw=64 * GiB)
    t = topo.collective_time(ALL_REDUCE, 64 * MiB, ("g0", "g1", "g2", "g3"))
    assert t == 1.46484375e-3


def test_route_bfs_and_missing():
    topo = _topo(n=3)
    r = topo.route("g0", "g2")
    assert [l.id for l in r.links] == ["l0", "l1"] or len(r.links) == 1
    devs = {"a": gpu(0), "b": gpu(1)}
    lonely = Topology(devs, [], {"a": "n0", "b": "n1"})
    with pytest.raises(RoutingError):
        lonely.route("a", "b")


def test_max_min_water_filling_oracle():
    # flows: a on l1; b on l1+l2; c on l2. caps l1=10, l2=6.
    # progressive filling: l2 binds first at 3 (b, c); then a gets 10-3=7.
    shares = max_min_shares({"a": ("l1",), "b": ("l1", "l2"), "c": ("l2",)},
                            {"l1": 10.0, "l2": 6.0})
    assert shares == {"a": 7.0, "b": 3.0, "c": 3.0}


def test_max_min_equal_split():
    shares = max_min_shares({1: ("l",), 2: ("l",), 3: ("l",)}, {"l": 9.0})
    assert shares == {1: 3.0, 2: 3.0, 3: 3.0}


def test_max_min_empty_path_unbounded():
    shares = max_min_shares({1: (), 2: ("l",)}, {"l": 4.0})
    assert shares[1] == float("inf") and shares[2] == 4.0


def _run_p2p(sim, nbytes, t0, src="g0", dst="g1"):
    g = ExecutionGraph(msg_id="x")
    g.add(P2P, src=src, dst=dst, bytes=nbytes)
    done = []
    sim.submit_graph(g, t0, on_complete=done.append)
    return done


def test_two_equal_flows_double_solo_time():
    topo = _topo(bw=float(1 << 30))
    sim = SystemSimulator(topo)
    d1 = _run_p2p(sim, 1 << 30, 0.0)
    d2 = _run_p2p(sim, 1 << 30, 0.0)
    sim.run()
    assert d1 == [2.0] and d2 == [2.0]  # exactly 2x the 1 s solo time


def test_staggered_flows_match_analytic():
    # cap 1 GiB/s; flow A: 1 GiB at t=0; flow B: 0.5 GiB at t=0.5.
    # [0,0.5): A alone moves 0.5. [0.5,...): both at 0.5 GiB/s.
    # B finishes 0.5 GiB at 0.5 + 1.0 = 1.5; A has 0.5 - 0.25... compute:
    # between 0.5 and 1.5 A moves 0.5 GiB -> A done exactly at 1.5 too.
    topo = _topo(bw=float(1 << 30))
    sim = SystemSimulator(topo)
    da = _run_p2p(sim, 1 << 30, 0.0)
    db = _run_p2p(sim, 1 << 29, 0.5)
    sim.run()
    assert da[0] == pytest.approx(1.5, rel=1e-9)
    assert db[0] == pytest.approx(1.5, rel=1e-9)


def test_graph_critical_path_oracle():
    """Random DAG, every op on its own device: completion time equals the
    longest dependency path (computed independently)."""
    rng = random.Random(4)
    n = 40
    devs = {f"g{i}": gpu(i) for i in range(n)}
    topo = Topology(devs, [], {d: "n0" for d in devs})
    g = ExecutionGraph(msg_id="x")
    lat = {}
    for i in range(n):
        deps = [j for j in range(i) if rng.random() < 0.15]
        lat[i] = rng.uniform(0.001, 0.01)
        g.add(COMPUTE, deps=deps, device=f"g{i}", latency=lat[i])
    # longest-path oracle
    finish = {}
    for op in g.ops:
        start = max((finish[d] for d in op.deps), default=0.0)
        finish[op.uid] = start + lat[op.uid]
    sim = SystemSimulator(topo)
    done = []
    sim.submit_graph(g, 0.0, on_complete=done.append)
    sim.run()
    assert done[0] == pytest.approx(max(finish.values()), rel=1e-12)


def test_device_serializes_ops():
    topo = _topo()
    sim = SystemSimulator(topo)
    g = ExecutionGraph(msg_id="x")
    g.add(COMPUTE, device="g0", latency=0.5)
    g.add(COMPUTE, device="g0", latency=0.5)
    done = []
    sim.submit_graph(g, 0.0, on_complete=done.append)
    sim.run()
    assert done[0] == pytest.approx(1.0)


def test_collective_occupies_all_devices():
    """An independent compute on g1 cannot run during the collective it
    shares a ready set with once the collective holds the device."""
    topo = _topo(bw=1e9, lat=0.0)
    sim = SystemSimulator(topo)
    sim.log_ops = True
    g = ExecutionGraph(msg_id="x")
    g.add(ALL_REDUCE, devices=("g0", "g1"), bytes=10**9, tag="ar")  # 1 s
    g.add(COMPUTE, device="g1", latency=0.25, tag="late")
    done = []
    sim.submit_graph(g, 0.0, on_complete=done.append)
    sim.run()
    log = {tag: (s, e) for tag, _, s, e in sim.op_log}
    assert log["ar"][0] == 0.0
    assert log["late"][0] >= log["ar"][1]  # ran after the collective
    assert done[0] == pytest.approx(1.25)


def test_first_token_marker_fires_mid_graph():
    topo = _topo()
    sim = SystemSimulator(topo)
    g = ExecutionGraph(msg_id="x")
    a = g.add(COMPUTE, device="g0", latency=0.1)
    g.add(COMPUTE, deps=[a.uid], device="g0", latency=0.4)
    g.first_token_uid = a.uid
    marks, done = [], []
    sim.submit_graph(g, 0.0, on_complete=done.append,
                     on_first_token=marks.append)
    sim.run()
    assert marks == [pytest.approx(0.1)]
    assert done == [pytest.approx(0.5)]


def test_tier_resource_flow():
    devs = {"g0": gpu(0)}
    topo = Topology(devs, [], {"g0": "n0"},
                    tier_resources={"tier:host:n0": (1e9, 0.0)})
    sim = SystemSimulator(topo)
    g = ExecutionGraph(msg_id="x")
    g.add("MemLoad", tier="tier:host:n0", bytes=5 * 10**8)
    done = []
    sim.submit_graph(g, 0.0, on_complete=done.append)
    sim.run()
    assert done[0] == pytest.approx(0.5)
