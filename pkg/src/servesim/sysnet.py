"""System simulator: event-driven execution of operator graphs over the
cluster topology.

Devices execute one op at a time; collectives occupy every participating
device for a closed-form alpha-beta duration; point-to-point and memory
transfers run as fluid flows sharing link/tier bandwidth by max-min
fairness. Event order is the total order (time, priority, sequence).
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import DeviceSpec, LinkSpec
from .graphs import (ALL_REDUCE, ALL_TO_ALL, COLLECTIVE_KINDS, COMPUTE_KINDS,
                     FLOW_KINDS, MEM_LOAD, MEM_STORE, P2P, ExecutionGraph,
                     MappedOp)

PRIO_FLOW = 0
PRIO_OP = 1
PRIO_ARRIVAL = 2

_EPS = 1e-12


class RoutingError(RuntimeError):
    pass


class SimError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Route:
    links: tuple[LinkSpec, ...]
    latency: float
    min_bandwidth: float

    @property
    def resource_ids(self) -> tuple[str, ...]:
        return tuple(l.id for l in self.links)

    @property
    def energy_per_byte(self) -> float:
        return sum(l.energy_per_byte for l in self.links)


class Topology:
    def __init__(self, devices: dict[str, DeviceSpec], links: list[LinkSpec],
                 device_nodes: dict[str, str],
                 tier_resources: Optional[dict[str, tuple[float, float]]] = None):
        """tier_resources: resource id -> (bandwidth, energy_per_byte)."""
        self.devices = devices
        self.links = {l.id: l for l in links}
        self.device_nodes = device_nodes
        self.tier_resources = dict(tier_resources or {})
        self._adj: dict[str, list[LinkSpec]] = {}
        for l in links:
            self._adj.setdefault(l.endpoints[0], []).append(l)
            self._adj.setdefault(l.endpoints[1], []).append(l)
        # implicit free edges between a device and its host node
        self._route_cache: dict[tuple[str, str], Route] = {}

    def resource_bandwidths(self) -> dict[str, float]:
        out = {lid: l.bandwidth for lid, l in self.links.items()}
        out.update({rid: bw for rid, (bw, _) in self.tier_resources.items()})
        return out

    def _neighbors(self, v: str):
        for l in sorted(self._adj.get(v, []), key=lambda l: l.id):
            other = l.endpoints[1] if l.endpoints[0] == v else l.endpoints[0]
            yield other, l
        node = self.device_nodes.get(v)
        if node is not None:
            yield node, None  # implicit device<->node edge, uncontended
        for dev, n in sorted(self.device_nodes.items()):
            if n == v:
                yield dev, None

    def route(self, src: str, dst: str) -> Route:
        if src == dst:
            return Route(links=(), latency=0.0, min_bandwidth=float("inf"))
        key = (src, dst)
        if key in self._route_cache:
            return self._route_cache[key]
        # BFS by hop count, deterministic neighbor order
        prev: dict[str, tuple[str, Optional[LinkSpec]]] = {src: (src, None)}
        q = deque([src])
        while q:
            v = q.popleft()
            if v == dst:
                break
            for other, link in self._neighbors(v):
                if other not in prev:
                    prev[other] = (v, link)
                    q.append(other)
        if dst not in prev:
            raise RoutingError(f"no route from {src} to {dst}")
        path = []
        v = dst
        while v != src:
            v, link = prev[v]
            if link is not None:
                path.append(link)
        path.reverse()
        route = Route(links=tuple(path),
                      latency=sum(l.latency for l in path),
                      min_bandwidth=min((l.bandwidth for l in path),
                                        default=float("inf")))
        self._route_cache[key] = route
        return route

    def p2p_time(self, nbytes: int, src: str, dst: str) -> float:
        """Solo (contention-free) transfer time."""
        r = self.route(src, dst)
        if r.min_bandwidth == float("inf"):
            return r.latency
        return r.latency + nbytes / r.min_bandwidth

    def collective_params(self, devices: tuple[str, ...]) -> tuple[float, float, float]:
        """(W, alpha, energy_per_byte) over the ring of sorted devices."""
        ring = sorted(devices)
        w = float("inf")
        alpha = 0.0
        epb = 0.0
        for i in range(len(ring)):
            r = self.route(ring[i], ring[(i + 1) % len(ring)])
            w = min(w, r.min_bandwidth)
            alpha = max(alpha, r.latency)
            epb = max(epb, r.energy_per_byte)
        return w, alpha, epb

    def collective_time(self, kind: str, bytes_per_rank: int,
                        devices: tuple[str, ...]) -> float:
        p = len(devices)
        if p < 2:
            return 0.0
        w, alpha, _ = self.collective_params(devices)
        b = bytes_per_rank
        if w == float("inf"):
            bw_term = 0.0
        elif kind == ALL_REDUCE:
            bw_term = 2 * (p - 1) / p * b / w
        else:
            bw_term = (p - 1) / p * b / w
        if kind == ALL_REDUCE:
            return bw_term + 2 * (p - 1) * alpha
        return bw_term + (p - 1) * alpha


def collective_time(kind: str, bytes_per_rank: int, ranks: int,
                    bandwidth: float, latency: float = 0.0) -> float:
    """Closed-form alpha-beta cost; ring all-reduce or all-to-all."""
    p = ranks
    if p < 2:
        return 0.0
    b = bytes_per_rank
    if kind in ("all_reduce", ALL_REDUCE):
        return 2 * (p - 1) / p * b / bandwidth + 2 * (p - 1) * latency
    if kind in ("all_to_all", ALL_TO_ALL):
        return (p - 1) / p * b / bandwidth + (p - 1) * latency
    raise ValueError(f"unknown collective '{kind}'")


# ---------------------------------------------------------------------------
# Fluid max-min fair flows
# ---------------------------------------------------------------------------

def max_min_shares(flow_paths: dict, bandwidths: dict) -> dict:
    """Progressive-filling allocation. flow_paths: fid -> resource ids."""
    shares = {}
    active = {fid for fid, path in flow_paths.items() if path}
    for fid, path in flow_paths.items():
        if not path:
            shares[fid] = float("inf")
    cap = dict(bandwidths)
    link_flows: dict[str, set] = {}
    for fid in active:
        for rid in flow_paths[fid]:
            link_flows.setdefault(rid, set()).add(fid)
    while active:
        best = None
        for rid in sorted(link_flows):
            members = link_flows[rid] & active
            if not members:
                continue
            fair = cap[rid] / len(members)
            if best is None or fair < best[0] - _EPS:
                best = (fair, rid)
        if best is None:
            break
        fair, rid = best
        for fid in sorted(link_flows[rid] & active):
            shares[fid] = fair
            active.discard(fid)
            for r2 in flow_paths[fid]:
                cap[r2] -= fair
    return shares


class _Flow:
    __slots__ = ("fid", "resources", "remaining", "share", "on_done",
                 "version", "last_update")

    def __init__(self, fid, resources, nbytes, on_done, now):
        self.fid = fid
        self.resources = tuple(resources)
        self.remaining = float(nbytes)
        self.share = 0.0
        self.on_done = on_done
        self.version = 0
        self.last_update = now


class FlowNetwork:
    def __init__(self, bandwidths: dict[str, float], scheduler):
        """scheduler: fn(time, prio, callback) scheduling into the event queue."""
        self.bandwidths = bandwidths
        self._schedule = scheduler
        self.active: dict[int, _Flow] = {}
        self._next_fid = 0

    def start(self, resources, nbytes: float, now: float, on_done) -> int:
        fid = self._next_fid
        self._next_fid += 1
        flow = _Flow(fid, resources, nbytes, on_done, now)
        if nbytes <= 0 or not resources:
            self._schedule(now, PRIO_FLOW, lambda: on_done(now))
            return fid
        self._advance(now)
        self.active[fid] = flow
        self._recompute(now)
        return fid

    def _advance(self, now: float):
        for f in self.active.values():
            f.remaining -= f.share * (now - f.last_update)
            if f.remaining < 0:
                f.remaining = 0.0
            f.last_update = now

    def _recompute(self, now: float):
        paths = {fid: f.resources for fid, f in self.active.items()}
        shares = max_min_shares(paths, self.bandwidths)
        for fid, f in self.active.items():
            f.share = shares[fid]
            f.version += 1
            if f.share <= 0:
                continue
            finish = now + f.remaining / f.share
            ver = f.version
            self._schedule(finish, PRIO_FLOW,
                           lambda f=f, ver=ver: self._finish(f, ver))

    def _finish(self, flow: _Flow, version: int, ):
        if flow.version != version or flow.fid not in self.active:
            return
        now = flow.last_update + (flow.remaining / flow.share
                                  if flow.share > 0 else 0.0)
        self._advance(now)
        del self.active[flow.fid]
        flow.on_done(now)
        self._recompute(now)


# ---------------------------------------------------------------------------
# Graph execution
# ---------------------------------------------------------------------------

class _DeviceState:
    __slots__ = ("busy", "ready")

    def __init__(self):
        self.busy = False
        self.ready: list[tuple[tuple[int, int], object, MappedOp]] = []


class _RunningGraph:
    def __init__(self, gseq: int, graph: ExecutionGraph, on_complete,
                 on_first_token=None):
        self.gseq = gseq
        self.graph = graph
        self.on_complete = on_complete
        self.on_first_token = on_first_token
        self.pending = {op.uid: len(op.deps) for op in graph.ops}
        self.dependents: dict[int, list[int]] = {op.uid: [] for op in graph.ops}
        for op in graph.ops:
            for d in op.deps:
                self.dependents[d].append(op.uid)
        self.remaining = len(graph.ops)


class SystemSimulator:
    def __init__(self, topology: Topology, ledger=None, max_events: int = 50_000_000):
        self.topology = topology
        self.ledger = ledger
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._gseq = 0
        self.max_events = max_events
        self.events_processed = 0
        self.devices = {d: _DeviceState() for d in topology.devices}
        self.flows = FlowNetwork(topology.resource_bandwidths(), self.schedule)
        self.op_log: list[tuple] = []  # (op tag, device(s), start, end)
        self.log_ops = False

    # -- event queue ----------------------------------------------------------

    def schedule(self, t: float, prio: int, fn: Callable[[], None]):
        if t < self.now - 1e-9:
            raise SimError(f"event scheduled in the past: {t} < {self.now}")
        heapq.heappush(self._heap, (max(t, self.now), prio, self._seq, fn))
        self._seq += 1

    def pending(self) -> bool:
        return bool(self._heap)

    def step(self):
        t, prio, seq, fn = heapq.heappop(self._heap)
        if t < self.now - 1e-9:
            raise SimError("clock went backwards")
        self.now = max(self.now, t)
        self.events_processed += 1
        if self.events_processed > self.max_events:
            raise SimError(f"event watchdog tripped at {self.max_events} events")
        fn()

    def run(self, until: Optional[float] = None):
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                break
            self.step()

    # -- graph execution --------------------------------------------------------

    def submit_graph(self, graph: ExecutionGraph, t: float, on_complete,
                     on_first_token=None):
        graph.check_acyclic()
        self._gseq += 1
        rg = _RunningGraph(self._gseq, graph, on_complete, on_first_token)
        roots = [op for op in graph.ops if not op.deps]
        if not roots and graph.ops:
            raise SimError("graph has no roots")
        if not graph.ops:
            self.schedule(t, PRIO_OP, lambda: on_complete(self.now))
            return rg
        self.schedule(t, PRIO_OP, lambda: self._release_ops(rg, roots))
        return rg

    def _release_ops(self, rg: _RunningGraph, ops: list[MappedOp]):
        touched: list[str] = []
        for op in sorted(ops, key=lambda o: o.uid):
            if op.kind in COMPUTE_KINDS:
                key = (rg.gseq, op.uid)
                self.devices[op.device].ready.append((key, rg, op))
                touched.append(op.device)
            elif op.kind in COLLECTIVE_KINDS:
                key = (rg.gseq, op.uid)
                for dev in op.devices:
                    self.devices[dev].ready.append((key, rg, op))
                touched.extend(op.devices)
            elif op.kind == P2P:
                self._start_p2p(rg, op)
            elif op.kind in (MEM_LOAD, MEM_STORE):
                self._start_mem(rg, op)
            else:
                raise SimError(f"unknown op kind {op.kind}")
        for dev in sorted(set(touched)):
            self._kick_device(dev)

    def _kick_device(self, dev_id: str):
        st = self.devices[dev_id]
        while not st.busy and st.ready:
            st.ready.sort(key=lambda e: e[0])
            key, rg, op = st.ready[0]
            if op.kind in COLLECTIVE_KINDS:
                if not self._collective_startable(key, op):
                    return  # hold the device for the collective
                for dev in op.devices:
                    d = self.devices[dev]
                    d.ready = [e for e in d.ready if e[0] != key]
                self._start_collective(rg, op)
                return
            st.ready.pop(0)
            self._start_compute(rg, op)
            return

    def _collective_startable(self, key, op: MappedOp) -> bool:
        for dev in op.devices:
            st = self.devices[dev]
            if st.busy:
                return False
            if not st.ready:
                return False
            if min(e[0] for e in st.ready) != key:
                return False
        return True

    def _record_active(self, device: str, start: float, end: float,
                       energy: Optional[float]):
        if self.ledger is None or end <= start:
            return
        spec = self.topology.devices[device]
        watts = (energy / (end - start)) if energy is not None else spec.active_w
        self.ledger.record_state(device, "active", start, end, watts)

    def _start_compute(self, rg: _RunningGraph, op: MappedOp):
        st = self.devices[op.device]
        st.busy = True
        start = self.now
        end = start + op.latency
        self._record_active(op.device, start, end, op.energy)
        if self.log_ops:
            self.op_log.append((op.tag or op.kind, op.device, start, end))
        self.schedule(end, PRIO_OP, lambda: self._finish_compute(rg, op))

    def _finish_compute(self, rg: _RunningGraph, op: MappedOp):
        self.devices[op.device].busy = False
        self._complete_op(rg, op)
        self._kick_device(op.device)

    def _start_collective(self, rg: _RunningGraph, op: MappedOp):
        dur = self.topology.collective_time(op.kind, op.bytes, op.devices)
        start = self.now
        end = start + dur
        p = len(op.devices)
        if p >= 2 and self.ledger is not None:
            _, _, epb = self.topology.collective_params(op.devices)
            moved = (2 * (p - 1) * op.bytes if op.kind == ALL_REDUCE
                     else (p - 1) * op.bytes)
            self.ledger.record_transfer("link", op.kind, moved, epb, start, end)
        for dev in op.devices:
            self.devices[dev].busy = True
            self._record_active(dev, start, end, None)
        if self.log_ops:
            self.op_log.append((op.tag or op.kind, op.devices, start, end))
        self.schedule(end, PRIO_OP, lambda: self._finish_collective(rg, op))

    def _finish_collective(self, rg: _RunningGraph, op: MappedOp):
        for dev in op.devices:
            self.devices[dev].busy = False
        self._complete_op(rg, op)
        for dev in sorted(set(op.devices)):
            self._kick_device(dev)

    def _start_p2p(self, rg: _RunningGraph, op: MappedOp):
        route = self.topology.route(op.src, op.dst)
        start = self.now
        activate = start + route.latency

        def on_done(t_done):
            if self.ledger is not None and route.links:
                self.ledger.record_transfer("link", f"{op.src}->{op.dst}",
                                            op.bytes, route.energy_per_byte,
                                            start, t_done)
            if self.log_ops:
                self.op_log.append((op.tag or op.kind, (op.src, op.dst),
                                    start, t_done))
            self._complete_op(rg, op)

        self.schedule(activate, PRIO_FLOW,
                      lambda: self.flows.start(route.resource_ids, op.bytes,
                                               self.now, on_done))

    def _start_mem(self, rg: _RunningGraph, op: MappedOp):
        rid = op.tier
        start = self.now
        bw_epb = self.topology.tier_resources.get(rid)
        if bw_epb is None:
            raise RoutingError(f"unknown tier resource '{rid}'")
        _, epb = bw_epb

        def on_done(t_done):
            if self.ledger is not None:
                self.ledger.record_transfer("dram", rid, op.bytes, epb,
                                            start, t_done)
            if self.log_ops:
                self.op_log.append((op.tag or op.kind, rid, start, t_done))
            self._complete_op(rg, op)

        self.flows.start((rid,), op.bytes, self.now, on_done)

    def _complete_op(self, rg: _RunningGraph, op: MappedOp):
        rg.remaining -= 1
        if (rg.graph.first_token_uid is not None
                and op.uid == rg.graph.first_token_uid
                and rg.on_first_token is not None):
            rg.on_first_token(self.now)
        newly_ready = []
        for duid in rg.dependents[op.uid]:
            rg.pending[duid] -= 1
            if rg.pending[duid] == 0:
                newly_ready.append(rg.graph.ops[duid])
        if newly_ready:
            self._release_ops(rg, newly_ready)
        if rg.remaining == 0:
            rg.on_complete(self.now)
