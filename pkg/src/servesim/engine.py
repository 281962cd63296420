"""Cluster engine: wires configuration, memory, power, and the system
simulator together and drives the request lifecycle end to end.

`plan()` builds the static runtime (topology, tier states, prefix-cache
chains,MSG instances, energy ledger); `run()` replays a trace through
arrival routing, continuous batching, and graph execution until the
trace drains or the time bound is hit.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .config import ClusterSpec, ModelSpec, MSGSpec
from .memory import (Clock, MsgMemory, RadixPrefixCache, TierState,
                     kv_bytes_per_token)
from .msg import (COMPLETE, DECODE, KV_TRANSFER, Batch, ModelServingGroup,
                  Request)
from .power import DEFAULT_STANDBY_TIMEOUT, EnergyLedger, fill_gaps
from .profiles import ProfileTable
from .sysnet import PRIO_ARRIVAL, SimError, SystemSimulator, Topology
from .workload import RequestSpec

DEVICE_BLOCK_TOKENS = 16


class PlanError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Request routing
# ---------------------------------------------------------------------------

class RouterState:
    """Assigns arriving requests to MSGs and PD handoffs to decode peers."""

    def __init__(self, policy: str, msgs: dict[str, ModelServingGroup]):
        self.policy = policy
        self.msgs = msgs
        self._rr: dict[str, int] = {}
        self._session: dict[tuple[str, str], str] = {}

    def _candidates(self, model: str) -> list[ModelServingGroup]:
        out = [m for mid, m in sorted(self.msgs.items())
               if m.model.name == model and m.spec.role in ("unified", "prefill")]
        if not out:
            raise PlanError(f"no MSG serves model '{model}'")
        return out

    def assign(self, req: RequestSpec) -> str:
        cands = self._candidates(req.model)
        if self.policy == "session_affinity" and req.session is not None:
            key = (req.model, req.session)
            if key in self._session:
                return self._session[key]
            chosen = self._round_robin(req.model, cands)
            self._session[key] = chosen
            return chosen
        if self.policy == "least_loaded":
            return min(cands, key=lambda m: (m.load_tokens(), m.spec.id)).spec.id
        return self._round_robin(req.model, cands)

    def _round_robin(self, model: str, cands) -> str:
        i = self._rr.get(model, 0)
        self._rr[model] = i + 1
        return cands[i % len(cands)].spec.id

    def pd_peer(self, prefill_msg: ModelServingGroup) -> str:
        peers = [self.msgs[p] for p in prefill_msg.spec.pd_peers]
        if not peers:
            raise PlanError(f"msg {prefill_msg.spec.id}: role=prefill "
                            "but no pd_peers configured")
        return min(peers, key=lambda m: (m.load_tokens(), m.spec.id)).spec.id


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass
class Plan:
    cluster: ClusterSpec
    models: dict[str, ModelSpec]
    topology: Topology
    ledger: EnergyLedger
    sim: SystemSimulator
    msgs: dict[str, ModelServingGroup]
    router: RouterState
    tier_states: dict[str, TierState]


def _tier_resource_id(tier, node_id: Optional[str]) -> str:
    if tier.scope == "per_node":
        return f"tier:{tier.tier}:{node_id}"
    return f"tier:{tier.tier}"


def plan(cluster: ClusterSpec, models: dict[str, ModelSpec],
         profiles: dict[tuple, ProfileTable], seed: int = 0) -> Plan:
    cluster.check()
    devices = cluster.device_map()
    device_nodes = {d: cluster.node_of_device(d) for d in devices}

    tier_resources: dict[str, tuple[float, float]] = {}
    tier_states: dict[str, TierState] = {}
    for tier in cluster.tiers:
        if tier.scope == "per_node":
            for node in cluster.nodes:
                rid = _tier_resource_id(tier, node.id)
                tier_resources[rid] = (tier.bandwidth, tier.energy_per_byte)
                tier_states[rid] = TierState(rid, tier.capacity, tier.bandwidth,
                                             tier.energy_per_byte)
        else:
            rid = _tier_resource_id(tier, None)
            tier_resources[rid] = (tier.bandwidth, tier.energy_per_byte)
            tier_states[rid] = TierState(rid, tier.capacity, tier.bandwidth,
                                         tier.energy_per_byte)

    topology = Topology(devices, list(cluster.links), device_nodes,
                        tier_resources)
    ledger = EnergyLedger()
    for node in cluster.nodes:
        for comp, watts in (("cpu", node.cpu_w), ("nic", node.nic_w),
                            ("storage", node.storage_w), ("other", node.other_w)):
            if watts > 0:
                ledger.register_constant(comp, f"{node.id}.{comp}", watts)
    sim = SystemSimulator(topology, ledger)

    clock = Clock()

    def bpt_of(model_name: str) -> int:
        return kv_bytes_per_token(models[model_name])

    # shared prefix caches: host per node, then cluster-scoped tiers
    shared_by_node: dict[str, list[RadixPrefixCache]] = {
        n.id: [] for n in cluster.nodes}
    cluster_caches: list[RadixPrefixCache] = []
    for tier in cluster.tiers:
        if tier.tier == "device":
            continue
        if tier.scope == "per_node":
            for node in cluster.nodes:
                rid = _tier_resource_id(tier, node.id)
                shared_by_node[node.id].append(RadixPrefixCache(
                    rid, tier_states[rid], tier.block_size_tokens,
                    bpt_of, clock))
        else:
            rid = _tier_resource_id(tier, None)
            cluster_caches.append(RadixPrefixCache(
                rid, tier_states[rid], tier.block_size_tokens, bpt_of, clock))

    msgs: dict[str, ModelServingGroup] = {}
    for i, spec in enumerate(cluster.msgs):
        model = models.get(spec.model)
        if model is None:
            raise PlanError(f"msg {spec.id}: unknown model '{spec.model}'")
        pool = [devices[d] for d in spec.device_pool]
        tables = {}
        for dev in pool:
            table = profiles.get((dev.profile_ref, model.name))
            if table is None:
                raise PlanError(f"msg {spec.id}: no profile for "
                                f"({dev.profile_ref}, {model.name})")
            tables[dev.id] = table
        accel = [d for d in pool if d.kind != "pim_stack"]
        kv_capacity = sum(d.mem_capacity for d in accel) - model.total_weight_bytes
        if kv_capacity <= 0:
            raise PlanError(f"msg {spec.id}: weights ({model.total_weight_bytes} B) "
                            "leave no device memory for KV cache")
        dev_tier = TierState(f"device:{spec.id}", kv_capacity,
                             max(d.effective_bandwidth for d in accel))
        dev_cache = RadixPrefixCache(f"device:{spec.id}", dev_tier,
                                     DEVICE_BLOCK_TOKENS, bpt_of, clock)
        node0 = device_nodes[accel[0].id]
        chain = list(shared_by_node[node0]) + list(cluster_caches)
        mem = MsgMemory(model, dev_tier, dev_cache, chain, DEVICE_BLOCK_TOKENS)
        msgs[spec.id] = ModelServingGroup(spec, model, pool, tables, mem,
                                          seed=seed * 9973 + i)
    for m in msgs.values():
        for peer in m.spec.pd_peers:
            m.peer_dev0_map[peer] = msgs[peer].accel[0].id

    router = RouterState(cluster.router_policy, msgs)
    return Plan(cluster=cluster, models=models, topology=topology,
                ledger=ledger, sim=sim, msgs=msgs, router=router,
                tier_states=tier_states)


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

@dataclass
class SimulationReport:
    requests: list[Request]
    makespan: float
    ledger: EnergyLedger
    events_processed: int
    token_events: list[tuple] = field(default_factory=list)   # (t, msg, tokens)
    prefix_events: list[tuple] = field(default_factory=list)  # (t, hit, input_len)
    msg_busy_windows: dict[str, list[tuple]] = field(default_factory=dict)

    @property
    def completed(self) -> list[Request]:
        return [r for r in self.requests if r.state == COMPLETE]


class Engine:
    def __init__(self, plan_: Plan, until: Optional[float] = None):
        self.p = plan_
        self.sim = plan_.sim
        self.until = until
        self.requests: list[Request] = []
        self.dirty: set[str] = set()
        self.token_events: list[tuple] = []
        self.prefix_events: list[tuple] = []
        self._busy_since: dict[str, Optional[float]] = {
            m: None for m in plan_.msgs}
        self._busy_windows: dict[str, list[tuple]] = {m: [] for m in plan_.msgs}
        self.graph_log: Optional[list] = None  # set by the CLI for --dump-graphs

    # -- msg busy-window tracking (drives the standby power state) -----------------

    def _touch_window(self, msg: ModelServingGroup, t: float):
        mid = msg.spec.id
        active = msg.busy or msg.has_work()
        since = self._busy_since[mid]
        if active and since is None:
            self._busy_since[mid] = t
        elif not active and since is not None:
            if t > since:
                self._busy_windows[mid].append((since, t))
            self._busy_since[mid] = None

    # -- lifecycle ----------------------------------------------------------------

    def _arrive(self, req: Request):
        mid = self.p.router.assign(req.spec)
        msg = self.p.msgs[mid]
        msg.enqueue(req)
        self.dirty.add(mid)
        self._touch_window(msg, self.sim.now)

    def _kick(self, mid: str):
        msg = self.p.msgs[mid]
        if msg.busy:
            return
        batch = msg.schedule_batch(self.sim.now)
        if batch is None:
            return
        if msg.spec.role == "prefill":
            for r in batch.prefill:
                if r.decode_peer is None:
                    r.decode_peer = self.p.router.pd_peer(msg)
        for r in batch.prefill:
            self.prefix_events.append(
                (self.sim.now, r.prefix_hit_tokens, r.spec.input_len))
        graph = msg.build_graph(batch)
        if self.graph_log is not None:
            self.graph_log.append((mid, self.sim.now, graph))
        msg.busy = True
        self._touch_window(msg, self.sim.now)
        self.sim.submit_graph(
            graph, self.sim.now,
            on_complete=lambda t, msg=msg, batch=batch: self._on_complete(
                msg, batch, t),
            on_first_token=lambda t, batch=batch: self._on_first_token(batch, t))

    def _on_first_token(self, batch: Batch, t: float):
        for r in batch.prefill:
            if r.first_token_time is None:
                r.first_token_time = t

    def _on_complete(self, msg: ModelServingGroup, batch: Batch, t: float):
        msg.busy = False
        out = msg.on_graph_complete(batch, t)
        tokens = len(batch.prefill) + len(batch.decode)
        if tokens:
            self.token_events.append((t, msg.spec.id, tokens))
        for r in out["handoff"]:
            peer = self.p.msgs[r.decode_peer]
            peer.adopt(r)
            self.dirty.add(peer.spec.id)
            self._touch_window(peer, t)
        self.dirty.add(msg.spec.id)
        self._touch_window(msg, t)

    def _drain_dirty(self):
        while self.dirty:
            mid = min(self.dirty)
            self.dirty.discard(mid)
            self._kick(mid)
            self._touch_window(self.p.msgs[mid], self.sim.now)

    def run(self, trace: list[RequestSpec]) -> SimulationReport:
        for seq, spec in enumerate(trace):
            spec.check()
            req = Request(spec, seq)
            self.requests.append(req)
            self.sim.schedule(spec.arrival, PRIO_ARRIVAL,
                              lambda r=req: self._arrive(r))
        while self.sim.pending():
            if self.until is not None and self.sim._heap[0][0] > self.until:
                break
            self.sim.step()
            self._drain_dirty()
        makespan = self.sim.now
        self._check_liveness()
        self.p.ledger.makespan = makespan
        self._finalize_power(makespan)
        self.p.ledger.check_no_overlap()
        return SimulationReport(
            requests=self.requests, makespan=makespan, ledger=self.p.ledger,
            events_processed=self.sim.events_processed,
            token_events=self.token_events, prefix_events=self.prefix_events,
            msg_busy_windows=self._busy_windows)

    def _check_liveness(self):
        if self.until is not None:
            return  # truncated runs may legitimately leave work behind
        stuck = [m.spec.id for m in self.p.msgs.values()
                 if m.has_work() or m.busy]
        if stuck:
            raise SimError(f"simulation drained with work stranded on {stuck}; "
                           "likely a request that can never be admitted")
        incomplete = [r.spec.id for r in self.requests if r.state != COMPLETE]
        if incomplete:
            raise SimError(f"requests never completed: {incomplete[:5]}")

    def _finalize_power(self, makespan: float):
        for mid, since in self._busy_since.items():
            if since is not None:
                self._busy_windows[mid].append((since, makespan))
                self._busy_since[mid] = None
        owner: dict[str, str] = {}
        for mid, msg in sorted(self.p.msgs.items()):
            for dev in msg.devices:
                owner.setdefault(dev.id, mid)
        for dev_id in sorted(self.p.topology.devices):
            spec = self.p.topology.devices[dev_id]
            windows = self._busy_windows.get(owner.get(dev_id, ""), [])
            fill_gaps(self.p.ledger, dev_id, spec.idle_w, spec.standby_w,
                      windows, (0.0, makespan), DEFAULT_STANDBY_TIMEOUT)


def simulate(cluster: ClusterSpec, models: dict[str, ModelSpec],
             profiles: dict[tuple, ProfileTable], trace: list[RequestSpec],
             seed: int = 0, until: Optional[float] = None) -> SimulationReport:
    p = plan(cluster, models, profiles, seed=seed)
    return Engine(p, until=until).run(trace)
