"""Model Serving Group: request queue, batch scheduler, operation mapper,
expert router, and execution-graph construction for one model instance.

Graph shape (dense, per layer, per tensor-parallel rank): norm ->
qkv_proj -> attention -> out_proj -> AllReduce(tp>1) -> ffn_up ->
ffn_down -> AllReduce(tp>1), bracketed by embed and lm_head. MoE layers
replace the FFN pair with router_gate, optional AllToAll, and one
expert_ffn per expert that received tokens. Shardable ops take 1/tp of
the profiled (tp=1) latency; norm is replicated.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .config import ModelSpec, MSGSpec, DeviceSpec
from .graphs import (ALL_REDUCE, ALL_TO_ALL, COMPUTE, MEM_LOAD, MEM_STORE,
                     P2P, PIM_COMPUTE, ExecutionGraph)
from .memory import MsgMemory, PrefixHit
from .profiles import OperatorKey, ProfileTable
from .workload import RequestSpec

QUEUED, PREFILL, KV_TRANSFER, DECODE, COMPLETE = (
    "Queued", "Prefill", "KVTransfer", "Decode", "Complete")

_STATE_ORDER = (QUEUED, PREFILL, KV_TRANSFER, DECODE, COMPLETE)


class Request:
    """Runtime lifecycle record wrapping a RequestSpec."""

    def __init__(self, spec: RequestSpec, seq: int):
        self.spec = spec
        self.seq = seq
        self.state = QUEUED
        self.tokens_done = 0
        self.sched_time: Optional[float] = None
        self.first_token_time: Optional[float] = None
        self.done_time: Optional[float] = None
        self.prefix_hit_tokens = 0
        self.device_hit_tokens = 0
        self.hit: Optional[PrefixHit] = None
        self.decode_peer: Optional[str] = None
        self.kv_peak_bytes = 0
        # full token-id sequence: shared prefix + per-request unique ids
        uniq = 1_000_000_000 + seq * 100_000
        pad = spec.input_len - len(spec.prefix_tokens)
        self.tokens = tuple(spec.prefix_tokens) + tuple(
            uniq + i for i in range(max(0, pad)))

    def advance(self, state: str):
        if _STATE_ORDER.index(state) < _STATE_ORDER.index(self.state):
            raise RuntimeError(
                f"{self.spec.id}: illegal transition {self.state} -> {state}")
        self.state = state

    @property
    def context_len(self) -> int:
        return self.spec.input_len + self.tokens_done

    @property
    def effective_prefill_len(self) -> int:
        return max(1, self.spec.input_len - self.prefix_hit_tokens)


@dataclass
class Batch:
    prefill: list[Request] = field(default_factory=list)
    decode: list[Request] = field(default_factory=list)
    sub_batches: Optional[tuple[list[Request], list[Request]]] = None
    demoted_bytes: int = 0

    @property
    def size(self) -> int:
        return len(self.prefill) + len(self.decode)

    @property
    def total_tokens(self) -> int:
        return (sum(r.effective_prefill_len for r in self.prefill)
                + len(self.decode))


def route_experts(policy: str, tokens: int, num_experts: int, top_k: int,
                  rng: Optional[random.Random] = None,
                  user_table: Optional[tuple[float, ...]] = None) -> list[int]:
    """Per-expert routed token counts for one MoE layer."""
    counts = [0] * num_experts
    if tokens <= 0:
        return counts
    if policy == "random":
        if rng is None:
            raise ValueError("random routing requires an RNG")
        for _ in range(tokens):
            for _ in range(top_k):
                counts[rng.randrange(num_experts)] += 1
    elif policy == "round_robin":
        for t in range(tokens):
            for j in range(top_k):
                counts[(t + j) % num_experts] += 1
    elif policy == "proportional_load":
        for _ in range(tokens):
            order = sorted(range(num_experts), key=lambda e: (counts[e], e))
            for e in order[:top_k]:
                counts[e] += 1
    elif policy == "user_table":
        if user_table is None or abs(sum(user_table) - 1.0) > 1e-9:
            raise ValueError("user_table distribution must sum to 1 (+-1e-9)")
        total = tokens * top_k
        exact = [total * p for p in user_table]
        counts = [int(x) for x in exact]
        rem = total - sum(counts)
        order = sorted(range(num_experts),
                       key=lambda e: (-(exact[e] - counts[e]), e))
        for e in order[:rem]:
            counts[e] += 1
    else:
        raise ValueError(f"unknown expert routing policy '{policy}'")
    return counts


class ModelServingGroup:
    def __init__(self, spec: MSGSpec, model: ModelSpec,
                 devices: list[DeviceSpec],
                 tables: dict[str, ProfileTable],
                 mem: MsgMemory, seed: int = 0):
        self.spec = spec
        self.model = model
        self.devices = devices  # pool order
        self.tables = tables    # device id -> ProfileTable
        self.mem = mem
        self.queue: deque[Request] = deque()
        self.pending_adopt: deque[Request] = deque()
        self.decode_reqs: list[Request] = []
        self.busy = False
        self.iteration = 0
        self.rng = random.Random(seed)
        self.accel = [d for d in devices if d.kind != "pim_stack"]
        self.pims = [d for d in devices if d.kind == "pim_stack"]
        tp, pp = spec.tp_degree, spec.pp_degree
        if len(self.accel) < tp * pp:
            raise ValueError(f"msg {spec.id}: pool has {len(self.accel)} "
                             f"accelerators, needs tp*pp = {tp * pp}")
        self.stages = [self.accel[s * tp:(s + 1) * tp] for s in range(pp)]
        self.attn_offload_target: Optional[str] = None
        self.attn_offload_phase = "decode"
        self.expert_offload_tier: Optional[str] = None
        for rule in spec.offload_rules:
            if rule.op_class == "attention":
                self.attn_offload_target = rule.target
                if rule.condition:
                    self.attn_offload_phase = rule.condition.get("phase", "decode")
            elif rule.op_class == "expert_ffn":
                self.expert_offload_tier = rule.target
        # filled in by the engine at plan time: peer msg id -> first device id
        self.peer_dev0_map: dict[str, str] = {}

    # -- queueing ---------------------------------------------------------------

    def enqueue(self, req: Request):
        self.queue.append(req)

    def adopt(self, req: Request):
        """Receive a request handed over from a prefill peer."""
        self.pending_adopt.append(req)

    def has_work(self) -> bool:
        return bool(self.queue or self.decode_reqs or self.pending_adopt)

    def load_tokens(self) -> int:
        """Router load metric: outstanding tokens across assigned requests."""
        total = 0
        for r in list(self.queue) + list(self.pending_adopt) + self.decode_reqs:
            total += r.spec.input_len + r.spec.output_len - r.tokens_done
        return total

    # -- batch scheduler ----------------------------------------------------------

    def schedule_batch(self, now: float) -> Optional[Batch]:
        if self.busy:
            return None
        batch = Batch()
        # adopted requests (PD decode side) need their context KV admitted
        while self.pending_adopt:
            r = self.pending_adopt[0]
            if not self.mem.admit([(r.spec.id, r.spec.input_len)]).approved:
                break
            self.pending_adopt.popleft()
            r.advance(DECODE)
            self.decode_reqs.append(r)
        # all decode requests join; one new KV token each this iteration.
        # If the whole set does not fit, defer the newest requests: a single
        # budget pass picks the admissible FCFS prefix (avoids re-running
        # admission per candidate, which walks the prefix tree).
        decode = list(self.decode_reqs)
        if decode and not self.mem.admit(
                [(r.spec.id, 1) for r in decode]).approved:
            budget = (self.mem.device_tier.free
                      + self.mem.device_cache.evictable_bytes())
            kept = []
            for r in decode:
                grow = self.mem.growth_bytes(r.spec.id, 1)
                if grow > budget:
                    break
                budget -= grow
                kept.append(r)
            decode = kept
            if decode and not self.mem.admit(
                    [(r.spec.id, 1) for r in decode]).approved:
                decode = []
        batch.decode = decode
        demoted = 0
        # queued prefills admitted FCFS under max_batch and KV footprint
        while self.queue and batch.size < self.spec.max_batch:
            r = self.queue[0]
            hit = self.mem.prefix_lookup(r.tokens)
            decision = self.mem.admit(
                [(r.spec.id, r.spec.input_len - hit.device_tokens)])
            if not decision.approved:
                break
            demoted += decision.demoted_bytes
            self.queue.popleft()
            r.hit = hit
            r.prefix_hit_tokens = hit.hit_tokens
            r.device_hit_tokens = hit.device_tokens
            self.mem.pin_prefix(r.tokens[:hit.device_tokens])
            r.sched_time = now
            r.advance(PREFILL)
            batch.prefill.append(r)
        batch.demoted_bytes = demoted
        if batch.size == 0:
            return None
        if (self.spec.sbi_enabled and self.pims
                and len(batch.decode) >= self.spec.sbi_threshold):
            half = len(batch.decode) // 2
            batch.sub_batches = (batch.decode[:half], batch.decode[half:])
        for r in batch.prefill + batch.decode:
            r.kv_peak_bytes = max(r.kv_peak_bytes,
                                  self.mem.request_bytes(r.spec.id))
        return batch

    # -- profile access -----------------------------------------------------------

    def _lookup(self, device: DeviceSpec, op_class: str, batch: int, seq: int,
                shard: int = 1):
        rec = self.tables[device.id].lookup(
            OperatorKey(op_class, max(1, batch), max(1, seq)))
        lat = rec.latency / shard
        energy = rec.energy / shard if rec.energy is not None else None
        return lat, energy

    # -- operation mapping / graph construction ------------------------------------

    def map_ops(self, batch: Batch):
        return self.build_graph(batch).ops

    def build_graph(self, batch: Batch, mapped=None) -> ExecutionGraph:
        g = ExecutionGraph(msg_id=self.spec.id, batch=batch)
        self.iteration += 1
        roots: list[int] = []
        if batch.demoted_bytes > 0 and self.mem.shared_caches:
            op = g.add(MEM_STORE, tier=self.mem.shared_caches[0].name,
                       bytes=batch.demoted_bytes, tag="kv_demote")
            roots.append(op.uid)
        for r in batch.prefill:
            if r.hit:
                for ld in r.hit.loads:
                    op = g.add(MEM_LOAD, tier=ld.tier, bytes=ld.bytes,
                               tag=f"prefix_load:{r.spec.id}")
                    roots.append(op.uid)
        if batch.sub_batches is not None:
            a, b = batch.sub_batches
            s1 = self._emit_chain(g, batch.prefill, a, roots)
            s2 = self._emit_chain(g, [], b, roots)
            g.first_token_uid = s1
        else:
            g.first_token_uid = self._emit_chain(g, batch.prefill,
                                                 batch.decode, roots)
        g.check_acyclic()
        return g

    def _emit_chain(self, g: ExecutionGraph, prefill: list[Request],
                    decode: list[Request], roots: list[int]) -> Optional[int]:
        """Emit one transformer pass; returns the lm_head uid (first-token
        marker) or None for an empty chain."""
        model = self.model
        tp = self.spec.tp_degree
        dt = model.dtype_bytes
        h = model.hidden_dim
        np_, nd = len(prefill), len(decode)
        p_tokens = sum(r.effective_prefill_len for r in prefill)
        total = p_tokens + nd
        if total == 0:
            return None
        mean_plen = _imean([r.effective_prefill_len for r in prefill])
        mean_ctx = _imean([r.context_len for r in decode])
        layers_per_stage = -(-model.num_layers // self.spec.pp_degree)
        act_bytes = total * h * dt
        kv_layer_bytes = 2 * model.num_kv_heads * model.head_dim * dt

        dev0 = self.stages[0][0]
        lat, en = self._lookup(dev0, "embed", total, 1, tp)
        embed = g.add(COMPUTE, deps=roots, device=dev0.id, layer=-1,
                      key=OperatorKey("embed", total, 1), latency=lat,
                      energy=en, tag="embed")
        frontier = [embed.uid]

        for layer in range(model.num_layers):
            stage = min(layer // layers_per_stage, self.spec.pp_degree - 1)
            devs = self.stages[stage]
            if layer > 0 and layer % layers_per_stage == 0:
                # pipeline-stage boundary: activations move between stages
                prev = self.stages[stage - 1][0]
                op = g.add(P2P, deps=frontier, src=prev.id, dst=devs[0].id,
                           bytes=act_bytes, layer=layer, tag="pp_act")
                frontier = [op.uid]
            attn_outs = []
            qkv_uids = []
            for rank, dev in enumerate(devs):
                lat, en = self._lookup(dev, "norm", total, 1, 1)
                norm = g.add(COMPUTE, deps=frontier, device=dev.id, layer=layer,
                             key=OperatorKey("norm", total, 1), latency=lat,
                             energy=en, tag="norm")
                lat, en = self._lookup(dev, "qkv_proj", total, 1, tp)
                qkv = g.add(COMPUTE, deps=[norm.uid], device=dev.id, layer=layer,
                            key=OperatorKey("qkv_proj", total, 1), latency=lat,
                            energy=en, tag="qkv_proj")
                qkv_uids.append(qkv.uid)
            offload_decode = (self.attn_offload_target is not None and nd > 0
                              and self.attn_offload_phase in ("decode", "both"))
            offload_prefill = (self.attn_offload_target is not None and np_ > 0
                               and self.attn_offload_phase == "both")
            for rank, dev in enumerate(devs):
                if np_ > 0 and not offload_prefill:
                    lat, en = self._lookup(dev, "attention_prefill", np_,
                                           mean_plen, tp)
                    op = g.add(COMPUTE, deps=[qkv_uids[rank]], device=dev.id,
                               layer=layer,
                               key=OperatorKey("attention_prefill", np_, mean_plen),
                               latency=lat, energy=en, tag="attention_prefill")
                    attn_outs.append(op.uid)
                if nd > 0 and not offload_decode:
                    lat, en = self._lookup(dev, "attention_decode", nd,
                                           mean_ctx, tp)
                    op = g.add(COMPUTE, deps=[qkv_uids[rank]], device=dev.id,
                               layer=layer,
                               key=OperatorKey("attention_decode", nd, mean_ctx),
                               latency=lat, energy=en, tag="attention_decode")
                    attn_outs.append(op.uid)
            for phase, count, length, go in (
                    ("prefill", np_, mean_plen, offload_prefill),
                    ("decode", nd, mean_ctx, offload_decode)):
                if not go or count == 0:
                    continue
                pim_id = self.attn_offload_target
                pim_dev = next(d for d in self.devices if d.id == pim_id)
                nbytes = count * (length if phase == "prefill" else 1) * h * dt
                p_in = g.add(P2P, deps=qkv_uids, src=devs[0].id, dst=pim_id,
                             bytes=nbytes, layer=layer, tag="act_to_pim")
                lat, en = self._lookup(pim_dev, "pim_attention", count, length, 1)
                pim = g.add(PIM_COMPUTE, deps=[p_in.uid], device=pim_id,
                            layer=layer,
                            key=OperatorKey("pim_attention", count, length),
                            latency=lat, energy=en, tag="pim_attention")
                p_out = g.add(P2P, deps=[pim.uid], src=pim_id, dst=devs[0].id,
                              bytes=count * h * dt, layer=layer,
                              tag="act_from_pim")
                attn_outs.append(p_out.uid)
            out_uids = []
            for rank, dev in enumerate(devs):
                lat, en = self._lookup(dev, "out_proj", total, 1, tp)
                op = g.add(COMPUTE, deps=attn_outs, device=dev.id, layer=layer,
                           key=OperatorKey("out_proj", total, 1), latency=lat,
                           energy=en, tag="out_proj")
                out_uids.append(op.uid)
            frontier = out_uids
            if tp > 1:
                ar = g.add(ALL_REDUCE, deps=out_uids,
                           devices=tuple(d.id for d in devs),
                           bytes=act_bytes, layer=layer, tag="allreduce_attn")
                frontier = [ar.uid]
            if model.moe is not None:
                frontier = self._emit_moe(g, layer, devs, total, frontier)
            else:
                down_uids = []
                for rank, dev in enumerate(devs):
                    lat, en = self._lookup(dev, "ffn_up", total, 1, tp)
                    up = g.add(COMPUTE, deps=frontier, device=dev.id,
                               layer=layer, key=OperatorKey("ffn_up", total, 1),
                               latency=lat, energy=en, tag="ffn_up")
                    lat, en = self._lookup(dev, "ffn_down", total, 1, tp)
                    down = g.add(COMPUTE, deps=[up.uid], device=dev.id,
                                 layer=layer,
                                 key=OperatorKey("ffn_down", total, 1),
                                 latency=lat, energy=en, tag="ffn_down")
                    down_uids.append(down.uid)
                frontier = down_uids
                if tp > 1:
                    ar = g.add(ALL_REDUCE, deps=down_uids,
                               devices=tuple(d.id for d in devs),
                               bytes=act_bytes, layer=layer,
                               tag="allreduce_ffn")
                    frontier = [ar.uid]
            # PD: layer-wise KV transfer of freshly computed prefill context
            if self.spec.role == "prefill" and np_ > 0:
                peer_dev = self._peer_device(prefill)
                if peer_dev is not None:
                    nbytes = sum(r.spec.input_len for r in prefill) * kv_layer_bytes
                    g.add(P2P, deps=attn_outs, src=devs[0].id, dst=peer_dev,
                          bytes=nbytes, layer=layer, tag="kv_transfer")

        last_dev = self.stages[-1][0]
        lat, en = self._lookup(last_dev, "lm_head", np_ + nd, 1, tp)
        lm = g.add(COMPUTE, deps=frontier, device=last_dev.id, layer=model.num_layers,
                   key=OperatorKey("lm_head", np_ + nd, 1), latency=lat,
                   energy=en, tag="lm_head")
        return lm.uid

    def _emit_moe(self, g: ExecutionGraph, layer: int, devs, total: int,
                  frontier: list[int]) -> list[int]:
        moe = self.model.moe
        ep = self.spec.ep_degree
        dt = self.model.dtype_bytes
        h = self.model.hidden_dim
        gate_uids = []
        for dev in devs:
            lat, en = self._lookup(dev, "router_gate", total, 1, 1)
            op = g.add(COMPUTE, deps=frontier, device=dev.id, layer=layer,
                       key=OperatorKey("router_gate", total, 1), latency=lat,
                       energy=en, tag="router_gate")
            gate_uids.append(op.uid)
        frontier = gate_uids
        ep_devs = tuple(d.id for d in self.accel[:ep])
        if ep > 1:
            a2a = g.add(ALL_TO_ALL, deps=frontier, devices=ep_devs,
                        bytes=total * h * dt, layer=layer, tag="a2a_dispatch")
            frontier = [a2a.uid]
        counts = route_experts(
            moe.router_policy, total, moe.num_experts, moe.top_k,
            rng=self.rng, user_table=moe.user_table)
        expert_uids = []
        expert_w_bytes = 2 * h * moe.expert_intermediate_dim * dt
        for e, c in enumerate(counts):
            if c == 0:
                continue
            dev = self.accel[e % max(1, min(ep, len(self.accel)))]
            deps = list(frontier)
            if self.expert_offload_tier is not None:
                tier_name = self._tier_resource(self.expert_offload_tier)
                ld = g.add(MEM_LOAD, deps=frontier, tier=tier_name,
                           bytes=expert_w_bytes, layer=layer,
                           tag=f"expert_load:{e}")
                deps = [ld.uid]
            lat, en = self._lookup(dev, "expert_ffn", c, 1, 1)
            op = g.add(COMPUTE, deps=deps, device=dev.id, layer=layer,
                       key=OperatorKey("expert_ffn", c, 1), latency=lat,
                       energy=en, tag=f"expert_ffn:{e}")
            expert_uids.append(op.uid)
        frontier = expert_uids or frontier
        if ep > 1:
            a2a = g.add(ALL_TO_ALL, deps=frontier, devices=ep_devs,
                        bytes=total * h * dt, layer=layer, tag="a2a_combine")
            frontier = [a2a.uid]
        return frontier

    def _tier_resource(self, tier_name: str) -> str:
        for cache in self.mem.shared_caches:
            if tier_name in cache.name:
                return cache.name
        return tier_name

    def _peer_device(self, prefill: list[Request]) -> Optional[str]:
        # all prefill requests in a batch share the decode peer device target
        peer = prefill[0].decode_peer if prefill else None
        if peer is None:
            return None
        return self.peer_dev0_map.get(peer)

    # -- completion -------------------------------------------------------------

    def on_graph_complete(self, batch: Batch, t: float) -> dict[str, list[Request]]:
        """Apply request state updates; returns transitions for the engine.

        Keys: 'first_token' (prefill done, stays here for decode),
        'handoff' (prefill done, PD transfer complete, goes to peer),
        'completed', 'decoded' (one more token).
        """
        out: dict[str, list[Request]] = {
            "first_token": [], "handoff": [], "completed": [], "decoded": []}
        for r in batch.prefill:
            self.mem.unpin_prefix(r.tokens[:r.device_hit_tokens])
            # cache only the shared prefix: per-request unique suffixes can
            # never hit again and would displace reusable blocks
            shared = r.tokens[:len(r.spec.prefix_tokens)]
            if shared:
                self.mem.insert_prefix(shared)
            if r.first_token_time is None:
                r.first_token_time = t
            r.tokens_done = 1
            if self.spec.role == "prefill":
                r.advance(KV_TRANSFER)
                self.mem.free_request(r.spec.id)
                out["handoff"].append(r)
            elif r.tokens_done >= r.spec.output_len:
                r.advance(COMPLETE)
                r.done_time = t
                self.mem.free_request(r.spec.id)
                out["completed"].append(r)
            else:
                r.advance(DECODE)
                self.decode_reqs.append(r)
                out["first_token"].append(r)
        for r in batch.decode:
            r.tokens_done += 1
            if r.tokens_done >= r.spec.output_len:
                r.advance(COMPLETE)
                r.done_time = t
                self.mem.free_request(r.spec.id)
                self.decode_reqs.remove(r)
                out["completed"].append(r)
            else:
                out["decoded"].append(r)
        return out


def _imean(values: list[int]) -> int:
    if not values:
        return 1
    return max(1, int(sum(values) / len(values) + 0.5))
