"""Input specifications: workload, cluster, and profile references.

All three simulator inputs are JSON. Loaders reject unknown fields and
check every documented invariant at load time, naming the violated
invariant in the error message.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

DEVICE_KINDS = ("gpu", "npu", "tpu", "pim_stack", "cxl_device")
TIER_NAMES = ("device", "host", "cxl_pool", "storage")
TIER_SCOPES = ("per_device", "per_node", "global")
MSG_ROLES = ("unified", "prefill", "decode")
ROUTER_POLICIES = ("round_robin", "least_loaded", "session_affinity")
EXPERT_ROUTER_POLICIES = ("random", "round_robin", "proportional_load", "user_table")
OFFLOAD_OP_CLASSES = ("attention", "expert_ffn", "kv_cache", "weights")

DEFAULT_VOCAB_SIZE = 32768


class ConfigError(ValueError):
    """Raised for parse errors, dangling references, and invariant violations."""


def _ctx(where: str, msg: str) -> ConfigError:
    return ConfigError(f"{where}: {msg}")


_MISSING = object()


class _Fields:
    """Wrapper over a JSON object that rejects unknown fields."""

    def __init__(self, raw: Any, where: str):
        if not isinstance(raw, dict):
            raise _ctx(where, f"expected object, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.where = where

    def take(self, name, default=_MISSING):
        if name in self.raw:
            return self.raw.pop(name)
        if default is _MISSING:
            raise _ctx(self.where, f"missing required field '{name}'")
        return default

    def done(self):
        if self.raw:
            extra = ", ".join(sorted(self.raw))
            raise _ctx(self.where, f"unknown field(s): {extra}")


def _require(cond: bool, where: str, invariant: str):
    if not cond:
        raise _ctx(where, f"invariant violated: {invariant}")


@dataclass(frozen=True)
class MoESpec:
    num_experts: int
    top_k: int
    expert_intermediate_dim: int
    router_policy: str = "random"
    user_table: Optional[tuple[float, ...]] = None

    def check(self, where: str):
        _require(self.num_experts >= 1, where, "num_experts >= 1")
        _require(1 <= self.top_k <= self.num_experts, where, "1 <= top_k <= num_experts")
        _require(self.expert_intermediate_dim >= 1, where, "expert_intermediate_dim >= 1")
        _require(self.router_policy in EXPERT_ROUTER_POLICIES, where,
                 f"router_policy in {EXPERT_ROUTER_POLICIES}")
        if self.router_policy == "user_table":
            _require(self.user_table is not None, where, "user_table present for user_table policy")
            _require(abs(sum(self.user_table) - 1.0) <= 1e-9, where,
                     "user_table distribution sums to 1 (+-1e-9)")
            _require(len(self.user_table) == self.num_experts, where,
                     "user_table length equals num_experts")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    intermediate_dim: int
    dtype_bytes: int
    moe: Optional[MoESpec] = None
    weight_bytes: int = 0  # 0 means "derive from dimensions"
    vocab_size: int = DEFAULT_VOCAB_SIZE

    def check(self, where: str):
        for f in ("num_layers", "hidden_dim", "num_heads", "num_kv_heads",
                  "head_dim", "intermediate_dim", "vocab_size"):
            _require(getattr(self, f) >= 1, where, f"{f} >= 1")
        _require(self.num_kv_heads <= self.num_heads, where, "num_kv_heads <= num_heads")
        _require(self.head_dim * self.num_heads == self.hidden_dim, where,
                 "head_dim * num_heads == hidden_dim")
        _require(self.dtype_bytes in (1, 2, 4), where, "dtype_bytes in {1,2,4}")
        if self.moe is not None:
            self.moe.check(where + ".moe")

    def derived_weight_bytes(self) -> int:
        """Dense-transformer (or MoE) footprint from dimensions.

        embed + lm_head: 2 * vocab * hidden
        per layer: qkv = hidden*(hidden + 2*kv_heads*head_dim), out = hidden^2,
        ffn = 2*hidden*intermediate (dense) or router + experts (MoE).
        """
        h = self.hidden_dim
        per_layer = h * (h + 2 * self.num_kv_heads * self.head_dim) + h * h
        if self.moe is None:
            per_layer += 2 * h * self.intermediate_dim
        else:
            per_layer += h * self.moe.num_experts
            per_layer += self.moe.num_experts * 2 * h * self.moe.expert_intermediate_dim
        params = 2 * self.vocab_size * h + self.num_layers * per_layer
        return params * self.dtype_bytes

    @property
    def total_weight_bytes(self) -> int:
        return self.weight_bytes if self.weight_bytes > 0 else self.derived_weight_bytes()


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    kind: str
    mem_capacity: int
    mem_bandwidth: float  # bytes/s; per-channel for pim_stack devices
    idle_w: float
    standby_w: float
    active_w: float
    profile_ref: str
    pim_channels: Optional[int] = None

    def check(self, where: str):
        _require(self.kind in DEVICE_KINDS, where, f"kind in {DEVICE_KINDS}")
        _require(self.mem_capacity > 0, where, "mem_capacity > 0")
        _require(self.mem_bandwidth > 0, where, "mem_bandwidth > 0")
        _require(self.idle_w <= self.standby_w <= self.active_w, where,
                 "idle_w <= standby_w <= active_w")
        if self.kind == "pim_stack":
            _require(self.pim_channels is not None and self.pim_channels >= 1, where,
                     "pim_stack device declares pim_channels >= 1")

    @property
    def effective_bandwidth(self) -> float:
        """Aggregate bandwidth: channels x per-channel for PIM stacks."""
        if self.kind == "pim_stack" and self.pim_channels:
            return self.mem_bandwidth * self.pim_channels
        return self.mem_bandwidth


@dataclass(frozen=True)
class LinkSpec:
    id: str
    endpoints: tuple[str, str]
    bandwidth: float
    latency: float
    energy_per_byte: float = 0.0

    def check(self, where: str):
        _require(self.bandwidth > 0, where, "bandwidth > 0")
        _require(self.latency >= 0, where, "latency >= 0")
        _require(self.endpoints[0] != self.endpoints[1], where, "endpoints distinct")
        _require(self.energy_per_byte >= 0, where, "energy_per_byte >= 0")


@dataclass(frozen=True)
class MemoryTierSpec:
    tier: str
    capacity: int
    bandwidth: float
    scope: str
    block_size_tokens: int
    energy_per_byte: float = 0.0

    def check(self, where: str):
        _require(self.tier in TIER_NAMES, where, f"tier in {TIER_NAMES}")
        _require(self.scope in TIER_SCOPES, where, f"scope in {TIER_SCOPES}")
        _require(self.capacity > 0, where, "capacity > 0")
        _require(self.bandwidth > 0, where, "bandwidth > 0")
        _require(self.block_size_tokens >= 1, where, "block_size_tokens >= 1")
        if self.tier == "device":
            _require(self.scope == "per_device", where, "device tier has scope per_device")
        if self.tier == "cxl_pool":
            _require(self.scope == "global", where, "cxl_pool has scope global")


@dataclass(frozen=True)
class OffloadRule:
    op_class: str
    target: str  # device id or tier name
    condition: Optional[dict] = None  # e.g. {"min_batch": 256}

    def check(self, where: str):
        _require(self.op_class in OFFLOAD_OP_CLASSES, where,
                 f"op_class in {OFFLOAD_OP_CLASSES}")


@dataclass(frozen=True)
class MSGSpec:
    id: str
    model: str
    role: str
    device_pool: tuple[str, ...]
    tp_degree: int = 1
    pp_degree: int = 1
    dp_rank: int = 0
    ep_degree: int = 1
    offload_rules: tuple[OffloadRule, ...] = ()
    pd_peers: tuple[str, ...] = ()
    max_batch: int = 64
    sbi_enabled: bool = False
    sbi_threshold: int = 256

    def check(self, where: str):
        _require(self.role in MSG_ROLES, where, f"role in {MSG_ROLES}")
        _require(len(self.device_pool) >= 1, where, "device_pool nonempty")
        _require(self.tp_degree >= 1 and self.pp_degree >= 1 and self.ep_degree >= 1,
                 where, "parallel degrees >= 1")
        _require(len(self.device_pool) % (self.tp_degree * self.pp_degree) == 0, where,
                 "tp_degree * pp_degree divides device_pool size")
        _require(self.max_batch >= 1, where, "max_batch >= 1")
        if self.role == "prefill":
            _require(len(self.pd_peers) >= 1, where, "prefill role requires nonempty pd_peers")
        for i, r in enumerate(self.offload_rules):
            r.check(f"{where}.offload_rules[{i}]")


@dataclass(frozen=True)
class NodeSpec:
    id: str
    devices: tuple[DeviceSpec, ...]
    cpu_w: float = 0.0
    nic_w: float = 0.0
    storage_w: float = 0.0
    other_w: float = 0.0


@dataclass(frozen=True)
class ClusterSpec:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    tiers: tuple[MemoryTierSpec, ...]
    msgs: tuple[MSGSpec, ...]
    router_policy: str = "round_robin"

    def device_map(self) -> dict[str, DeviceSpec]:
        out = {}
        for node in self.nodes:
            for d in node.devices:
                out[d.id] = d
        return out

    def node_of_device(self, device_id: str) -> str:
        for node in self.nodes:
            for d in node.devices:
                if d.id == device_id:
                    return node.id
        raise KeyError(device_id)

    def tier(self, name: str) -> Optional[MemoryTierSpec]:
        for t in self.tiers:
            if t.tier == name:
                return t
        return None

    def check(self):
        devices = []
        for node in self.nodes:
            for d in node.devices:
                d.check(f"node {node.id} device {d.id}")
                devices.append(d.id)
        if not devices:
            raise ConfigError("cluster: no devices")
        if len(set(devices)) != len(devices):
            raise ConfigError("cluster: duplicate device ids")
        dev_set = set(devices)
        node_set = {n.id for n in self.nodes}
        for l in self.links:
            l.check(f"link {l.id}")
            for ep in l.endpoints:
                if ep not in dev_set and ep not in node_set and ep not in TIER_NAMES:
                    raise ConfigError(f"link {l.id}: dangling reference '{ep}'")
        seen_tiers = set()
        for t in self.tiers:
            t.check(f"tier {t.tier}")
            if t.tier in seen_tiers:
                raise ConfigError(f"tier {t.tier}: duplicated")
            seen_tiers.add(t.tier)
        msg_ids = set()
        for m in self.msgs:
            m.check(f"msg {m.id}")
            if m.id in msg_ids:
                raise ConfigError(f"msg {m.id}: duplicated")
            msg_ids.add(m.id)
            for dev in m.device_pool:
                if dev not in dev_set:
                    raise ConfigError(f"msg {m.id}: dangling reference '{dev}'")
            for rule in m.offload_rules:
                if rule.target not in dev_set and rule.target not in TIER_NAMES:
                    raise ConfigError(
                        f"msg {m.id}: offload target '{rule.target}' not a device or tier")
        for m in self.msgs:
            for peer in m.pd_peers:
                if peer not in msg_ids:
                    raise ConfigError(f"msg {m.id}: dangling pd_peer '{peer}'")
        if self.router_policy not in ROUTER_POLICIES:
            raise ConfigError(f"cluster: router_policy must be one of {ROUTER_POLICIES}")


# ---------------------------------------------------------------------------
# Workload / trace source
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrefixPoolSpec:
    num_groups: int
    share_prob: float
    prefix_len: int

    def check(self, where: str):
        _require(self.num_groups >= 1, where, "num_groups >= 1")
        _require(0.0 <= self.share_prob <= 1.0, where, "0 <= share_prob <= 1")
        _require(self.prefix_len >= 1, where, "prefix_len >= 1")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str  # poisson | pulses | burst_idle | fixed
    seed: int = 0
    rate: float = 0.0
    n: int = 0
    k: int = 0
    pulses: int = 0
    interval: float = 0.0
    burst_rate: float = 0.0
    idle_rate: float = 0.0
    period: float = 0.0
    duty: float = 0.5
    input_len: int = 128
    output_len: int = 128
    length_dist: Optional[dict] = None  # {"input": [[len, cdf], ...], "output": [...]}
    prefix_pool: Optional[PrefixPoolSpec] = None


@dataclass(frozen=True)
class TraceSource:
    """Either a path to a JSONL trace file or generator parameters."""
    path: Optional[str] = None
    generator: Optional[GeneratorSpec] = None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _parse_moe(raw, where) -> MoESpec:
    f = _Fields(raw, where)
    spec = MoESpec(
        num_experts=int(f.take("num_experts")),
        top_k=int(f.take("top_k")),
        expert_intermediate_dim=int(f.take("expert_intermediate_dim")),
        router_policy=f.take("router_policy", "random"),
        user_table=tuple(f.take("user_table")) if "user_table" in f.raw else None,
    )
    f.done()
    spec.check(where)
    return spec


def _parse_model(raw, where) -> ModelSpec:
    f = _Fields(raw, where)
    name = f.take("name")
    moe_raw = f.take("moe", None)
    spec = ModelSpec(
        name=name,
        num_layers=int(f.take("num_layers")),
        hidden_dim=int(f.take("hidden_dim")),
        num_heads=int(f.take("num_heads")),
        num_kv_heads=int(f.take("num_kv_heads")),
        head_dim=int(f.take("head_dim")),
        intermediate_dim=int(f.take("intermediate_dim")),
        dtype_bytes=int(f.take("dtype_bytes")),
        moe=_parse_moe(moe_raw, where + ".moe") if moe_raw is not None else None,
        weight_bytes=int(f.take("weight_bytes", 0)),
        vocab_size=int(f.take("vocab_size", DEFAULT_VOCAB_SIZE)),
    )
    f.done()
    spec.check(where)
    return spec


def _parse_device(raw, where) -> DeviceSpec:
    f = _Fields(raw, where)
    ch = f.take("pim_channels", None)
    spec = DeviceSpec(
        id=f.take("id"),
        kind=f.take("kind"),
        mem_capacity=int(f.take("mem_capacity")),
        mem_bandwidth=float(f.take("mem_bandwidth")),
        idle_w=float(f.take("idle_w")),
        standby_w=float(f.take("standby_w")),
        active_w=float(f.take("active_w")),
        profile_ref=f.take("profile_ref"),
        pim_channels=int(ch) if ch is not None else None,
    )
    f.done()
    spec.check(where)
    return spec


def _parse_link(raw, where) -> LinkSpec:
    f = _Fields(raw, where)
    eps = f.take("endpoints")
    if not (isinstance(eps, (list, tuple)) and len(eps) == 2):
        raise _ctx(where, "endpoints must be a pair")
    spec = LinkSpec(
        id=f.take("id"),
        endpoints=(eps[0], eps[1]),
        bandwidth=float(f.take("bandwidth")),
        latency=float(f.take("latency")),
        energy_per_byte=float(f.take("energy_per_byte", 0.0)),
    )
    f.done()
    spec.check(where)
    return spec


def _parse_tier(raw, where) -> MemoryTierSpec:
    f = _Fields(raw, where)
    spec = MemoryTierSpec(
        tier=f.take("tier"),
        capacity=int(f.take("capacity")),
        bandwidth=float(f.take("bandwidth")),
        scope=f.take("scope"),
        block_size_tokens=int(f.take("block_size_tokens")),
        energy_per_byte=float(f.take("energy_per_byte", 0.0)),
    )
    f.done()
    spec.check(where)
    return spec


def _parse_offload_rule(raw, where) -> OffloadRule:
    f = _Fields(raw, where)
    rule = OffloadRule(
        op_class=f.take("op_class"),
        target=f.take("target"),
        condition=f.take("condition", None),
    )
    f.done()
    rule.check(where)
    return rule


def _parse_msg(raw, where) -> MSGSpec:
    f = _Fields(raw, where)
    rules = tuple(
        _parse_offload_rule(r, f"{where}.offload_rules[{i}]")
        for i, r in enumerate(f.take("offload_rules", []))
    )
    spec = MSGSpec(
        id=f.take("id"),
        model=f.take("model"),
        role=f.take("role", "unified"),
        device_pool=tuple(f.take("device_pool")),
        tp_degree=int(f.take("tp_degree", 1)),
        pp_degree=int(f.take("pp_degree", 1)),
        dp_rank=int(f.take("dp_rank", 0)),
        ep_degree=int(f.take("ep_degree", 1)),
        offload_rules=rules,
        pd_peers=tuple(f.take("pd_peers", [])),
        max_batch=int(f.take("max_batch", 64)),
        sbi_enabled=bool(f.take("sbi_enabled", False)),
        sbi_threshold=int(f.take("sbi_threshold", 256)),
    )
    f.done()
    spec.check(where)
    return spec


def _parse_node(raw, where) -> NodeSpec:
    f = _Fields(raw, where)
    devices = tuple(
        _parse_device(d, f"{where}.devices[{i}]")
        for i, d in enumerate(f.take("devices"))
    )
    spec = NodeSpec(
        id=f.take("id"),
        devices=devices,
        cpu_w=float(f.take("cpu_w", 0.0)),
        nic_w=float(f.take("nic_w", 0.0)),
        storage_w=float(f.take("storage_w", 0.0)),
        other_w=float(f.take("other_w", 0.0)),
    )
    f.done()
    return spec


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: parse error: {e.msg}")


def parse_cluster(raw, where="cluster") -> ClusterSpec:
    f = _Fields(raw, where)
    nodes = tuple(
        _parse_node(n, f"{where}.nodes[{i}]") for i, n in enumerate(f.take("nodes"))
    )
    links = tuple(
        _parse_link(l, f"{where}.links[{i}]") for i, l in enumerate(f.take("links", []))
    )
    tiers = tuple(
        _parse_tier(t, f"{where}.tiers[{i}]") for i, t in enumerate(f.take("tiers", []))
    )
    msgs = tuple(
        _parse_msg(m, f"{where}.msgs[{i}]") for i, m in enumerate(f.take("msgs"))
    )
    spec = ClusterSpec(
        nodes=nodes, links=links, tiers=tiers, msgs=msgs,
        router_policy=f.take("router_policy", "round_robin"),
    )
    f.done()
    spec.check()
    return spec


def load_cluster_config(path: str) -> ClusterSpec:
    return parse_cluster(_load_json(path), where=path)


def _parse_generator(raw, where) -> GeneratorSpec:
    f = _Fields(raw, where)
    pp_raw = f.take("prefix_pool", None)
    prefix_pool = None
    if pp_raw is not None:
        pf = _Fields(pp_raw, where + ".prefix_pool")
        prefix_pool = PrefixPoolSpec(
            num_groups=int(pf.take("num_groups")),
            share_prob=float(pf.take("share_prob")),
            prefix_len=int(pf.take("prefix_len")),
        )
        pf.done()
        prefix_pool.check(where + ".prefix_pool")
    gen = GeneratorSpec(
        kind=f.take("kind"),
        seed=int(f.take("seed", 0)),
        rate=float(f.take("rate", 0.0)),
        n=int(f.take("n", 0)),
        k=int(f.take("k", 0)),
        pulses=int(f.take("pulses", 0)),
        interval=float(f.take("interval", 0.0)),
        burst_rate=float(f.take("burst_rate", 0.0)),
        idle_rate=float(f.take("idle_rate", 0.0)),
        period=float(f.take("period", 0.0)),
        duty=float(f.take("duty", 0.5)),
        input_len=int(f.take("input_len", 128)),
        output_len=int(f.take("output_len", 128)),
        length_dist=f.take("length_dist", None),
        prefix_pool=prefix_pool,
    )
    f.done()
    if gen.kind not in ("poisson", "pulses", "burst_idle", "fixed"):
        raise _ctx(where, f"unknown generator kind '{gen.kind}'")
    if gen.rate < 0:
        raise _ctx(where, "invariant violated: rate >= 0")
    return gen


def load_workload_config(path: str) -> tuple[list[ModelSpec], TraceSource]:
    raw = _load_json(path)
    f = _Fields(raw, path)
    models = [
        _parse_model(m, f"{path}.models[{i}]") for i, m in enumerate(f.take("models"))
    ]
    if not models:
        raise _ctx(path, "missing model parameters: empty models list")
    trace_raw = f.take("trace", None)
    gen_raw = f.take("generator", None)
    f.done()
    if trace_raw is None and gen_raw is None:
        raise _ctx(path, "either 'trace' or 'generator' must be present")
    if trace_raw is not None and gen_raw is not None:
        raise _ctx(path, "'trace' and 'generator' are mutually exclusive")
    if trace_raw is not None:
        tf = _Fields(trace_raw, path + ".trace")
        source = TraceSource(path=tf.take("path"))
        tf.done()
    else:
        source = TraceSource(generator=_parse_generator(gen_raw, path + ".generator"))
    return models, source


# ---------------------------------------------------------------------------
# Serialization (round-trip support)
# ---------------------------------------------------------------------------

def cluster_to_dict(c: ClusterSpec) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "devices": [
                    {k: v for k, v in {
                        "id": d.id, "kind": d.kind,
                        "mem_capacity": d.mem_capacity,
                        "mem_bandwidth": d.mem_bandwidth,
                        "idle_w": d.idle_w, "standby_w": d.standby_w,
                        "active_w": d.active_w, "profile_ref": d.profile_ref,
                        "pim_channels": d.pim_channels,
                    }.items() if not (k == "pim_channels" and v is None)}
                    for d in n.devices
                ],
                "cpu_w": n.cpu_w, "nic_w": n.nic_w,
                "storage_w": n.storage_w, "other_w": n.other_w,
            }
            for n in c.nodes
        ],
        "links": [
            {"id": l.id, "endpoints": list(l.endpoints), "bandwidth": l.bandwidth,
             "latency": l.latency, "energy_per_byte": l.energy_per_byte}
            for l in c.links
        ],
        "tiers": [
            {"tier": t.tier, "capacity": t.capacity, "bandwidth": t.bandwidth,
             "scope": t.scope, "block_size_tokens": t.block_size_tokens,
             "energy_per_byte": t.energy_per_byte}
            for t in c.tiers
        ],
        "msgs": [
            {
                "id": m.id, "model": m.model, "role": m.role,
                "device_pool": list(m.device_pool),
                "tp_degree": m.tp_degree, "pp_degree": m.pp_degree,
                "dp_rank": m.dp_rank, "ep_degree": m.ep_degree,
                "offload_rules": [
                    {k: v for k, v in {"op_class": r.op_class, "target": r.target,
                                       "condition": r.condition}.items()
                     if not (k == "condition" and v is None)}
                    for r in m.offload_rules
                ],
                "pd_peers": list(m.pd_peers),
                "max_batch": m.max_batch,
                "sbi_enabled": m.sbi_enabled,
                "sbi_threshold": m.sbi_threshold,
            }
            for m in c.msgs
        ],
        "router_policy": c.router_policy,
    }


# ---------------------------------------------------------------------------
# Cross-validation of cluster + models + profiles
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    ok: bool
    problems: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __str__(self):
        lines = ["OK" if self.ok else "FAIL"]
        lines += [f"error: {p}" for p in self.problems]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def _needed_op_classes(model: ModelSpec, msg: MSGSpec, device: DeviceSpec) -> list[str]:
    if device.kind == "pim_stack":
        return ["pim_attention"]
    ops = ["embed", "norm", "qkv_proj", "attention_prefill", "attention_decode",
           "out_proj", "lm_head"]
    if model.moe is not None:
        ops += ["router_gate", "expert_ffn"]
    else:
        ops += ["ffn_up", "ffn_down"]
    return ops


def validate(cluster: ClusterSpec, models: list[ModelSpec], profiles: dict) -> ValidationReport:
    """Check profile coverage and capacity red flags per MSG.

    `profiles` maps profile_ref -> ProfileTable (see servesim.profiles).
    """
    report = ValidationReport(ok=True)
    model_map = {m.name: m for m in models}
    dev_map = cluster.device_map()
    for msg in cluster.msgs:
        model = model_map.get(msg.model)
        if model is None:
            report.problems.append(f"msg {msg.id}: unknown model '{msg.model}'")
            continue
        pool = [dev_map[d] for d in msg.device_pool]
        # profile coverage
        for dev in pool:
            table = profiles.get((dev.profile_ref, model.name))
            if table is None:
                report.problems.append(
                    f"msg {msg.id}: no profile for (model={model.name}, "
                    f"profile_ref={dev.profile_ref})")
                continue
            for op in _needed_op_classes(model, msg, dev):
                if op not in table.op_classes():
                    report.problems.append(
                        f"msg {msg.id}: profile {dev.profile_ref}/{model.name} "
                        f"missing op '{op}' for device {dev.id}")
        # offload-rule targets need matching profiles
        for rule in msg.offload_rules:
            if rule.op_class == "attention" and rule.target in dev_map:
                tgt = dev_map[rule.target]
                table = profiles.get((tgt.profile_ref, model.name))
                if table is None or "pim_attention" not in table.op_classes():
                    report.problems.append(
                        f"msg {msg.id}: attention offload to {rule.target} but no "
                        f"(pim_attention, {tgt.profile_ref}) profile entry")
        # capacity red flag: weights vs pool memory under tp
        accel = [d for d in pool if d.kind != "pim_stack"]
        if accel:
            tp = max(1, msg.tp_degree)
            per_dev = model.total_weight_bytes / tp / max(1, msg.pp_degree)
            min_cap = min(d.mem_capacity for d in accel)
            if per_dev > min_cap:
                report.problems.append(
                    f"msg {msg.id}: weights/device {per_dev / 1e9:.1f} GB exceed "
                    f"capacity {min_cap / 1e9:.1f} GB")
    if report.problems:
        report.ok = False
    return report
