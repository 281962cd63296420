"""Operator-level latency/energy tables per (model, device kind).

Tables hold records on a sampled (batch, seq_or_ctx) grid per operator
class. Off-grid queries interpolate bilinearly inside the bounding cell
and extrapolate linearly beyond the grid boundary. A synthetic roofline
generator stands in for measured hardware profiles.

Lookup key conventions (documented contract with the operation mapper):
  - token-parallel ops (embed, norm, qkv_proj, out_proj, ffn_up, ffn_down,
    router_gate, expert_ffn, lm_head): batch = total tokens, seq_or_ctx = 1
  - attention_prefill: batch = #sequences, seq_or_ctx = sequence length
  - attention_decode / pim_attention: batch = #sequences, seq_or_ctx =
    context length
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from typing import Optional

from .config import DeviceSpec, ModelSpec

OP_CLASSES = (
    "qkv_proj", "attention_prefill", "attention_decode", "out_proj",
    "ffn_up", "ffn_down", "expert_ffn", "router_gate", "embed",
    "lm_head", "norm", "pim_attention",
)

TOKEN_OPS = ("qkv_proj", "out_proj", "ffn_up", "ffn_down", "expert_ffn",
             "router_gate", "embed", "lm_head", "norm")
ATTN_OPS = ("attention_prefill", "attention_decode", "pim_attention")


class ProfileError(KeyError):
    """Missing profile entry (op class or table)."""


@dataclass(frozen=True)
class OperatorKey:
    op_class: str
    batch: int
    seq_or_ctx: int

    def check(self):
        if self.op_class not in OP_CLASSES:
            raise ProfileError(f"unknown op_class '{self.op_class}'")
        if self.batch < 1 or self.seq_or_ctx < 1:
            raise ValueError("batch and seq_or_ctx must be >= 1")


@dataclass(frozen=True)
class OperatorRecord:
    latency: float  # seconds
    energy: Optional[float] = None  # joules; None -> derive from active_w x latency


class _OpGrid:
    """Rectangular grid of records for one op class."""

    def __init__(self, op_class: str):
        self.op_class = op_class
        self.points: dict[tuple[int, int], OperatorRecord] = {}
        self._batches: list[int] = []
        self._seqs: list[int] = []

    def add(self, batch: int, seq: int, rec: OperatorRecord):
        self.points[(batch, seq)] = rec

    def finalize(self):
        self._batches = sorted({b for b, _ in self.points})
        self._seqs = sorted({s for _, s in self.points})
        for b in self._batches:
            for s in self._seqs:
                if (b, s) not in self.points:
                    raise ValueError(
                        f"profile grid for {self.op_class} not rectangular: "
                        f"missing (batch={b}, seq={s})")

    @staticmethod
    def _segment(axis: list[int], x: int) -> tuple[int, int, float]:
        """Indices of the two grid points and the interpolation weight.

        Weight may fall outside [0, 1] beyond the boundary (linear
        extrapolation). Degenerate single-point axes clamp.
        """
        if len(axis) == 1:
            return 0, 0, 0.0
        i = bisect.bisect_left(axis, x)
        if i <= 0:
            lo, hi = 0, 1
        elif i >= len(axis):
            lo, hi = len(axis) - 2, len(axis) - 1
        else:
            lo, hi = i - 1, i
        w = (x - axis[lo]) / (axis[hi] - axis[lo])
        return lo, hi, w

    def value(self, batch: int, seq: int) -> OperatorRecord:
        key = (batch, seq)
        if key in self.points:
            return self.points[key]
        bi0, bi1, wb = self._segment(self._batches, batch)
        si0, si1, ws = self._segment(self._seqs, seq)
        b0, b1 = self._batches[bi0], self._batches[bi1]
        s0, s1 = self._seqs[si0], self._seqs[si1]

        def mix(attr):
            v00 = getattr(self.points[(b0, s0)], attr)
            v01 = getattr(self.points[(b0, s1)], attr)
            v10 = getattr(self.points[(b1, s0)], attr)
            v11 = getattr(self.points[(b1, s1)], attr)
            if any(v is None for v in (v00, v01, v10, v11)):
                return None
            lo = v00 + (v01 - v00) * ws
            hi = v10 + (v11 - v10) * ws
            return lo + (hi - lo) * wb

        lat = max(mix("latency"), 1e-12)
        return OperatorRecord(latency=lat, energy=mix("energy"))


class ProfileTable:
    def __init__(self, device_kind: str, model: str):
        self.device_kind = device_kind
        self.model = model
        self._grids: dict[str, _OpGrid] = {}

    def add(self, op_class: str, batch: int, seq: int, rec: OperatorRecord):
        if rec.latency <= 0:
            raise ValueError(f"{op_class}: latency must be > 0")
        self._grids.setdefault(op_class, _OpGrid(op_class)).add(batch, seq, rec)

    def finalize(self):
        for g in self._grids.values():
            g.finalize()
        return self

    def op_classes(self) -> list[str]:
        return sorted(self._grids)

    def lookup(self, key: OperatorKey) -> OperatorRecord:
        key.check()
        grid = self._grids.get(key.op_class)
        if grid is None:
            raise ProfileError(
                f"missing profile: op '{key.op_class}' not in table "
                f"({self.device_kind}, {self.model})")
        return grid.value(key.batch, key.seq_or_ctx)


def lookup(table: ProfileTable, key: OperatorKey) -> OperatorRecord:
    return table.lookup(key)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def save_profile(table: ProfileTable, path: str):
    records = []
    for op, grid in sorted(table._grids.items()):
        for (b, s), rec in sorted(grid.points.items()):
            row = {"op_class": op, "batch": b, "seq": s,
                   "latency_us": rec.latency * 1e6}
            if rec.energy is not None:
                row["energy_mj"] = rec.energy * 1e3
            records.append(row)
    with open(path, "w") as fh:
        json.dump({"device_kind": table.device_kind, "model": table.model,
                   "records": records}, fh, indent=1)


def load_profile(path: str) -> ProfileTable:
    with open(path) as fh:
        raw = json.load(fh)
    table = ProfileTable(raw["device_kind"], raw["model"])
    for row in raw["records"]:
        energy = row.get("energy_mj")
        table.add(row["op_class"], int(row["batch"]), int(row["seq"]),
                  OperatorRecord(latency=row["latency_us"] * 1e-6,
                                 energy=energy * 1e-3 if energy is not None else None))
    return table.finalize()


# ---------------------------------------------------------------------------
# Roofline synthesis
# ---------------------------------------------------------------------------

def op_cost(op_class: str, model: ModelSpec, batch: int, seq: int) -> tuple[float, float]:
    """(flops, bytes moved) for one per-layer operator invocation.

    Token-parallel ops interpret `batch` as total tokens; attention ops
    interpret it as #sequences with `seq` the sequence/context length.
    """
    h = model.hidden_dim
    kv = model.num_kv_heads * model.head_dim
    dt = model.dtype_bytes
    inter = model.intermediate_dim
    t = batch  # tokens for token-parallel ops
    if op_class == "qkv_proj":
        w = h * (h + 2 * kv)
        return 2.0 * t * w, (w + t * h) * dt
    if op_class == "out_proj":
        return 2.0 * t * h * h, (h * h + t * h) * dt
    if op_class == "ffn_up" or op_class == "ffn_down":
        return 2.0 * t * h * inter, (h * inter + t * (h + inter)) * dt
    if op_class == "expert_ffn":
        ei = model.moe.expert_intermediate_dim if model.moe else inter
        return 4.0 * t * h * ei, (2 * h * ei + t * (2 * h + ei)) * dt
    if op_class == "router_gate":
        e = model.moe.num_experts if model.moe else 1
        return 2.0 * t * h * e, (h * e + t * h) * dt
    if op_class == "norm":
        return 4.0 * t * h, 2.0 * t * h * dt
    if op_class == "embed":
        return 0.0, float(t * h * dt)
    if op_class == "lm_head":
        v = model.vocab_size
        return 2.0 * t * h * v, (h * v + t * v) * dt
    if op_class == "attention_prefill":
        # causal attention over b sequences of length s
        b, s = batch, seq
        flops = 4.0 * b * s * s * h / 2  # QK^T + AV, causal half
        bytes_ = b * s * (2 * kv + 2 * h) * dt
        return flops, bytes_
    if op_class in ("attention_decode", "pim_attention"):
        b, ctx = batch, seq
        flops = 4.0 * b * ctx * h
        bytes_ = b * ctx * 2 * kv * dt  # KV read dominates
        return flops, bytes_
    raise ProfileError(f"unknown op_class '{op_class}'")


def _pow2_range(lo: int, hi: int) -> list[int]:
    out = []
    v = lo
    while v <= hi:
        out.append(v)
        v *= 2
    return out


def synth_profile(device: DeviceSpec, model: ModelSpec, peak_flops: float,
                  max_batch: int = 1024, max_tokens: int = 131072) -> ProfileTable:
    """Roofline table: latency = max(flops/peak, bytes/bandwidth).

    PIM stacks use aggregate bandwidth (channels x per-channel). Tables
    are generated for the unsharded (tp=1) layer; the operation mapper
    scales shardable ops by 1/tp.
    """
    if peak_flops <= 0:
        raise ValueError("peak_flops must be > 0")
    bw = device.effective_bandwidth
    table = ProfileTable(device.profile_ref, model.name)

    def lat(op, b, s):
        flops, bytes_ = op_cost(op, model, b, s)
        return max(flops / peak_flops, bytes_ / bw, 1e-9)

    if device.kind == "pim_stack":
        ops = ["pim_attention"]
    else:
        ops = [o for o in OP_CLASSES if o != "pim_attention"]
        if model.moe is None:
            ops = [o for o in ops if o not in ("expert_ffn", "router_gate")]
        else:
            ops = [o for o in ops if o not in ("ffn_up", "ffn_down")]
    for op in ops:
        if op in TOKEN_OPS:
            for tkns in _pow2_range(1, max_tokens):
                table.add(op, tkns, 1, OperatorRecord(latency=lat(op, tkns, 1)))
        else:
            for b in _pow2_range(1, max_batch):
                for s in _pow2_range(16, 8192):
                    table.add(op, b, s, OperatorRecord(latency=lat(op, b, s)))
    return table.finalize()
