"""Execution-graph data types shared by the MSG builder and the system
simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .profiles import OperatorKey

COMPUTE = "Compute"
PIM_COMPUTE = "PIMCompute"
ALL_REDUCE = "AllReduce"
ALL_TO_ALL = "AllToAll"
P2P = "P2P"
MEM_LOAD = "MemLoad"
MEM_STORE = "MemStore"

COMPUTE_KINDS = (COMPUTE, PIM_COMPUTE)
COLLECTIVE_KINDS = (ALL_REDUCE, ALL_TO_ALL)
FLOW_KINDS = (P2P, MEM_LOAD, MEM_STORE)


@dataclass
class MappedOp:
    uid: int
    kind: str
    deps: tuple[int, ...] = ()
    layer: int = -1
    key: Optional[OperatorKey] = None
    device: Optional[str] = None          # compute kinds
    devices: tuple[str, ...] = ()          # collective kinds
    src: Optional[str] = None              # P2P
    dst: Optional[str] = None              # P2P
    tier: Optional[str] = None             # memory kinds (resource id)
    bytes: int = 0                         # comm/memory kinds
    latency: float = 0.0                   # compute kinds, from profile
    energy: Optional[float] = None         # profiled op energy, if any
    tag: str = ""                          # debugging / tests


@dataclass
class ExecutionGraph:
    msg_id: str
    ops: list[MappedOp] = field(default_factory=list)
    batch: object = None
    first_token_uid: Optional[int] = None  # marker: prefill compute sink

    def add(self, kind: str, deps=(), **kw) -> MappedOp:
        op = MappedOp(uid=len(self.ops), kind=kind, deps=tuple(deps), **kw)
        self.ops.append(op)
        return op

    def check_acyclic(self):
        """Deps must point to earlier uids (construction order is a
        topological order); every op reachable from a root by deps."""
        for op in self.ops:
            for d in op.deps:
                if d >= op.uid:
                    raise ValueError(f"graph {self.msg_id}: cycle or forward dep "
                                     f"at op {op.uid}")
        return self

    def topo_order(self) -> list[int]:
        return [op.uid for op in self.ops]
