"""Multi-tier KV memory model: paged allocation, LRU eviction with
demotion, and radix-tree prefix caching.

Determinism rule: every block touch advances a shared logical clock, so
last-use stamps are globally unique and LRU order is a total order.
Eviction candidates are resident nodes with no resident children and no
pins; the least recently used candidate goes first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import ModelSpec


def kv_bytes_per_token(model: ModelSpec) -> int:
    """2 (K and V) x layers x kv_heads x head_dim x dtype bytes."""
    return 2 * model.num_layers * model.num_kv_heads * model.head_dim * model.dtype_bytes


class CapacityError(RuntimeError):
    """Internal bug guard: a tier exceeded its capacity."""


class Clock:
    """Shared logical counter; one tick per block touch."""

    def __init__(self):
        self.t = 0

    def tick(self) -> int:
        self.t += 1
        return self.t


class TierState:
    def __init__(self, name: str, capacity: int, bandwidth: float,
                 energy_per_byte: float = 0.0):
        self.name = name
        self.capacity = capacity
        self.bandwidth = bandwidth
        self.energy_per_byte = energy_per_byte
        self.used = 0

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def reserve(self, nbytes: int):
        if nbytes > self.free:
            raise CapacityError(
                f"tier {self.name}: reserve {nbytes} exceeds free {self.free}")
        self.used += nbytes

    def release(self, nbytes: int):
        if nbytes > self.used:
            raise CapacityError(f"tier {self.name}: release {nbytes} > used {self.used}")
        self.used -= nbytes


class _Node:
    __slots__ = ("key", "parent", "children", "resident", "last_use", "pins",
                 "bytes", "depth")

    def __init__(self, key, parent, depth):
        self.key = key
        self.parent = parent
        self.children: dict = {}
        self.resident = False
        self.last_use = 0
        self.pins = 0
        self.bytes = 0
        self.depth = depth


class RadixPrefixCache:
    """Block-granular radix tree over token-id sequences, one tier.

    Keys include the model name so caches shared across MSGs never alias
    KV from different models.
    """

    def __init__(self, name: str, tier: TierState, block_tokens: int,
                 bytes_per_token_of: Callable[[str], int], clock: Clock):
        self.name = name
        self.tier = tier
        self.block_tokens = block_tokens
        self._bpt = bytes_per_token_of
        self.clock = clock
        self.root = _Node(key=None, parent=None, depth=0)
        self.resident_blocks = 0

    # -- internals ----------------------------------------------------------

    def _blocks(self, tokens) -> list[tuple]:
        n = len(tokens) // self.block_tokens
        return [tuple(tokens[i * self.block_tokens:(i + 1) * self.block_tokens])
                for i in range(n)]

    def _walk(self, model: str, tokens, touch: bool) -> list[_Node]:
        node = self.root
        out = []
        for blk in self._blocks(tokens):
            child = node.children.get((model, blk))
            if child is None or not child.resident:
                break
            if touch:
                child.last_use = self.clock.tick()
            out.append(child)
            node = child
        return out

    def _evictable(self, exclude: set) -> list[_Node]:
        out = []
        stack = list(self.root.children.values())
        while stack:
            n = stack.pop()
            stack.extend(n.children.values())
            if (n.resident and n.pins == 0 and id(n) not in exclude
                    and not any(c.resident for c in n.children.values())):
                out.append(n)
        out.sort(key=lambda n: n.last_use)
        return out

    def _evict_one(self, exclude: set,
                   demote: Optional[Callable[[_Node], None]] = None) -> int:
        cands = self._evictable(exclude)
        if not cands:
            return 0
        victim = cands[0]
        freed = victim.bytes
        victim.resident = False
        self.tier.release(freed)
        self.resident_blocks -= 1
        if demote is not None:
            demote(victim)
        return freed

    def _path_tokens(self, node: _Node) -> list[int]:
        parts = []
        while node.parent is not None:
            parts.append(node.key[1])
            node = node.parent
        out: list[int] = []
        for blk in reversed(parts):
            out.extend(blk)
        return out

    # -- public API ---------------------------------------------------------

    def lookup(self, model: str, tokens) -> int:
        """Longest resident block-aligned prefix, in tokens. Touches LRU."""
        return len(self._walk(model, tokens, touch=True)) * self.block_tokens

    def insert(self, model: str, tokens,
               demote: Optional[Callable[[list[int], str], None]] = None) -> int:
        """Extend the radix path; evict LRU blocks to make room.

        Returns the number of tokens now resident along this path.
        Idempotent for already-present paths. Stops early when space
        cannot be made.
        """
        bpb = self._bpt(model) * self.block_tokens
        node = self.root
        exclude: set = set()
        done = 0
        demote_cb = None
        if demote is not None:
            demote_cb = lambda victim: demote(self._path_tokens(victim), victim.key[0])
        for blk in self._blocks(tokens):
            child = node.children.get((model, blk))
            if child is None:
                child = _Node(key=(model, blk), parent=node, depth=node.depth + 1)
                node.children[(model, blk)] = child
            if not child.resident:
                while self.tier.free < bpb:
                    if self._evict_one(exclude, demote_cb) == 0:
                        return done
                child.resident = True
                child.bytes = bpb
                self.tier.reserve(bpb)
                self.resident_blocks += 1
            child.last_use = self.clock.tick()
            exclude.add(id(child))
            node = child
            done += self.block_tokens
        return done

    def pin(self, model: str, tokens):
        for n in self._walk(model, tokens, touch=False):
            n.pins += 1

    def unpin(self, model: str, tokens):
        for n in self._walk(model, tokens, touch=False):
            n.pins = max(0, n.pins - 1)

    def evict_bytes(self, nbytes: int,
                    demote: Optional[Callable[[list[int], str], None]] = None,
                    ) -> tuple[int, int]:
        """Evict LRU blocks until `nbytes` freed; (freed, blocks evicted)."""
        demote_cb = None
        if demote is not None:
            demote_cb = lambda victim: demote(self._path_tokens(victim), victim.key[0])
        freed = 0
        count = 0
        while freed < nbytes:
            got = self._evict_one(set(), demote_cb)
            if got == 0:
                break
            freed += got
            count += 1
        return freed, count

    def evictable_bytes(self) -> int:
        total = 0
        stack = list(self.root.children.values())
        while stack:
            n = stack.pop()
            stack.extend(n.children.values())
            if n.resident and n.pins == 0:
                total += n.bytes
        return total

    def node_count(self) -> int:
        count = 0
        stack = list(self.root.children.values())
        while stack:
            n = stack.pop()
            stack.extend(n.children.values())
            count += 1
        return count


# ---------------------------------------------------------------------------
# Per-MSG memory front end
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransferDescriptor:
    tier: str
    bytes: int
    tokens: int


@dataclass(frozen=True)
class PrefixHit:
    hit_tokens: int
    device_tokens: int
    loads: tuple[TransferDescriptor, ...] = ()


@dataclass
class AdmitDecision:
    approved: bool
    new_bytes: int = 0
    demoted_blocks: int = 0
    demoted_bytes: int = 0


@dataclass
class _Alloc:
    tokens: int = 0
    bytes: int = 0


class MsgMemory:
    """Device-tier KV accounting for one MSG plus its prefix-cache chain.

    The device tier is pooled across the MSG's accelerators (capacity =
    sum of device memory minus resident weights); blocks are accounted
    unsharded. `shared_caches` is the lookup chain beyond the device
    cache, in tier order (host, then cxl_pool/storage).
    """

    def __init__(self, model: ModelSpec, device_tier: TierState,
                 device_cache: RadixPrefixCache,
                 shared_caches: list[RadixPrefixCache], block_tokens: int):
        self.model = model
        self.bpt = kv_bytes_per_token(model)
        self.device_tier = device_tier
        self.device_cache = device_cache
        self.shared_caches = shared_caches
        self.block_tokens = block_tokens
        self.allocs: dict[str, _Alloc] = {}
        self._demoted_bytes = 0
        self.log: Optional[list] = None  # optional op stream for test oracles

    def _block_bytes(self, tokens: int) -> int:
        nblocks = -(-tokens // self.block_tokens)
        return nblocks * self.block_tokens * self.bpt

    def request_bytes(self, req_id: str) -> int:
        a = self.allocs.get(req_id)
        return a.bytes if a else 0

    def growth_bytes(self, req_id: str, new_tokens: int) -> int:
        cur = self.allocs.get(req_id, _Alloc())
        return self._block_bytes(cur.tokens + new_tokens) - cur.bytes

    def admit(self, deltas: list[tuple[str, int]]) -> AdmitDecision:
        """Approve (evicting LRU prefix blocks, demoting when possible) or
        reject the additional KV footprint of `deltas` = [(req_id, new
        tokens)]. Approval commits the allocation.
        """
        needed = sum(self.growth_bytes(rid, toks) for rid, toks in deltas)
        if self.log is not None:
            self.log.append(("admit", tuple(deltas)))
        if (needed > self.device_tier.free
                and needed > self.device_tier.free
                + self.device_cache.evictable_bytes()):
            return AdmitDecision(approved=False, new_bytes=needed)
        demoted_blocks = 0
        self._demoted_bytes = 0
        if needed > self.device_tier.free:
            goal = needed - self.device_tier.free
            _, demoted_blocks = self.device_cache.evict_bytes(
                goal, demote=self._demote)
            if self.device_tier.free < needed:
                raise CapacityError("eviction accounting mismatch")
        demoted_bytes = self._demoted_bytes
        for rid, toks in deltas:
            alloc = self.allocs.setdefault(rid, _Alloc())
            grow = self.growth_bytes(rid, toks)
            alloc.tokens += toks
            alloc.bytes += grow
            self.device_tier.reserve(grow)
        return AdmitDecision(approved=True, new_bytes=needed,
                             demoted_blocks=demoted_blocks,
                             demoted_bytes=demoted_bytes)

    def free_request(self, req_id: str):
        if self.log is not None:
            self.log.append(("free", req_id))
        a = self.allocs.pop(req_id, None)
        if a is not None:
            self.device_tier.release(a.bytes)

    def _demote(self, tokens: list[int], model_name: str):
        """Device-cache eviction hook: demote into the next tier if it has
        free space, else drop (no cascading evictions)."""
        if not self.shared_caches:
            return
        target = self.shared_caches[0]
        bpb = self.bpt * target.block_tokens
        nblocks = len(tokens) // target.block_tokens
        if nblocks >= 1 and target.tier.free >= bpb:
            before = target.tier.used
            target.insert(model_name, tokens[:nblocks * target.block_tokens])
            self._demoted_bytes += target.tier.used - before

    def prefix_lookup(self, tokens) -> PrefixHit:
        """Longest cached block-aligned prefix across the tier chain."""
        d = self.device_cache.lookup(self.model.name, tokens)
        best = d
        best_cache = None
        for cache in self.shared_caches:
            h = cache.lookup(self.model.name, tokens)
            if h > best:
                best = h
                best_cache = cache
        loads: list[TransferDescriptor] = []
        if best_cache is not None and best > d:
            bt = best_cache.block_tokens
            first = d // bt
            last = -(-best // bt)
            for i in range(first, last):
                toks = min(bt, best - i * bt)
                loads.append(TransferDescriptor(
                    tier=best_cache.name, bytes=bt * self.bpt, tokens=toks))
        hit = PrefixHit(hit_tokens=best, device_tokens=min(d, best),
                        loads=tuple(loads))
        if self.log is not None:
            self.log.append(("lookup", tuple(tokens), hit.hit_tokens,
                             hit.device_tokens))
        return hit

    def insert_prefix(self, tokens, write_through: bool = True):
        """Insert into the device cache (and, write-through, the shared
        tiers) after a prefill completes. Cache blocks live in the same
        device tier as request KV; insertion may evict older prefixes."""
        if self.log is not None:
            self.log.append(("insert", tuple(tokens)))
        self.device_cache.insert(self.model.name, tokens, demote=self._demote)
        if write_through:
            for cache in self.shared_caches:
                cache.insert(self.model.name, tokens)

    def pin_prefix(self, tokens):
        if self.log is not None:
            self.log.append(("pin", tuple(tokens)))
        self.device_cache.pin(self.model.name, tokens)

    def unpin_prefix(self, tokens):
        if self.log is not None:
            self.log.append(("unpin", tuple(tokens)))
        self.device_cache.unpin(self.model.name, tokens)


def transfer_plan(hit: PrefixHit, tier_bandwidths: dict[str, float]) -> list[dict]:
    """MemLoad descriptors for non-device-resident hit blocks."""
    plan = []
    for ld in hit.loads:
        plan.append({"tier": ld.tier, "bytes": ld.bytes,
                     "bandwidth": tier_bandwidths.get(ld.tier)})
    return plan
