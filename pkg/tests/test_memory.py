import random

import pytest

from servesim.memory import (CapacityError, Clock, MsgMemory,
                             RadixPrefixCache, TierState, kv_bytes_per_token)
from conftest import llama_like, tiny_model

BPT = 256  # tiny model: 2 * 1 * 4heads * 16dim * 2B per layer... computed below


def test_kv_bytes_per_token_oracle():
    # 2 * layers * kv_heads * head_dim * dtype_bytes
    assert kv_bytes_per_token(llama_like()) == 131072
    m = tiny_model()
    assert kv_bytes_per_token(m) == 2 * 1 * 4 * 16 * 2


def _cache(capacity_blocks=4, block=4, bpt=8):
    tier = TierState("t", capacity_blocks * block * bpt, 1e9)
    return RadixPrefixCache("t", tier, block, lambda m: bpt, Clock()), tier


def test_lookup_block_granularity():
    c, _ = _cache()
    c.insert("m", list(range(8)))
    assert c.lookup("m", list(range(8))) == 8
    assert c.lookup("m", list(range(6))) == 4   # partial block no hit
    assert c.lookup("m", [9, 9, 9, 9]) == 0


def test_insert_idempotent():
    c, tier = _cache()
    c.insert("m", list(range(8)))
    used = tier.used
    c.insert("m", list(range(8)))
    assert tier.used == used
    assert c.node_count() == 2


def test_lru_eviction_order():
    c, _ = _cache(capacity_blocks=2)
    c.insert("m", [0, 1, 2, 3])       # block A
    c.insert("m", [9, 9, 9, 9])       # block B (cache now full)
    c.lookup("m", [0, 1, 2, 3])       # touch A; B is now LRU
    c.insert("m", [7, 7, 7, 7])       # needs one eviction
    assert c.lookup("m", [0, 1, 2, 3]) == 4
    assert c.lookup("m", [9, 9, 9, 9]) == 0   # B evicted
    assert c.lookup("m", [7, 7, 7, 7]) == 4


def test_leaf_first_eviction():
    """A resident node with resident children is not evictable."""
    c, _ = _cache(capacity_blocks=2)
    c.insert("m", list(range(8)))     # root block + child block
    c.insert("m", [5, 5, 5, 5])       # forces one eviction: must be the leaf
    assert c.lookup("m", list(range(4))) == 4
    assert c.lookup("m", list(range(8))) == 4  # deep block gone


def test_pin_blocks_eviction():
    c, _ = _cache(capacity_blocks=2)
    c.insert("m", [0, 1, 2, 3])
    c.insert("m", [9, 9, 9, 9])
    c.pin("m", [0, 1, 2, 3])
    c.pin("m", [9, 9, 9, 9])
    done = c.insert("m", [7, 7, 7, 7])
    assert done == 0                   # nothing evictable, insert stops
    c.unpin("m", [9, 9, 9, 9])
    assert c.insert("m", [7, 7, 7, 7]) == 4


def test_model_namespacing():
    c, _ = _cache()
    c.insert("a", [0, 1, 2, 3])
    assert c.lookup("b", [0, 1, 2, 3]) == 0


def test_tier_guards():
    t = TierState("t", 100, 1e9)
    with pytest.raises(CapacityError):
        t.reserve(101)
    t.reserve(60)
    with pytest.raises(CapacityError):
        t.release(61)


def _msg_mem(device_tokens=64, host_tokens=0, block=4):
    m = tiny_model()  # bpt = 256
    bpt = kv_bytes_per_token(m)
    dev = TierState("device", device_tokens * bpt, 1e12)
    clock = Clock()
    dcache = RadixPrefixCache("device", dev, block, lambda _: bpt, clock)
    shared = []
    if host_tokens:
        ht = TierState("tier:host:n0", host_tokens * bpt, 5e10)
        shared.append(RadixPrefixCache("tier:host:n0", ht, 8,
                                       lambda _: bpt, clock))
    return MsgMemory(m, dev, dcache, shared, block), bpt


def test_admit_rounds_to_blocks():
    mem, bpt = _msg_mem()
    d = mem.admit([("r0", 5)])
    assert d.approved and mem.request_bytes("r0") == 8 * bpt  # 2 blocks of 4
    # growth within the allocated block costs nothing new
    assert mem.growth_bytes("r0", 3) == 0
    d = mem.admit([("r0", 3)])
    assert d.approved and mem.request_bytes("r0") == 8 * bpt


def test_admit_reject_when_oversubscribed():
    mem, _ = _msg_mem(device_tokens=16)
    assert mem.admit([("r0", 12)]).approved
    assert not mem.admit([("r1", 8)]).approved      # 12 + 8 > 16
    mem.free_request("r0")
    assert mem.admit([("r1", 8)]).approved


def test_admit_evicts_cached_prefix():
    mem, bpt = _msg_mem(device_tokens=16)
    mem.insert_prefix(list(range(8)))
    assert mem.device_tier.used == 8 * bpt
    d = mem.admit([("r0", 16)])
    assert d.approved and d.demoted_bytes == 0      # no next tier: dropped
    assert mem.device_tier.used == 16 * bpt
    assert mem.prefix_lookup(list(range(8))).hit_tokens == 0


def test_demote_into_host_then_hit_via_loads():
    mem, bpt = _msg_mem(device_tokens=16, host_tokens=64)
    mem.insert_prefix(list(range(16)))   # write-through: host holds it too
    mem.admit([("r0", 16)])              # evicts all device blocks
    hit = mem.prefix_lookup(list(range(16)) + [99, 98, 97])
    assert hit.hit_tokens == 16          # host block (8 tokens) x2
    assert hit.device_tokens == 0
    assert sum(l.tokens for l in hit.loads) == 16
    assert all(l.tier == "tier:host:n0" for l in hit.loads)
    assert all(l.bytes == 8 * bpt for l in hit.loads)


def test_fuzz_capacity_invariants():
    """Randomized admit/free/insert/lookup/pin streams never violate tier
    accounting."""
    rng = random.Random(0)
    mem, bpt = _msg_mem(device_tokens=48, host_tokens=24)
    live: list[str] = []
    pinned: list[tuple] = []
    for i in range(3000):
        roll = rng.random()
        if roll < 0.35:
            rid = f"r{i}"
            if mem.admit([(rid, rng.randrange(1, 24))]).approved:
                live.append(rid)
        elif roll < 0.55 and live:
            mem.free_request(live.pop(rng.randrange(len(live))))
        elif roll < 0.8:
            toks = [rng.randrange(6) for _ in range(rng.randrange(1, 28))]
            mem.insert_prefix(toks)
        elif roll < 0.9:
            toks = [rng.randrange(6) for _ in range(rng.randrange(1, 28))]
            mem.prefix_lookup(toks)
        elif roll < 0.95:
            toks = tuple(rng.randrange(6) for _ in range(rng.randrange(1, 20)))
            mem.pin_prefix(toks)
            pinned.append(toks)
        elif pinned:
            mem.unpin_prefix(pinned.pop())
        # invariants
        assert 0 <= mem.device_tier.used <= mem.device_tier.capacity
        alloc = sum(a.bytes for a in mem.allocs.values())
        cache = mem.device_cache.resident_blocks * 4 * bpt
        assert mem.device_tier.used == alloc + cache
        for c in mem.shared_caches:
            assert 0 <= c.tier.used <= c.tier.capacity
            assert c.tier.used == c.resident_blocks * c.block_tokens * bpt
