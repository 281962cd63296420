"""Shared builders: tiny models, constant-latency profiles, one-box clusters."""

import re

import pytest

from servesim.config import (ClusterSpec, DeviceSpec, LinkSpec, MemoryTierSpec,
                             ModelSpec, MoESpec, MSGSpec, NodeSpec, OffloadRule)
from servesim.profiles import OperatorRecord, ProfileTable

TOKEN_OPS = ("embed", "norm", "qkv_proj", "out_proj", "ffn_up", "ffn_down",
             "lm_head")
ATTN_OPS = ("attention_prefill", "attention_decode")
MOE_OPS = ("router_gate", "expert_ffn")


def tiny_model(layers=1, moe=None, name="m", kv_heads=4):
    return ModelSpec(name=name, num_layers=layers, hidden_dim=64, num_heads=4,
                     num_kv_heads=kv_heads, head_dim=16, intermediate_dim=256,
                     dtype_bytes=2, moe=moe, weight_bytes=1 << 20)


def llama_like(name="dense-8b"):
    """Dimensions whose kv_bytes_per_token works out to 131072."""
    return ModelSpec(name=name, num_layers=32, hidden_dim=4096, num_heads=32,
                     num_kv_heads=8, head_dim=128, intermediate_dim=14336,
                     dtype_bytes=2)


def const_table(model_name="m", latency=1e-3, ref="test", energy=None,
                moe=False, pim=False):
    """Every op costs `latency` everywhere on the grid."""
    t = ProfileTable(ref, model_name)
    rec = OperatorRecord(latency=latency, energy=energy)
    if pim:
        ops = ()
        for b in (1, 4096):
            for s in (1, 16384):
                t.add("pim_attention", b, s, rec)
        return t.finalize()
    for op in TOKEN_OPS + (MOE_OPS if moe else ()):
        for b in (1, 1 << 20):
            t.add(op, b, 1, rec)
    for op in ATTN_OPS:
        for b in (1, 4096):
            for s in (1, 16384):
                t.add(op, b, s, rec)
    return t.finalize()


def gpu(i=0, mem=1 << 34, ref="test", bw=1e12):
    return DeviceSpec(id=f"g{i}", kind="gpu", mem_capacity=mem,
                      mem_bandwidth=bw, idle_w=10.0, standby_w=20.0,
                      active_w=300.0, profile_ref=ref)


def pim_dev(i=0, ref="pim", channels=256, per_channel=16e9):
    return DeviceSpec(id=f"pim{i}", kind="pim_stack", mem_capacity=1 << 36,
                      mem_bandwidth=per_channel, pim_channels=channels,
                      idle_w=5.0, standby_w=8.0, active_w=80.0,
                      profile_ref=ref)


def one_box(devices, msgs, links=(), tiers=(), router="round_robin",
            cpu_w=0.0):
    node = NodeSpec(id="n0", devices=tuple(devices), cpu_w=cpu_w)
    return ClusterSpec(nodes=(node,), links=tuple(links), tiers=tuple(tiers),
                       msgs=tuple(msgs), router_policy=router)


def simple_msg(pool=("g0",), **kw):
    kw.setdefault("id", "msg0")
    kw.setdefault("model", "m")
    kw.setdefault("role", "unified")
    return MSGSpec(device_pool=tuple(pool), **kw)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def table():
    return const_table()


_CRITERIA_SEEN = set()


def pytest_runtest_logreport(report):
    """Emit one `A<n>: PASS|FAIL` line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    m = re.search(r"::test_(a\d+)", report.nodeid)
    if not m:
        return
    crit = m.group(1).upper()
    verdict = "PASS" if report.passed else "FAIL"
    key = (crit, verdict)
    if report.passed and any(k == crit and v == "FAIL"
                             for k, v in _CRITERIA_SEEN):
        return  # one FAIL already reported for a multi-test criterion
    if key not in _CRITERIA_SEEN:
        _CRITERIA_SEEN.add(key)
        print(f"\n{crit}: {verdict}", flush=True)
