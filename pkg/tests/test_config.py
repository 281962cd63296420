import json

import pytest

from servesim.config import (ClusterSpec, ConfigError, cluster_to_dict,
                             load_workload_config, parse_cluster, validate)
from conftest import (const_table, gpu, llama_like, one_box, pim_dev,
                      simple_msg, tiny_model)


def _raw_cluster():
    return {
        "nodes": [{
            "id": "n0",
            "devices": [{"id": "g0", "kind": "gpu",
                         "mem_capacity": 2**34, "mem_bandwidth": 1e12,
                         "idle_w": 10, "standby_w": 20, "active_w": 300,
                         "profile_ref": "test"},
                        {"id": "g1", "kind": "gpu",
                         "mem_capacity": 2**34, "mem_bandwidth": 1e12,
                         "idle_w": 10, "standby_w": 20, "active_w": 300,
                         "profile_ref": "test"}],
            "cpu_w": 100,
        }],
        "links": [{"id": "l0", "endpoints": ["g0", "g1"],
                   "bandwidth": 64e9, "latency": 1e-6}],
        "tiers": [{"tier": "host", "capacity": 2**36, "bandwidth": 50e9,
                   "scope": "per_node", "block_size_tokens": 256}],
        "msgs": [{"id": "msg0", "model": "m", "device_pool": ["g0", "g1"],
                  "tp_degree": 2}],
    }


def test_round_trip():
    c = parse_cluster(_raw_cluster())
    again = parse_cluster(cluster_to_dict(c))
    assert again == c


def test_unknown_field_rejected():
    raw = _raw_cluster()
    raw["nodes"][0]["devices"][0]["surprise"] = 1
    with pytest.raises(ConfigError, match="surprise"):
        parse_cluster(raw)


def test_invariant_error_names_field():
    raw = _raw_cluster()
    raw["nodes"][0]["devices"][0]["mem_capacity"] = 0
    with pytest.raises(ConfigError, match="mem_capacity"):
        parse_cluster(raw)


def test_dangling_device_ref():
    raw = _raw_cluster()
    raw["msgs"][0]["device_pool"] = ["g0", "ghost"]
    with pytest.raises(ConfigError, match="ghost"):
        parse_cluster(raw)


def test_dangling_pd_peer():
    raw = _raw_cluster()
    raw["msgs"][0]["pd_peers"] = ["nope"]
    with pytest.raises(ConfigError, match="nope"):
        parse_cluster(raw)


def test_device_power_ordering_enforced():
    raw = _raw_cluster()
    raw["nodes"][0]["devices"][0]["idle_w"] = 500
    with pytest.raises(ConfigError):
        parse_cluster(raw)


def test_tp_pool_mismatch():
    raw = _raw_cluster()
    raw["msgs"][0]["tp_degree"] = 4
    with pytest.raises(ConfigError):
        parse_cluster(raw)


def test_workload_config_exclusive(tmp_path):
    p = tmp_path / "w.json"
    p.write_text(json.dumps({
        "models": [{"name": "m", "num_layers": 1, "hidden_dim": 64,
                    "num_heads": 4, "num_kv_heads": 4, "head_dim": 16,
                    "intermediate_dim": 256, "dtype_bytes": 2}],
        "trace": {"path": "t.jsonl"},
        "generator": {"kind": "fixed", "n": 1},
    }))
    with pytest.raises(ConfigError, match="mutually exclusive"):
        load_workload_config(str(p))


def test_validate_ok():
    model = tiny_model()
    cluster = one_box([gpu(0)], [simple_msg()])
    rep = validate(cluster, [model], {("test", "m"): const_table()})
    assert rep.ok, rep.problems


def test_validate_missing_op_class():
    model = tiny_model()
    cluster = one_box([gpu(0)], [simple_msg()])
    table = const_table()
    table._grids.pop("ffn_up")
    rep = validate(cluster, [model], {("test", "m"): table})
    assert not rep.ok
    assert any("ffn_up" in p for p in rep.problems)


def test_validate_pim_exemption():
    """PIM stacks only need pim_attention coverage."""
    model = tiny_model()
    cluster = one_box([gpu(0), pim_dev(0)],
                      [simple_msg(pool=("g0", "pim0"))])
    profiles = {("test", "m"): const_table(),
                ("pim", "m"): const_table(pim=True)}
    rep = validate(cluster, [model], profiles)
    assert rep.ok, rep.problems


def test_validate_weights_too_big():
    model = llama_like()  # ~10 GB of weights
    cluster = one_box([gpu(0, mem=1 << 30)],
                      [simple_msg(model=model.name)])
    profiles = {("test", model.name): const_table(model.name)}
    rep = validate(cluster, [model], profiles)
    assert not rep.ok
