import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmpc.errors import ConfigError
from llmpc.oracles import mesh_neighbors
from llmpc.sysdesc import (NetworkTopology, derive_link_bandwidth, links_per_device,
                           scale_accelerator, system_from_dict, system_to_dict)

from conftest import preset


def test_a100_40gb_preset_fields():
    tree = preset("a100-40gb")
    tree["network"] = [{"kind": "switch", "size": 8}]
    s = system_from_dict(tree)
    acc = s.accelerator
    assert acc.peak("bf16") == 312e12
    assert acc.hbm.capacity == 40e9 and acc.hbm.bandwidth == 1555e9
    assert acc.sram.capacity == 20.2e6
    assert len(acc.memory_levels) >= 2
    assert s.total_devices == 8


def test_mesh_dims_must_match_size():
    tree = preset("a100-80gb")
    tree["network"] = [{"kind": "mesh2d", "size": 16, "mesh_rows": 4, "mesh_cols": 3,
                        "link_bandwidth_Bps": 1e9}]
    with pytest.raises(ConfigError, match="does not equal size"):
        system_from_dict(tree)


def test_single_device_system():
    tree = preset("v100")
    tree["network"] = [{"kind": "ring", "size": 1, "link_bandwidth_Bps": 1e9}]
    assert system_from_dict(tree).total_devices == 1


def test_derive_link_bandwidth():
    assert derive_link_bandwidth(600e9, 1) == 600e9
    assert derive_link_bandwidth(600e9, 8) == 75e9
    fc = NetworkTopology("fully_connected", 8, 1.0)
    assert derive_link_bandwidth(600e9, links_per_device(fc)) == pytest.approx(85.714e9, rel=1e-4)
    with pytest.raises(ConfigError):
        derive_link_bandwidth(600e9, 0)


def test_auto_link_bandwidth_divides_offchip():
    tree = preset("h100")
    tree["network"] = [{"kind": "fully_connected", "size": 8, "link_bandwidth_Bps": "auto"}]
    s = system_from_dict(tree)
    assert s.levels[0].link_bandwidth == s.accelerator.offchip_bandwidth / 7


def test_links_per_device_examples():
    assert links_per_device(NetworkTopology("ring", 8, 1.0)) == 2
    assert links_per_device(NetworkTopology("fully_connected", 16, 1.0)) == 15
    assert links_per_device(NetworkTopology("mesh2d", 16, 1.0, mesh_dims=(4, 4))) == 4
    assert links_per_device(NetworkTopology("switch", 64, 1.0)) == 1
    # interior nodes of the enumerated 4x4 mesh have the uniform count
    assert mesh_neighbors(4, 4)[(1, 1)] == 4


@given(st.sampled_from(["ring", "fully_connected", "mesh2d"]), st.integers(3, 12),
       st.integers(3, 12))
def test_peer_links_counted_twice(kind, a, b):
    if kind == "mesh2d":
        topo = NetworkTopology(kind, a * b, 1.0, mesh_dims=(a, b))
        # uniform interior model: a torus-like count of a*b*4/2 physical links
        edges = 2 * a * b
    else:
        topo = NetworkTopology(kind, a, 1.0)
        edges = a if kind == "ring" else a * (a - 1) // 2
    assert links_per_device(topo) * topo.size == 2 * edges


@pytest.mark.parametrize("name", ["a100-40gb", "a100-80gb", "h100", "b200", "v100"])
def test_round_trip(name):
    tree = preset(name)
    tree["network"] = [{"kind": "ring", "size": 4, "link_bandwidth_Bps": "auto",
                        "link_latency_s": 1e-6},
                       {"kind": "mesh2d", "size": 8, "mesh_rows": 2, "mesh_cols": 4,
                        "link_bandwidth_Bps": 25e9, "a2a_bandwidth_Bps": 12e9}]
    s = system_from_dict(tree)
    again = system_from_dict(system_to_dict(s))
    assert again == s
    assert system_to_dict(again) == system_to_dict(s)


def test_scale_accelerator_variants():
    tree = preset("a100-80gb")
    tree["network"] = [{"kind": "switch", "size": 8}]
    acc = system_from_dict(tree).accelerator
    eight = scale_accelerator(acc, hbm_stacks=8)
    assert eight.name == "A100-8HBMs"
    assert eight.hbm.capacity == 8 * acc.physical.hbm_stack.capacity
    half = scale_accelerator(acc, hbm_stacks=3, logic_die_scale=0.5)
    assert half.name == "HA100-3HBMs"
    assert half.peak("bf16") == acc.peak("bf16") / 2
    assert half.sram.capacity == acc.sram.capacity / 2


def _valid_tree():
    tree = preset("a100-80gb")
    tree["network"] = [{"kind": "switch", "size": 8, "link_bandwidth_Bps": 300e9},
                       {"kind": "mesh2d", "size": 4, "mesh_rows": 2, "mesh_cols": 2,
                        "link_bandwidth_Bps": 25e9}]
    return tree


def _set(path, value):
    def mutate(t):
        node = t
        for p in path[:-1]:
            node = node[p]
        node[path[-1]] = value
    return mutate


MUTATIONS = [
    _set(("accelerator", "peak_flops", "bf16"), 0.0),
    _set(("accelerator", "peak_flops", "bf16"), -1.0),
    _set(("accelerator", "peak_flops"), {}),
    _set(("accelerator", "peak_flops", "fp4"), 1e12),
    _set(("accelerator", "offchip_bandwidth_Bps"), 0.0),
    _set(("memory", "hbm", "capacity_bytes"), 0.0),
    _set(("memory", "l2", "capacity_bytes"), 1e12),
    _set(("memory", "l2", "bandwidth_Bps"), 1.0),
    _set(("memory", "sram", "bandwidth_Bps"), -5.0),
    _set(("network", 0, "kind"), "torus"),
    _set(("network", 0, "size"), 0),
    _set(("network", 0, "link_bandwidth_Bps"), 0.0),
    _set(("network", 0, "link_latency_s"), -1e-6),
    _set(("network", 0, "switch_delay_s"), -1e-6),
    _set(("network", 1, "mesh_rows"), 3),
    _set(("network", 0, "mesh_rows"), 2),
    _set(("network", 0, "a2a_bandwidth_Bps"), 0.0),
    _set(("network",), []),
    _set(("total_devices",), 31),
    _set(("memory",), {"hbm": {"capacity_bytes": 80e9, "bandwidth_Bps": 2e12}}),
    _set(("network", 0, "size"), "eight"),
]


@settings(max_examples=60)
@given(st.lists(st.sampled_from(range(len(MUTATIONS))), min_size=1, max_size=3, unique=True))
def test_invalid_mutations_rejected(indices):
    system_from_dict(_valid_tree())
    tree = copy.deepcopy(_valid_tree())
    MUTATIONS[indices[0]](tree)
    for i in indices[1:]:
        try:
            MUTATIONS[i](tree)
        except (IndexError, KeyError, TypeError):
            pass  # an earlier mutation removed this path
    with pytest.raises(ConfigError):
        system_from_dict(tree)
