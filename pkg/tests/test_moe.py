import copy
import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmpc import scenarios as S
from llmpc.config import config_from_tree, load_preset
from llmpc.engine import COMM_LABELS, dense_mlp_block_time, layer_time, predict
from llmpc.errors import ConfigError
from llmpc.moe import (LOAD_IMBALANCE_NOTE, expert_capacity, gate_kernels, gating_time,
                       moe_layer_time, plan_moe_layer)
from llmpc.parallelism import ParallelismConfig, shard_workload
from llmpc.roofline import kernel_time
from llmpc.workload import MoEConfig, RunConfig, model_from_dict

from conftest import make_system

BASE = model_from_dict(load_preset("models", "gpt3-13b"))


def with_experts(e, top_k=1, cf=1.0):
    return dataclasses.replace(BASE, moe=MoEConfig(e, top_k, cf, 2))


def test_capacity_examples():
    assert expert_capacity(1024, 32) == 32
    assert expert_capacity(1000, 8, top_k=2, capacity_factor=1.25) == 313
    assert expert_capacity(0, 8) == 0
    with pytest.raises(ConfigError):
        expert_capacity(10, 0)


def test_gating_examples(a100):
    # width-1 rows: the softmax is negligible and only reading the activations remains
    _, soft = gate_kernels(2048, 4096, 1, "fp16", a100)
    assert kernel_time(soft, a100).seconds < 1e-8
    assert gating_time(2048, 4096, 1, a100).seconds < gating_time(2048, 4096, 64, a100).seconds
    gemm, _ = gate_kernels(2048, 4096, 64, "fp16", a100)
    assert kernel_time(gemm, a100).bound_by == "hbm"
    double, _ = gate_kernels(2048, 4096, 128, "fp16", a100)
    assert double.flops == 2 * gemm.flops


@pytest.mark.parametrize("e", [8, 16, 32, 64])
def test_expert_work_independent_of_e(a100, e):
    run = RunConfig(global_batch=e)
    p = ParallelismConfig(dp=e)
    model = with_experts(e)
    shard = shard_workload(p, model, run)
    plan = plan_moe_layer(model, shard, p, 2048, "bf16", a100)
    flops = sum(k.flops for _, k in plan.expert_gemms)
    ref = with_experts(8)
    ref_p = ParallelismConfig(dp=8)
    ref_plan = plan_moe_layer(ref, shard_workload(ref_p, ref, RunConfig(global_batch=8)), ref_p,
                              2048, "bf16", a100)
    assert flops == sum(k.flops for _, k in ref_plan.expert_gemms)
    assert plan.a2a_bytes == ref_plan.a2a_bytes


def test_token_split_restores_full_rows(a100):
    model = with_experts(32)
    p = ParallelismConfig(dp=32, tp=8, sp=8)
    shard = shard_workload(p, model, RunConfig(global_batch=32))
    split = plan_moe_layer(model, shard, p, 2048 // 8, "bf16", a100, token_split=8)
    whole = plan_moe_layer(model, shard, p, 2048, "bf16", a100)
    assert (sum(k.flops for _, k in split.expert_gemms)
            == sum(k.flops for _, k in whole.expert_gemms))
    assert split.a2a_bytes * 8 == whole.a2a_bytes


@pytest.mark.parametrize("phase,factor", [("inference", 1.0), ("training", 3.0)])
def test_infinite_a2a_leaves_only_gating(phase, factor):
    net = [{"kind": "switch", "size": 8, "link_bandwidth_Bps": 300e9,
            "a2a_bandwidth_Bps": 1e300}]
    system = make_system(network=net)
    acc = system.accelerator
    model = with_experts(8)
    p = ParallelismConfig(dp=8)
    run = RunConfig(global_batch=8)
    shard = shard_workload(p, model, run)
    tokens = 2048
    plan = plan_moe_layer(model, shard, p, tokens, "bf16", acc)
    moe = moe_layer_time(plan, p, system, acc, phase).total
    dense = dense_mlp_block_time(model, shard, p, run, system, tokens, phase == "training")
    gate = gating_time(tokens, model.hidden_dim, 8, acc).seconds
    assert moe - dense == pytest.approx(factor * gate, rel=1e-9, abs=1e-15)


def test_a2a_grows_linearly_with_experts():
    system = make_system(network=[{"kind": "switch", "size": 8, "link_bandwidth_Bps": 100e9}])
    acc = system.accelerator
    p = ParallelismConfig(dp=8)
    times = []
    for e in (8, 16, 32):
        model = with_experts(e, cf=e / 8)  # C per expert stays fixed as E grows
        shard = shard_workload(p, model, RunConfig(global_batch=8))
        plan = plan_moe_layer(model, shard, p, 2048, "bf16", acc)
        assert plan.capacity == 256
        times.append(moe_layer_time(plan, p, system, acc, "inference").get("a2a_dispatch"))
    assert times[1] == pytest.approx(2 * times[0], rel=1e-12)
    assert times[2] == pytest.approx(4 * times[0], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4]), st.sampled_from([1, 2]), st.booleans(),
       st.sampled_from([1024, 2048]))
def test_non_moe_layers_match_dense(stride, tp, training, q_len):
    system = make_system()
    dense = dataclasses.replace(BASE, context_length=q_len)
    moe = dataclasses.replace(dense, moe=MoEConfig(8, 1, 1.0, stride))
    p = ParallelismConfig(dp=8 // tp, tp=tp)
    run = RunConfig("training" if training else "inference_prefill", 8 // tp)
    kwargs = dict(batch=1, q_len=q_len, kv_len=q_len, training=training)
    a = layer_time(moe, shard_workload(p, moe, run), p, run, system, False, **kwargs)
    b = layer_time(dense, shard_workload(p, dense, run), p, run, system, False, **kwargs)
    assert a.components == b.components


def _scaled_network(tree, factor):
    tree = copy.deepcopy(tree)
    for lvl in tree["system"]["network"]:
        for key in ("link_bandwidth_Bps", "a2a_bandwidth_Bps"):
            if isinstance(lvl.get(key), (int, float)):
                lvl[key] *= factor
    # "auto" links follow the off-chip bandwidth
    offchip = load_preset("accelerators", tree["system"]["preset"])["accelerator"]
    tree["system"]["accelerator"] = {
        "offchip_bandwidth_Bps": offchip["offchip_bandwidth_Bps"] * factor}
    return tree


def test_communication_fraction_falls_with_bandwidth():
    tree = S.moe_139b()
    fractions = []
    for factor in (0.5, 1, 2, 4, 8):
        c = config_from_tree(_scaled_network(tree, factor))
        r = predict(c.system, c.model, c.run, c.parallelism)
        fractions.append(r.communication_time / r.iteration_time)
        assert LOAD_IMBALANCE_NOTE in r.notes
    assert all(b < a for a, b in zip(fractions, fractions[1:]))
    assert fractions[0] > 0
    assert set(COMM_LABELS) >= {"a2a_dispatch", "a2a_combine"}
