import dataclasses

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from llmpc.config import load_preset
from llmpc.errors import ConfigError, MemoryOverflowError, ParallelismError
from llmpc.oracles import peak_in_flight, pipeline_makespan
from llmpc.parallelism import (ParallelismConfig, in_flight_microbatches, memory_breakdown,
                               memory_footprint, parallelism_from_dict, parallelism_to_dict,
                               pipeline_time, shard_workload, validate_parallelism,
                               with_degrees)
from llmpc.sysdesc import accelerator_from_dict
from llmpc.workload import ModelConfig, MoEConfig, RunConfig, model_from_dict

from conftest import preset

GPT3 = model_from_dict(load_preset("models", "gpt3-175b"))
MOE = model_from_dict(load_preset("models", "moe-139b"))


def test_valid_examples():
    moe = dataclasses.replace(MOE, moe=MoEConfig(64))
    validate_parallelism(ParallelismConfig(dp=16, tp=4, ep=16), 64, moe, RunConfig(global_batch=64))
    validate_parallelism(ParallelismConfig(dp=16, tp=8, pp=8, microbatches=8), 1024, GPT3,
                         RunConfig(global_batch=1536))


def test_ted_violation():
    with pytest.raises(ParallelismError, match="TED"):
        validate_parallelism(ParallelismConfig(dp=4, tp=8, ep=4, dp_exp=2), 32, MOE,
                             RunConfig(global_batch=64))


@pytest.mark.parametrize("bad,msg", [
    (ParallelismConfig(dp=2, tp=5), "heads % tp"),
    (ParallelismConfig(dp=1, tp=8, sp=3), "sp=3"),
    (ParallelismConfig(dp=1, pp=7), "layers % pp"),
    (ParallelismConfig(dp=3), "batch %"),
    (ParallelismConfig(schedule="interleaved_1f1b"), "unsupported schedule"),
    (ParallelismConfig(dp=0), "dp must be >= 1"),
])
def test_invalid_degrees(bad, msg):
    with pytest.raises(ParallelismError, match=msg):
        validate_parallelism(bad, bad.devices, GPT3, RunConfig(global_batch=64))


def test_device_count_mismatch():
    with pytest.raises(ParallelismError, match="device count"):
        validate_parallelism(ParallelismConfig(dp=2), 4, GPT3, RunConfig(global_batch=64))


def test_shard_examples():
    run = RunConfig(global_batch=32)
    whole = shard_workload(ParallelismConfig(), GPT3, run)
    assert (whole.layers_per_stage, whole.heads_local, whole.ffn_cols_local) == (
        GPT3.num_layers, GPT3.num_heads, GPT3.ffn_dim)
    assert whole.batch_local == 32
    assert shard_workload(ParallelismConfig(dp=32, ep=32), MOE, run).experts_local == 1
    s = shard_workload(ParallelismConfig(tp=8), GPT3, run)
    assert s.heads_local == 12 and s.heads_local * 8 == GPT3.num_heads


@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8, 16, 32]),
       st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]))
def test_ted_identity_holds_on_accepted_configs(tp, dp, pp, ep):
    assume(dp % ep == 0)
    p = ParallelismConfig(dp=dp, tp=tp, pp=pp, ep=ep, dp_exp=dp // ep)
    validate_parallelism(p, p.devices, MOE, RunConfig(global_batch=64))
    assert p.tp * p.ep * p.dp_exp == p.tp * p.dp


def test_ep_defaults_from_dp():
    assert ParallelismConfig(dp=16).ep == 16
    assert ParallelismConfig(dp=16, dp_exp=4).ep == 4
    assert with_degrees(ParallelismConfig(dp=4), dp=8).ep == 8


def test_pipeline_examples():
    assert pipeline_time(2.0, 8, 1) == (16.0, 0.0)
    total, bubble = pipeline_time(1.0, 8, 4)
    assert total == 11.0 and bubble == 3 / 11
    assert pipeline_time(1.0, 10 ** 9, 8)[1] < 1e-8
    with pytest.raises(ConfigError):
        pipeline_time(1.0, 0, 4)


@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.1, 10), st.floats(0.1, 10),
       st.sampled_from(["gpipe", "pipedream_flush"]))
def test_makespan_matches_schedule_enumeration(m, p, tf, tb, schedule):
    formula, _ = pipeline_time(tf + tb, m, p, schedule)
    assert formula == pytest.approx(pipeline_makespan(m, p, tf, tb, schedule), rel=1e-12)


@given(st.integers(1, 64), st.integers(1, 64))
def test_bubble_trends(m, p):
    bubble = pipeline_time(1.0, m, p)[1]
    if p > 1:
        assert pipeline_time(1.0, m + 1, p)[1] < bubble
    assert pipeline_time(1.0, m, p + 1)[1] > bubble


@given(st.integers(1, 16), st.integers(1, 16), st.sampled_from(["gpipe", "pipedream_flush"]))
def test_in_flight_matches_schedule(m, pp, schedule):
    p = ParallelismConfig(pp=pp, microbatches=m, schedule=schedule)
    expected = 1 if pp == 1 else peak_in_flight(m, pp, schedule)
    assert in_flight_microbatches(p) == expected


def test_memory_examples():
    a100_40 = accelerator_from_dict(preset("a100-40gb"))
    tiny = ModelConfig("tiny", 2, 128, 4, 512, 1000, 128)
    assert memory_footprint(ParallelismConfig(), tiny, RunConfig(global_batch=4), a100_40) < 1e8
    a100 = accelerator_from_dict(preset("a100-80gb"))
    run = RunConfig(global_batch=1536, activation_recompute=True)
    fits = ParallelismConfig(dp=16, tp=8, pp=8, sp=8, microbatches=96)
    assert memory_footprint(fits, GPT3, run, a100, flash=True) < 80e9
    with pytest.raises(MemoryOverflowError):
        memory_footprint(ParallelismConfig(dp=128, tp=8, pp=1, sp=8, microbatches=12), GPT3, run,
                         a100, flash=True)
    # weights alone already exceed the device once the pipeline is removed
    no_pipeline = ParallelismConfig(dp=128, tp=8, microbatches=12)
    assert memory_breakdown(no_pipeline, GPT3, run)["weights"] > 40e9


def test_inference_memory_has_kv_cache():
    run = RunConfig("inference_decode", 8, "fp16", gen_tokens=16)
    mem = memory_breakdown(ParallelismConfig(tp=8), GPT3, run)
    assert set(mem) == {"weights", "kv_cache", "activations"}
    assert mem["kv_cache"] == 2 * 12 * 96 * 128 * 2048 * 8 * 2


base_models = st.builds(
    lambda layers, heads, ctx, gated: ModelConfig("m", layers, heads * 64, heads, heads * 256,
                                                  2048, ctx, gated_mlp=gated),
    st.sampled_from([8, 16]), st.sampled_from([8, 16]), st.sampled_from([256, 512]),
    st.booleans())


@settings(max_examples=150)
@given(base_models, st.sampled_from(["training", "inference_prefill", "inference_decode"]),
       st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]),
       st.sampled_from(["tp", "pp", "batch", "context"]), st.booleans(), st.booleans(),
       st.sampled_from(["gpipe", "pipedream_flush"]))
def test_memory_monotone(model, phase, tp, pp, m, knob, flash, recompute, schedule):
    run = RunConfig(phase, 8 * m, "bf16", activation_recompute=recompute, gen_tokens=4)
    p = ParallelismConfig(dp=1, tp=tp, pp=pp, microbatches=m, schedule=schedule)
    base = sum(memory_breakdown(p, model, run, flash).values())
    if knob == "tp":
        bigger = sum(memory_breakdown(with_degrees(p, tp=2 * tp), model, run, flash).values())
        assert bigger <= base
    elif knob == "pp":
        bigger = sum(memory_breakdown(with_degrees(p, pp=2 * pp), model, run, flash).values())
        assert bigger <= base
    elif knob == "batch":
        more = dataclasses.replace(run, global_batch=2 * run.global_batch)
        assert sum(memory_breakdown(p, model, more, flash).values()) >= base
    else:
        longer = dataclasses.replace(model, context_length=2 * model.context_length)
        assert sum(memory_breakdown(p, longer, run, flash).values()) >= base


def test_dict_round_trip():
    p = ParallelismConfig(dp=4, tp=2, pp=2, sp=2, ep=2, dp_exp=2, microbatches=4, schedule="gpipe")
    assert parallelism_from_dict(parallelism_to_dict(p)) == p
    assert parallelism_from_dict({"schedule": "PipeDream-Flush"}).schedule == "pipedream_flush"
    with pytest.raises(ConfigError):
        parallelism_from_dict({"tp": "two"})
