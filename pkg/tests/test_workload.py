import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmpc.config import load_preset
from llmpc.errors import ConfigError
from llmpc.workload import (ModelConfig, MoEConfig, RunConfig, flops_per_token, kv_cache_bytes,
                            layer_forward_flops_per_token, mlp_params, model_from_dict,
                            model_to_dict, param_count)


def model(name):
    return model_from_dict(load_preset("models", name))


@pytest.mark.parametrize("name,expected", [("gpt2-small", 125e6), ("gpt2-xl", 1.5e9),
                                           ("moe-139b", 139e9), ("gpt3-175b", 175e9)])
def test_param_counts(name, expected):
    assert param_count(model(name)) == pytest.approx(expected, rel=0.05)


def test_flops_invariant_in_expert_count():
    base = model("gpt3-13b")
    counts = {flops_per_token(dataclasses.replace(base, moe=MoEConfig(e, 1)))
              for e in (8, 16, 32, 64)}
    assert len(counts) == 1
    # top_k=1 MoE performs exactly the dense per-token layer work (vocabularies differ)
    assert (layer_forward_flops_per_token(model("moe-139b"))
            == layer_forward_flops_per_token(model("gpt3-13b")))


def test_zero_layer_model_is_head_only():
    m = ModelConfig("empty", 0, 64, 4, 256, 1000, 128)
    assert flops_per_token(m, "inference_prefill") == 2 * 64 * 1000
    assert layer_forward_flops_per_token(m) == 0.0


def test_kv_cache_examples():
    llama = ModelConfig("llama-like", 80, 8192, 64, 28672, 32000, 4096, kv_heads=8)
    run = RunConfig("inference_decode", 1, "fp16")
    assert kv_cache_bytes(llama, run, 4096) == 2 * 80 * 8 * 128 * 4096 * 2
    assert kv_cache_bytes(llama, run, 0) == 0
    mha = dataclasses.replace(llama, kv_heads=64)
    assert kv_cache_bytes(mha, run, 4096) == 8 * kv_cache_bytes(llama, run, 4096)
    with pytest.raises(ConfigError):
        kv_cache_bytes(llama, RunConfig("training"), 10)


@given(st.integers(1, 64), st.integers(0, 8192), st.sampled_from([1, 2, 4, 8]),
       st.sampled_from(["fp32", "bf16", "fp8"]), st.integers(2, 5))
def test_kv_cache_linear(batch, seq, kv, prec, k):
    m = ModelConfig("m", 4, 512, 8, 2048, 1000, 8192, kv_heads=kv)
    run = RunConfig("inference_decode", 1, prec)
    one = kv_cache_bytes(m, run, seq, batch)
    assert kv_cache_bytes(m, run, seq * k, batch) == k * one
    assert kv_cache_bytes(m, run, seq, batch * k) == k * one
    if 8 % (kv * 2) == 0:
        assert kv_cache_bytes(dataclasses.replace(m, kv_heads=kv * 2), run, seq, batch) == 2 * one
    wide = RunConfig("inference_decode", 1, "fp32")
    assert kv_cache_bytes(m, wide, seq, batch) * run.bytes_per_element == one * 4


dims = st.fixed_dictionaries({
    "num_layers": st.integers(0, 8), "heads_mult": st.integers(1, 4),
    "num_heads": st.sampled_from([1, 2, 4]), "ffn_dim": st.integers(1, 512),
    "vocab_size": st.integers(1, 5000), "context_length": st.integers(1, 512),
})


def _build(d):
    return ModelConfig("m", d["num_layers"], d["num_heads"] * 16 * d["heads_mult"],
                       d["num_heads"], d["ffn_dim"], d["vocab_size"], d["context_length"])


@given(dims, st.sampled_from(["num_layers", "heads_mult", "ffn_dim", "vocab_size",
                              "context_length"]), st.integers(1, 7))
def test_param_count_monotone(d, key, bump):
    bigger = dict(d, **{key: d[key] + bump})
    assert param_count(_build(bigger)) >= param_count(_build(d))


def test_gated_mlp_has_three_matrices():
    m = ModelConfig("m", 1, 64, 4, 256, 10, 16, gated_mlp=True)
    assert mlp_params(m) == 3 * 64 * 256


def test_training_flops_triple_forward():
    m = model("gpt2-medium")
    fwd = flops_per_token(m, "inference_prefill")
    assert flops_per_token(m, "training") == 3 * fwd
    assert flops_per_token(m, "training", activation_recompute=True) > 3 * fwd


def test_round_trip_and_errors():
    m = model("moe-139b")
    assert model_from_dict(model_to_dict(m)) == m
    with pytest.raises(ConfigError):
        model_from_dict({"layers": 2, "hidden": 100, "heads": 3, "ffn": 4, "vocab": 10,
                         "context": 8})
    with pytest.raises(ConfigError):
        MoEConfig(4, top_k=5)
    with pytest.raises(ConfigError):
        RunConfig("serving")
