import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmpc.oracles import best_square_tile, flops_reference, tiled_traffic
from llmpc.roofline import (COMPUTE, DROPOUT_FLOPS, KernelDescriptor, gemm_descriptor,
                            gemm_traffic, kernel_time, pointwise_descriptor, square_tile,
                            trace_csv)
from llmpc.sysdesc import AcceleratorSpec, MemoryLevel


def synthetic(sram_capacity=1e6, peak=1e12, hbm_bw=2e9, sram_bw=1e11, scale=1.0):
    return AcceleratorSpec("synthetic", {"bf16": peak * scale, "fp16": peak * scale},
                           (MemoryLevel("hbm", 1e12, hbm_bw * scale),
                            MemoryLevel("sram", sram_capacity, sram_bw * scale)),
                           1e9)


def test_single_term_examples():
    acc = synthetic()
    t = kernel_time(KernelDescriptor("c", 2e12), acc)
    assert t.seconds == 2.0 and t.bound_by == COMPUTE
    t = kernel_time(KernelDescriptor("m", 0.0, {"hbm": 4e9}), acc)
    assert t.seconds == 2.0 and t.bound_by == "hbm"


def test_ties_go_to_compute():
    acc = synthetic()
    assert kernel_time(KernelDescriptor("tie", 2e12, {"hbm": 4e9}), acc).bound_by == COMPUTE


def test_square_gemm_4096_compute_bound(a100):
    d = gemm_descriptor(4096, 4096, 4096, "bf16", a100)
    t = kernel_time(d, a100)
    ideal = 2 * 4096 ** 3 / 312e12
    assert t.bound_by == COMPUTE
    assert t.seconds == pytest.approx(ideal, rel=0.10)
    # the model's HBM traffic equals explicit loop-nest counting at the chosen tile
    tile = square_tile(a100.memory_levels[1].capacity, 2, 4096, 4096, 4096)
    assert d.bytes_per_level["hbm"] == tiled_traffic(4096, 4096, 4096, tile, 2)
    assert d.bytes_per_level["hbm"] / a100.hbm.bandwidth < ideal


def test_unit_gemm(a100):
    d = gemm_descriptor(1, 1, 1, "bf16", a100)
    assert d.flops == 2
    assert set(d.bytes_per_level.values()) == {4 * 2}


def test_skinny_gemm_is_hbm_bound(a100):
    d = gemm_descriptor(8 * 1024, 64, 64, "bf16", a100)
    assert kernel_time(d, a100).bound_by == "hbm"


def test_tile_matches_exhaustive_search():
    capacity, b = 192e3, 2
    tile = square_tile(capacity, b, 512, 512, 512)
    best_tile, best_traffic = best_square_tile(512, 512, 512, capacity, b)
    assert tile == pytest.approx(best_tile, rel=0.15)
    assert gemm_traffic(512, 512, 512, tile, b) == pytest.approx(best_traffic, rel=0.15)
    assert 3 * tile * tile * b <= capacity


@given(st.integers(1, 96), st.integers(1, 96), st.integers(1, 96), st.integers(1, 40))
def test_traffic_formula_matches_loop_nest(m, n, k, tile):
    assert gemm_traffic(m, n, k, tile, 2) == tiled_traffic(m, n, k, tile, 2)


@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(1, 5000),
       st.sampled_from(["fp32", "bf16", "fp8"]))
def test_outer_traffic_at_least_compulsory(m, n, k, prec):
    acc = AcceleratorSpec("a", {prec: 1e12},
                          (MemoryLevel("hbm", 1e12, 1e12), MemoryLevel("l2", 4e6, 4e12),
                           MemoryLevel("sram", 2e5, 2e13)), 1e9)
    d = gemm_descriptor(m, n, k, prec, acc)
    b = {"fp32": 4, "bf16": 2, "fp8": 1}[prec]
    compulsory = (m * k + k * n + m * n) * b
    for level in ("hbm", "l2", "sram"):
        assert d.bytes_per_level[level] >= compulsory
    assert d.flops == flops_reference(m, n, k)


def test_verdict_flips_with_sram_capacity():
    verdicts = []
    for cap in (3e3, 3e4, 3e5, 3e6):
        acc = synthetic(sram_capacity=cap, peak=100e12, hbm_bw=1e12, sram_bw=1e15)
        verdicts.append(kernel_time(gemm_descriptor(2048, 2048, 2048, "bf16", acc), acc).bound_by)
    assert verdicts[0] == "hbm" and verdicts[-1] == COMPUTE
    # once compute-bound, a larger SRAM never flips back
    first = verdicts.index(COMPUTE)
    assert all(v == COMPUTE for v in verdicts[first:])


descriptors = st.builds(
    lambda f, h, s: KernelDescriptor("k", f, {"hbm": h, "sram": s}),
    st.floats(0, 1e15), st.floats(0, 1e12), st.floats(0, 1e13))


@given(descriptors, st.sampled_from(["flops", "hbm", "sram"]), st.floats(0, 1e12))
def test_kernel_time_monotone(desc, which, extra):
    acc = synthetic()
    if which == "flops":
        bigger = KernelDescriptor("k", desc.flops + extra, desc.bytes_per_level)
    else:
        levels = dict(desc.bytes_per_level)
        levels[which] += extra
        bigger = KernelDescriptor("k", desc.flops, levels)
    assert kernel_time(bigger, acc).seconds >= kernel_time(desc, acc).seconds


@given(descriptors, st.floats(0.01, 100))
def test_uniform_scaling(desc, s):
    base = kernel_time(desc, synthetic()).seconds
    fast = kernel_time(desc, synthetic(scale=s)).seconds
    assert math.isclose(fast, base / s, rel_tol=1e-12, abs_tol=1e-300)


def test_pointwise_examples(a100):
    assert kernel_time(pointwise_descriptor(0, 5, "fp16"), a100).seconds == 0.0
    t = kernel_time(pointwise_descriptor(1e9, 5, "fp16"), a100)
    assert t.bound_by == "hbm"
    n, heads = 2048, 16
    drop = pointwise_descriptor(n * n * heads, DROPOUT_FLOPS, "fp16")
    assert drop.bytes_per_level["hbm"] == 2 * n * n * heads * 2


def test_trace_csv(a100):
    d = gemm_descriptor(64, 64, 64, "bf16", a100, name="g")
    text = trace_csv([(d, kernel_time(d, a100))])
    assert text.splitlines()[0].startswith("name")
    assert len(text.splitlines()) == 2
