"""Attention-core execution time: standard multi-pass and FlashAttention-v1.

The attention core is everything between the QKV projection and the output
projection: S = Q K^T, the pointwise/reduction stage, and O = P V.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from llmpc.breakdown import TimeBreakdown
from llmpc.errors import ConfigError
from llmpc.roofline import (DROPOUT_FLOPS, MASK_FLOPS, SOFTMAX_FLOPS, KernelDescriptor,
                            gemm_descriptor, kernel_time, pointwise_descriptor)
from llmpc.sysdesc import AcceleratorSpec, bytes_per_element

# FA backward recomputes S and P in-kernel.
FLASH_BWD_FLOP_FACTOR = 2.5
FLASH_BWD_HBM_FACTOR = 2.0
STANDARD_BWD_FACTOR = 2.0
# running max and running sum, one value per query row
SURROGATE_VECTORS = 2


@dataclass(frozen=True)
class AttentionShape:
    batch: int
    seq: int
    heads: int
    kv_heads: int
    head_dim: int
    precision: str = "bf16"
    q_len: int | None = None

    def __post_init__(self):
        if self.q_len is None:
            object.__setattr__(self, "q_len", self.seq)
        for key in ("batch", "seq", "heads", "kv_heads", "head_dim", "q_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"attention shape: {key} must be >= 1")
        if self.heads % self.kv_heads:
            raise ConfigError("attention shape: kv_heads must divide heads")

    @property
    def group(self) -> int:
        return self.heads // self.kv_heads

    @property
    def score_elements(self) -> int:
        return self.batch * self.heads * self.q_len * self.seq


@dataclass(frozen=True)
class FlashTiling:
    tile_rows: int
    num_tiles: int
    sram_budget: float


def flash_tiling(head_dim: int, sram_bytes: float, precision: str,
                 seq: int | None = None) -> FlashTiling:
    b = bytes_per_element(precision)
    rows = int(sram_bytes // (4 * head_dim * b))
    if rows < 1:
        raise ConfigError(
            f"SRAM budget {sram_bytes} B cannot hold one row of 4 tiles (d={head_dim}, {b} B/elem)")
    if seq is None:
        return FlashTiling(rows, 1, sram_bytes)
    rows = min(rows, seq)
    return FlashTiling(rows, math.ceil(seq / rows), sram_bytes)


def _is_training(phase: str) -> bool:
    return phase == "training"


def _pointwise_flops(training: bool) -> int:
    # masking and dropout only run during training
    return SOFTMAX_FLOPS + ((MASK_FLOPS + DROPOUT_FLOPS) if training else 0)


def standard_kernels(shape: AttentionShape, acc: AcceleratorSpec,
                     training: bool) -> list[tuple[str, KernelDescriptor]]:
    """Forward kernels of the three-pass algorithm; S and P round-trip through HBM."""
    s = shape
    rows = s.q_len * s.group
    batch = s.batch * s.kv_heads
    qk = gemm_descriptor(rows, s.seq, s.head_dim, s.precision, acc, batch=batch, name="attn_qk")
    soft = pointwise_descriptor(s.score_elements, _pointwise_flops(training), s.precision,
                                level=acc.hbm.name, name="attn_softmax")
    pv = gemm_descriptor(rows, s.head_dim, s.seq, s.precision, acc, batch=batch, name="attn_pv")
    return [("attn_qk", qk), ("attn_softmax", soft), ("attn_pv", pv)]


def flash_kernels(shape: AttentionShape, tiling: FlashTiling, acc: AcceleratorSpec,
                  training: bool) -> list[tuple[str, KernelDescriptor]]:
    """Forward kernels of the fused single-pass algorithm, one per term of t_FA."""
    s = shape
    b = bytes_per_element(s.precision)
    tiles = math.ceil(s.seq / min(tiling.tile_rows, s.seq))
    qo_rows = s.batch * s.heads * s.q_len
    kv_bytes = 2 * s.batch * s.kv_heads * s.seq * s.head_dim * b
    # Q and O are revisited once per K/V tile, with the running statistics alongside
    q_bytes = tiles * qo_rows * s.head_dim * b
    o_bytes = tiles * qo_rows * s.head_dim * b
    stat_bytes = tiles * qo_rows * SURROGATE_VECTORS * b
    hbm = acc.hbm.name
    load = KernelDescriptor("fa_hbm_load", 0.0, {hbm: kv_bytes + q_bytes + o_bytes + stat_bytes},
                            s.precision)
    store = KernelDescriptor("fa_hbm_store", 0.0, {hbm: o_bytes + stat_bytes}, s.precision)
    on_chip = [lvl.name for lvl in acc.memory_levels[1:]]
    sram = acc.sram.name
    rows = s.q_len * s.group
    batch = s.batch * s.kv_heads
    qk = gemm_descriptor(rows, s.seq, s.head_dim, s.precision, acc, batch=batch,
                         name="fa_qk", levels=[sram])
    pv = gemm_descriptor(rows, s.head_dim, s.seq, s.precision, acc, batch=batch,
                         name="fa_pv", levels=[sram])
    gemm = KernelDescriptor("fa_gemm", qk.flops + pv.flops,
                            {sram: qk.bytes_per_level[sram] + pv.bytes_per_level[sram]},
                            s.precision)
    pt = pointwise_descriptor(s.score_elements, _pointwise_flops(training), s.precision,
                              level=sram, name="fa_pt_reduc")
    assert set(gemm.bytes_per_level) <= set(on_chip) and set(pt.bytes_per_level) <= set(on_chip)
    return [("fa_hbm_load", load), ("fa_gemm", gemm), ("fa_pt_reduc", pt), ("fa_hbm_store", store)]


def _accumulate(out: TimeBreakdown, kernels, acc: AcceleratorSpec, flop_factor: float = 1.0,
                byte_factors: dict[str, float] | None = None) -> TimeBreakdown:
    for label, desc in kernels:
        if flop_factor != 1.0 or byte_factors:
            bf = (byte_factors or {}).get(label, flop_factor)
            desc = desc.scaled(flop_factor if desc.flops else bf, bf)
        out.add_kernel(label, kernel_time(desc, acc))
    return out


def standard_attention_time(shape: AttentionShape, acc: AcceleratorSpec, phase: str,
                            recompute: bool = False) -> TimeBreakdown:
    training = _is_training(phase)
    fwd = standard_kernels(shape, acc, training)
    out = _accumulate(TimeBreakdown(metadata={"mode": "standard"}), fwd, acc)
    if training:
        _accumulate(out, fwd, acc, STANDARD_BWD_FACTOR)
        if recompute:
            _accumulate(out, fwd, acc)
    return out


def flash_attention_time(shape: AttentionShape, tiling: FlashTiling, acc: AcceleratorSpec,
                         phase: str, recompute: bool = False) -> TimeBreakdown:
    training = _is_training(phase)
    fwd = flash_kernels(shape, tiling, acc, training)
    out = _accumulate(TimeBreakdown(metadata={"mode": "flash", "tile_rows": tiling.tile_rows}),
                      fwd, acc)
    if training:
        hbm_factor = {"fa_hbm_load": FLASH_BWD_HBM_FACTOR, "fa_hbm_store": FLASH_BWD_HBM_FACTOR}
        _accumulate(out, fwd, acc, FLASH_BWD_FLOP_FACTOR, hbm_factor)
        if recompute:
            _accumulate(out, fwd, acc)
    return out


def attention_core_time(shape: AttentionShape, acc: AcceleratorSpec, phase: str,
                        flash: bool, recompute: bool = False) -> TimeBreakdown:
    if flash:
        tiling = flash_tiling(shape.head_dim, acc.sram.capacity, shape.precision, shape.seq)
        return flash_attention_time(shape, tiling, acc, phase, recompute)
    return standard_attention_time(shape, acc, phase, recompute)


def hbm_bytes(shape: AttentionShape, acc: AcceleratorSpec, flash: bool,
              training: bool = False) -> float:
    """Forward HBM traffic of the attention core (diagnostic)."""
    if flash:
        tiling = flash_tiling(shape.head_dim, acc.sram.capacity, shape.precision, shape.seq)
        kernels = flash_kernels(shape, tiling, acc, training)
    else:
        kernels = standard_kernels(shape, acc, training)
    return sum(desc.bytes_per_level.get(acc.hbm.name, 0.0) for _, desc in kernels)
