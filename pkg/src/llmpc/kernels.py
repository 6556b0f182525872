"""Kernel descriptors for the pieces of a transformer block, per device."""

from __future__ import annotations

import math

from llmpc.roofline import (ADD_FLOPS, DROPOUT_FLOPS, GELU_FLOPS, LAYERNORM_FLOPS, SOFTMAX_FLOPS,
                            KernelDescriptor, gemm_descriptor, pointwise_descriptor)
from llmpc.sysdesc import AcceleratorSpec
from llmpc.workload import ModelConfig

Kernels = list[tuple[str, KernelDescriptor]]

# residual add reads two operands and writes one, dropout writes a 1-byte mask
RESIDUAL_PASSES = 1.75
# mixed-precision Adam update: fp32 master, two fp32 moments, gradient and half weights,
# each read and written once
OPTIMIZER_BYTES_PER_PARAM = 28
# the loss runs in fp32: a reduction sweep, a normalization sweep and the cast
LOSS_PRECISION = "fp32"
LOSS_PASSES = 2.5


def norm_and_residual(tokens: int, model: ModelConfig, sp: int, precision: str,
                      acc: AcceleratorSpec, training: bool) -> Kernels:
    """Two layernorms and two residual adds (with dropout when training).

    Sequence parallelism splits these over the tensor-parallel group.
    """
    elements = tokens * model.hidden_dim / sp
    hbm = acc.hbm.name
    residual = ADD_FLOPS + (DROPOUT_FLOPS if training else 0)
    return [
        ("other", pointwise_descriptor(elements, LAYERNORM_FLOPS, precision, hbm, "layernorm",
                                       passes=2)),
        ("other", pointwise_descriptor(elements, residual, precision, hbm, "residual",
                                       passes=2 * RESIDUAL_PASSES)),
    ]


def qkv_kernels(tokens: int, model: ModelConfig, heads_local: int, kv_heads_local: int,
                precision: str, acc: AcceleratorSpec) -> Kernels:
    cols = (heads_local + 2 * kv_heads_local) * model.head_dim
    return [("attention_qkv", gemm_descriptor(tokens, cols, model.hidden_dim, precision, acc,
                                              name="qkv"))]


def proj_kernels(tokens: int, model: ModelConfig, heads_local: int, precision: str,
                 acc: AcceleratorSpec) -> Kernels:
    return [("attention_proj", gemm_descriptor(tokens, model.hidden_dim, heads_local * model.head_dim,
                                               precision, acc, name="attn_proj"))]


def mlp_kernels(tokens: int, model: ModelConfig, ffn_local: int, precision: str,
                acc: AcceleratorSpec, label: str = "mlp", batch: int = 1) -> Kernels:
    """Column-partitioned FFN1, local activation, row-partitioned FFN2."""
    up_cols = ffn_local * (2 if model.gated_mlp else 1)
    return [
        (label, gemm_descriptor(tokens, up_cols, model.hidden_dim, precision, acc, batch=batch,
                                name="ffn1")),
        (label, pointwise_descriptor(batch * tokens * ffn_local, GELU_FLOPS, precision,
                                     acc.hbm.name, "activation")),
        (label, gemm_descriptor(tokens, model.hidden_dim, ffn_local, precision, acc, batch=batch,
                                name="ffn2")),
    ]


def head_kernels(tokens: int, model: ModelConfig, tp: int, precision: str, acc: AcceleratorSpec,
                 training: bool, pp: int = 1) -> Kernels:
    """Embedding lookup plus vocabulary projection (and loss when training).

    With pipelining the embedding and the projection live on different stages,
    so only the heavier projection side bounds a stage.
    """
    hbm = acc.hbm.name
    # vocabulary is padded up to a multiple of tp
    vocab_local = math.ceil(model.vocab_size / tp)
    embed = ("other", pointwise_descriptor(tokens * model.hidden_dim, 0, precision, hbm, "embedding"))
    out = [("other", gemm_descriptor(tokens, vocab_local, model.hidden_dim, precision, acc,
                                     name="logits"))]
    if training:
        out.append(("other", pointwise_descriptor(tokens * vocab_local, SOFTMAX_FLOPS, LOSS_PRECISION,
                                                  hbm, "cross_entropy", passes=LOSS_PASSES)))
    return out if pp > 1 else [embed, *out]


def optimizer_kernel(params_local: float, acc: AcceleratorSpec, precision: str) -> Kernels:
    nbytes = params_local * OPTIMIZER_BYTES_PER_PARAM
    return [("optimizer", KernelDescriptor("adam_step", 0.0, {acc.hbm.name: nbytes}, precision))]
