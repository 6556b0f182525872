"""Mixture-of-experts layer time.

One MoE block replaces the MLP of a strided layer:

    gate -> all-to-all dispatch -> expert FFNs (TP-sharded) -> TP all-reduce
         -> all-to-all combine

Every expert owns a fixed buffer of C tokens per source device, so the
dispatched volume does not depend on how tokens are actually routed.
Load imbalance is not modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from llmpc.breakdown import TimeBreakdown
from llmpc.errors import ConfigError
from llmpc.kernels import mlp_kernels
from llmpc.network import CollectiveRequest, all_to_all_time, hierarchical_collective_time, \
    outermost_a2a_bandwidth
from llmpc.parallelism import DeviceShard, ParallelismConfig
from llmpc.roofline import SOFTMAX_FLOPS, KernelDescriptor, KernelTime, gemm_descriptor, \
    kernel_time, pointwise_descriptor
from llmpc.sysdesc import AcceleratorSpec, SystemSpec, bytes_per_element
from llmpc.workload import BACKWARD_FACTOR, ModelConfig

LOAD_IMBALANCE_NOTE = ("MoE load imbalance is not modelled; expert-parallel times are "
                       "optimistic at high expert and device counts.")


@dataclass(frozen=True)
class MoELayerPlan:
    experts: int
    experts_local: int
    capacity: int
    tokens_local: int
    hidden_dim: int
    precision: str
    gate_kernel: KernelDescriptor
    gate_softmax: KernelDescriptor
    expert_gemms: tuple[tuple[str, KernelDescriptor], ...]
    a2a_bytes: float
    tp_allreduce_bytes: float

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError("expert capacity must be >= 0")


def expert_capacity(tokens_local: int, experts: int, top_k: int = 1,
                    capacity_factor: float = 1.0) -> int:
    if experts < 1:
        raise ConfigError("expert_capacity: experts must be >= 1")
    if not capacity_factor > 0:
        raise ConfigError("expert_capacity: capacity_factor must be > 0")
    # rounding guard keeps exact quotients from drifting up by one
    return math.ceil(round(capacity_factor * top_k * tokens_local / experts, 9))


def gate_kernels(tokens: int, dim: int, experts: int, precision: str,
                 acc: AcceleratorSpec) -> tuple[KernelDescriptor, KernelDescriptor]:
    gemm = gemm_descriptor(tokens, experts, dim, precision, acc, name="gate_gemm")
    soft = pointwise_descriptor(tokens * experts, SOFTMAX_FLOPS, precision, acc.hbm.name,
                                "gate_softmax")
    return gemm, soft


def gating_time(tokens: int, dim: int, experts: int, acc: AcceleratorSpec,
                precision: str = "bf16") -> KernelTime:
    gemm, soft = gate_kernels(tokens, dim, experts, precision, acc)
    a, b = kernel_time(gemm, acc), kernel_time(soft, acc)
    return KernelTime(a.seconds + b.seconds, a.bound_by if a.seconds >= b.seconds else b.bound_by,
                      "gate")


def plan_moe_layer(model: ModelConfig, shard: DeviceShard, p: ParallelismConfig,
                   tokens_local: int, precision: str, acc: AcceleratorSpec,
                   token_split: int = 1) -> MoELayerPlan:
    """``tokens_local`` is one of ``token_split`` slices of the TP group's tokens.

    Routing and dispatch run on the slice; the TP-sharded experts need every
    slice back, so their GEMM rows grow by ``token_split``.
    """
    if model.moe is None:
        raise ConfigError(f"model {model.name!r} has no MoE configuration")
    moe = model.moe
    cap = expert_capacity(tokens_local, moe.num_experts, moe.top_k, moe.capacity_factor)
    b = bytes_per_element(precision)
    d_model = model.hidden_dim
    gemm, soft = gate_kernels(tokens_local, d_model, moe.num_experts, precision, acc)
    # each local expert receives C tokens from every member of the EP group
    expert_tokens = p.ep * cap * token_split
    gemms = tuple(mlp_kernels(max(1, expert_tokens), model, shard.ffn_cols_local, precision, acc,
                              label="expert_ffn", batch=shard.experts_local)) if cap else ()
    return MoELayerPlan(
        experts=moe.num_experts,
        experts_local=shard.experts_local,
        capacity=cap,
        tokens_local=tokens_local,
        hidden_dim=d_model,
        precision=precision,
        gate_kernel=gemm,
        gate_softmax=soft,
        expert_gemms=gemms,
        a2a_bytes=moe.num_experts * cap * d_model * b,
        tp_allreduce_bytes=tokens_local * d_model * b,
    )


def _forward(plan: MoELayerPlan, p: ParallelismConfig, net: SystemSpec,
             acc: AcceleratorSpec, compute_factor: float, comm_factor: float,
             out: TimeBreakdown) -> None:
    for desc in (plan.gate_kernel, plan.gate_softmax):
        out.add_kernel("gate", kernel_time(desc.scaled(compute_factor), acc))
    if p.ep > 1 and plan.a2a_bytes:
        bw = outermost_a2a_bandwidth(net, p.ep, stride=p.tp)
        a2a = all_to_all_time(plan.experts, plan.capacity, plan.hidden_dim, plan.precision, bw)
        out.add("a2a_dispatch", a2a.seconds * comm_factor, "network")
        out.add("a2a_combine", a2a.seconds * comm_factor, "network")
    else:
        out.add("a2a_dispatch", 0.0)
        out.add("a2a_combine", 0.0)
    for label, desc in plan.expert_gemms:
        out.add_kernel(label, kernel_time(desc.scaled(compute_factor), acc))
    if p.tp > 1:
        ar = hierarchical_collective_time(
            CollectiveRequest("all_reduce", plan.tp_allreduce_bytes, p.tp), net)
        out.add("tp_allreduce", ar.seconds * comm_factor, "network")
    else:
        out.add("tp_allreduce", 0.0)


def moe_layer_time(plan: MoELayerPlan, p: ParallelismConfig, net: SystemSpec,
                   acc: AcceleratorSpec, phase: str = "training",
                   recompute: bool = False) -> TimeBreakdown:
    """Time of one MoE block for one microbatch on one device.

    Backward costs the forward compute times the backward flop factor and
    repeats every collective once (gradients travel the reverse route).
    """
    out = TimeBreakdown(metadata={"capacity": plan.capacity, "experts_local": plan.experts_local})
    _forward(plan, p, net, acc, 1.0, 1.0, out)
    if phase == "training":
        _forward(plan, p, net, acc, BACKWARD_FACTOR, 1.0, out)
        if recompute:
            _forward(plan, p, net, acc, 1.0, 1.0, out)
    return out
