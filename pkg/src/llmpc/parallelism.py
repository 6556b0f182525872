"""5D parallelism: validation, per-device sharding, pipeline schedules, memory footprint."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Mapping

from llmpc.errors import ConfigError, MemoryOverflowError, ParallelismError
from llmpc.sysdesc import AcceleratorSpec
from llmpc.workload import ModelConfig, RunConfig, dense_params, expert_params

SCHEDULES = ("gpipe", "pipedream_flush")

# mixed-precision Adam: fp32 master weights plus two fp32 moments
ADAM_MIXED_BYTES = 12
ADAM_FP32_BYTES = 8
# per-layer stored activations, in units of tokens*hidden bytes at 2-byte precision
ACT_LINEAR_COEF = 34
ACT_SCORE_COEF = 5


@dataclass(frozen=True)
class ParallelismConfig:
    dp: int = 1
    tp: int = 1
    pp: int = 1
    sp: int = 1
    ep: int | None = None
    dp_exp: int = 1
    microbatches: int = 1
    schedule: str = "pipedream_flush"

    def __post_init__(self):
        if self.ep is None:
            object.__setattr__(self, "ep", self.dp // self.dp_exp if self.dp % self.dp_exp == 0
                               else 0)

    @property
    def devices(self) -> int:
        return self.tp * self.dp * self.pp


@dataclass(frozen=True)
class DeviceShard:
    layers_per_stage: int
    heads_local: int
    kv_heads_local: int
    ffn_cols_local: int
    experts_local: int
    seq_local: int
    batch_local: int
    microbatch: int


def validate_parallelism(p: ParallelismConfig, devices: int, model: ModelConfig,
                         run: RunConfig) -> ParallelismConfig:
    for key in ("dp", "tp", "pp", "sp", "ep", "dp_exp", "microbatches"):
        if getattr(p, key) < 1:
            raise ParallelismError(f"parallelism.{key} must be >= 1 (got {getattr(p, key)})")
    if p.schedule not in SCHEDULES:
        raise ParallelismError(
            f"unsupported schedule {p.schedule!r}; supported: {', '.join(SCHEDULES)}")
    if p.tp * p.ep * p.dp_exp != p.tp * p.dp:
        raise ParallelismError(
            f"TED identity violated: tp*ep*dp_exp = {p.tp}*{p.ep}*{p.dp_exp} != tp*dp = {p.tp}*{p.dp}")
    if p.tp * p.dp * p.pp != devices:
        raise ParallelismError(
            f"device count mismatch: tp*dp*pp = {p.tp * p.dp * p.pp} != devices = {devices}")
    if p.sp > p.tp or p.tp % p.sp:
        raise ParallelismError(f"sp={p.sp} must divide tp={p.tp}")
    if model.num_heads % p.tp:
        raise ParallelismError(f"heads % tp != 0 ({model.num_heads} % {p.tp})")
    if model.ffn_dim % p.tp:
        raise ParallelismError(f"ffn % tp != 0 ({model.ffn_dim} % {p.tp})")
    if model.num_layers % p.pp:
        raise ParallelismError(f"layers % pp != 0 ({model.num_layers} % {p.pp})")
    if model.moe is not None and model.moe.num_experts % p.ep:
        raise ParallelismError(f"experts % ep != 0 ({model.moe.num_experts} % {p.ep})")
    if run.global_batch % (p.dp * p.microbatches):
        raise ParallelismError(
            f"batch % (dp*microbatches) != 0 ({run.global_batch} % {p.dp * p.microbatches})")
    if model.context_length % p.sp:
        raise ParallelismError(f"context % sp != 0 ({model.context_length} % {p.sp})")
    return p


def shard_workload(p: ParallelismConfig, model: ModelConfig, run: RunConfig) -> DeviceShard:
    batch_local = run.global_batch // p.dp
    return DeviceShard(
        layers_per_stage=model.num_layers // p.pp,
        heads_local=model.num_heads // p.tp,
        # KV heads are replicated once tp exceeds their count
        kv_heads_local=max(1, model.kv_heads // p.tp),
        ffn_cols_local=model.ffn_dim // p.tp,
        experts_local=model.moe.num_experts // p.ep if model.moe else 0,
        seq_local=model.context_length // p.sp,
        batch_local=batch_local,
        microbatch=batch_local // p.microbatches,
    )


def pipeline_time(stage_time: float, m: int, p_stages: int,
                  schedule: str = "pipedream_flush") -> tuple[float, float]:
    """Makespan and bubble fraction of a flush-based pipeline with equal stages."""
    if m < 1 or p_stages < 1:
        raise ConfigError("pipeline_time needs m >= 1 and p_stages >= 1")
    if schedule not in SCHEDULES:
        raise ParallelismError(f"unsupported schedule {schedule!r}")
    slots = m + p_stages - 1
    return slots * stage_time, (p_stages - 1) / slots


def in_flight_microbatches(p: ParallelismConfig) -> int:
    if p.pp == 1:
        return 1
    if p.schedule == "gpipe":
        return p.microbatches
    return min(p.microbatches, p.pp)


def local_params(p: ParallelismConfig, model: ModelConfig) -> float:
    return dense_params(model) / (p.tp * p.pp) + expert_params(model) / (p.tp * p.pp * p.ep)


def memory_breakdown(p: ParallelismConfig, model: ModelConfig, run: RunConfig,
                     flash: bool | None = None) -> dict[str, float]:
    flash = run.flash_attention if flash is None else flash
    b = run.bytes_per_element
    shard = shard_workload(p, model, run)
    params = local_params(p, model)
    out = {"weights": params * b}
    d_model = model.hidden_dim
    if run.is_training:
        out["gradients"] = params * b
        out["optimizer"] = params * (ADAM_MIXED_BYTES if b < 4 else ADAM_FP32_BYTES)
        tokens = shard.microbatch * model.context_length
        score = 0 if flash else ACT_SCORE_COEF * model.num_heads * model.context_length / d_model
        # sequence parallelism shards the remaining activations across the tp group
        full_layer = tokens * d_model * (ACT_LINEAR_COEF + score) * (b / 2) / p.tp
        if run.activation_recompute:
            stored = tokens * d_model * b / p.sp
            acts = in_flight_microbatches(p) * shard.layers_per_stage * stored + full_layer
        else:
            acts = in_flight_microbatches(p) * shard.layers_per_stage * full_layer
        out["activations"] = acts
    else:
        seq = model.context_length
        out["kv_cache"] = (2 * shard.layers_per_stage * shard.kv_heads_local * model.head_dim
                           * seq * shard.batch_local * b)
        prompt = max(1, model.context_length - run.gen_tokens)
        tokens = shard.batch_local * prompt
        # residual stream (sp-sharded), local q/k/v columns and local ffn columns, double buffered
        qkv_local = (shard.heads_local + 2 * shard.kv_heads_local) * model.head_dim
        work = 2 * tokens * (d_model / p.sp + qkv_local + shard.ffn_cols_local) * b
        if not flash:
            work += shard.batch_local * shard.heads_local * prompt * prompt * b
        out["activations"] = work
    return out


def memory_footprint(p: ParallelismConfig, model: ModelConfig, run: RunConfig,
                     acc: AcceleratorSpec, flash: bool | None = None) -> float:
    breakdown = memory_breakdown(p, model, run, flash)
    total = sum(breakdown.values())
    capacity = acc.hbm.capacity
    if total > capacity:
        parts = ", ".join(f"{k}={v / 1e9:.2f} GB" for k, v in breakdown.items())
        raise MemoryOverflowError(
            f"memory overflow: {total / 1e9:.2f} GB needed > {capacity / 1e9:.2f} GB ({parts})",
            breakdown, capacity)
    return total


def parallelism_from_dict(tree: Mapping[str, Any] | None) -> ParallelismConfig:
    tree = dict(tree or {})
    ints = {}
    for key in ("dp", "tp", "pp", "sp", "ep", "dp_exp", "microbatches"):
        if tree.get(key) is not None:
            try:
                ints[key] = int(tree[key])
            except (TypeError, ValueError):
                raise ConfigError(f"run.parallelism.{key}: expected integer") from None
    schedule = str(tree.get("schedule", "pipedream_flush")).lower().replace("-", "_")
    return ParallelismConfig(schedule=schedule, **ints)


def parallelism_to_dict(p: ParallelismConfig) -> dict[str, Any]:
    return {"dp": p.dp, "tp": p.tp, "pp": p.pp, "sp": p.sp, "ep": p.ep, "dp_exp": p.dp_exp,
            "microbatches": p.microbatches, "schedule": p.schedule}


def with_degrees(p: ParallelismConfig, **changes) -> ParallelismConfig:
    """Copy with new degrees; ep follows dp unless set explicitly."""
    if "dp" in changes and "ep" not in changes:
        changes["ep"] = None
    return replace(p, **changes)
