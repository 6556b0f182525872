"""End-to-end training and inference predictions.

Every time below is for one device.  Training composes one transformer layer
per microbatch (forward, backward and optional recompute), multiplies by the
layers of a pipeline stage, runs the stage through the pipeline schedule and
adds the data-parallel gradient all-reduce.  Nothing overlaps.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

from llmpc.attention import AttentionShape, attention_core_time
from llmpc.breakdown import TimeBreakdown
from llmpc.errors import ConfigError
from llmpc.kernels import Kernels, head_kernels, mlp_kernels, norm_and_residual, \
    optimizer_kernel, proj_kernels, qkv_kernels
from llmpc.moe import LOAD_IMBALANCE_NOTE, moe_layer_time, plan_moe_layer
from llmpc.network import CollectiveRequest, collective_time, hierarchical_collective_time, \
    p2p_level
from llmpc.parallelism import DeviceShard, ParallelismConfig, local_params, memory_breakdown, \
    pipeline_time, shard_workload, validate_parallelism
from llmpc.roofline import KernelDescriptor, kernel_time
from llmpc.sysdesc import AcceleratorSpec, SystemSpec
from llmpc.workload import BACKWARD_FACTOR, ModelConfig, RunConfig, dense_params, expert_params, \
    flops_per_token, layer_forward_flops_per_token

# all-reduces per transformer layer per pass (attention block + MLP block)
TP_COLLECTIVES_PER_LAYER = 2
ATTENTION_LABELS = ("attention_qkv", "attention_core", "attention_proj")
COMM_LABELS = ("tp_comm", "tp_allreduce", "a2a_dispatch", "a2a_combine", "pp_p2p", "dp_comm")
CSV_COLUMNS = ("fingerprint", "label", "phase", "iteration_time_s", "epoch_or_serving_time_s",
               "tflops_per_device", "memory_per_device_bytes", "feasible", "cost",
               "combined_metric")
CSV_SCHEMA_VERSION = 1


@dataclass
class PredictionReport:
    phase: str
    iteration_time: float
    epoch_or_serving_time: float
    tflops_per_device: float
    memory_per_device: float
    breakdown: TimeBreakdown
    feasible: bool
    memory_breakdown: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def attention_time(self) -> float:
        return self.breakdown.sum_of(ATTENTION_LABELS)

    @property
    def communication_time(self) -> float:
        return self.breakdown.sum_of(COMM_LABELS)

    def to_dict(self) -> dict[str, Any]:
        return {
            "phase": self.phase,
            "iteration_time_s": self.iteration_time,
            "epoch_or_serving_time_s": self.epoch_or_serving_time,
            "tflops_per_device": self.tflops_per_device,
            "memory_per_device_bytes": self.memory_per_device,
            "memory_breakdown": dict(self.memory_breakdown),
            "feasible": self.feasible,
            "breakdown": self.breakdown.to_dict(),
            "metadata": dict(self.metadata),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _kv_local(shard: DeviceShard) -> int:
    return math.gcd(shard.heads_local, shard.kv_heads_local)


def _add_kernels(out: TimeBreakdown, kernels: Kernels, system: SystemSpec,
                 factor: float = 1.0) -> None:
    acc = system.accelerator
    for label, desc in kernels:
        out.add_kernel(label, kernel_time(desc.scaled(factor) if factor != 1.0 else desc, acc))


def _tp_allreduce(tokens: int, model: ModelConfig, p: ParallelismConfig, run: RunConfig,
                  system: SystemSpec) -> float:
    if p.tp == 1:
        return 0.0
    nbytes = tokens * model.hidden_dim * run.bytes_per_element
    # reduce-scatter + all-gather under SP costs the same as the all-reduce it replaces
    return hierarchical_collective_time(CollectiveRequest("all_reduce", nbytes, p.tp), system).seconds


def layer_time(model: ModelConfig, shard: DeviceShard, p: ParallelismConfig, run: RunConfig,
               system: SystemSpec, flash: bool, *, batch: int, q_len: int, kv_len: int,
               moe_layer: bool = False, training: bool = True,
               recompute: bool = False) -> TimeBreakdown:
    """One transformer layer on ``batch`` sequences of ``q_len`` new tokens."""
    acc = system.accelerator
    prec = run.precision
    tokens = batch * q_len
    kv_local = _kv_local(shard)
    fwd: Kernels = []
    fwd += norm_and_residual(tokens, model, p.sp, prec, acc, training)
    fwd += qkv_kernels(tokens, model, shard.heads_local, kv_local, prec, acc)
    fwd += proj_kernels(tokens, model, shard.heads_local, prec, acc)
    if not moe_layer:
        fwd += mlp_kernels(tokens, model, shard.ffn_cols_local, prec, acc)
    if not training:
        # append this step's keys and values to the cache
        kv_bytes = 2 * tokens * kv_local * model.head_dim * run.bytes_per_element
        fwd.append(("kv_cache", KernelDescriptor("kv_write", 0.0, {acc.hbm.name: kv_bytes}, prec)))

    out = TimeBreakdown()
    passes = [1.0]
    if training:
        passes.append(BACKWARD_FACTOR)
        if recompute:
            passes.append(1.0)
    for factor in passes:
        _add_kernels(out, fwd, system, factor)

    shape = AttentionShape(batch, kv_len, shard.heads_local, kv_local, model.head_dim, prec,
                           q_len=q_len)
    core = attention_core_time(shape, acc, "training" if training else "inference_prefill",
                               flash, recompute and training)
    for label, seconds in core.components.items():
        out.add("attention_core", seconds, core.bound_tags.get(label))

    collectives = TP_COLLECTIVES_PER_LAYER - (1 if moe_layer else 0)
    ar = _tp_allreduce(tokens, model, p, run, system)
    out.add("tp_comm", ar * collectives * len(passes), "network")

    if moe_layer:
        tokens_local = tokens // p.sp if training else tokens
        split = p.sp if training else 1
        plan = plan_moe_layer(model, shard, p, max(1, tokens_local), prec, acc, split)
        out.merge(moe_layer_time(plan, p, system, acc, "training" if training else "inference",
                                 recompute and training))
    return out


def device_gemm_flops(model: ModelConfig, p: ParallelismConfig, run: RunConfig,
                      acc: AcceleratorSpec) -> float:
    """Forward GEMM flops of the transformer layers one device executes per iteration.

    The vocabulary head is excluded because its padding to a multiple of tp
    adds flops that no unsharded model performs.
    """
    shard = shard_workload(p, model, run)
    tokens = shard.microbatch * model.context_length
    kv_local = _kv_local(shard)
    per_layer = qkv_kernels(tokens, model, shard.heads_local, kv_local, run.precision, acc)
    per_layer += proj_kernels(tokens, model, shard.heads_local, run.precision, acc)
    dense = mlp_kernels(tokens, model, shard.ffn_cols_local, run.precision, acc)
    moe_layers = model.num_moe_layers / p.pp
    total = shard.layers_per_stage * sum(k.flops for name, k in per_layer if k.name != "activation")
    total += (shard.layers_per_stage - moe_layers) * sum(
        k.flops for _, k in dense if k.name != "activation")
    if moe_layers:
        plan = plan_moe_layer(model, shard, p, max(1, tokens // p.sp), run.precision, acc, p.sp)
        total += moe_layers * sum(k.flops for _, k in plan.expert_gemms if k.name != "activation")
    return total * p.microbatches


def dense_mlp_block_time(model: ModelConfig, shard: DeviceShard, p: ParallelismConfig,
                         run: RunConfig, system: SystemSpec, tokens: int,
                         training: bool = True) -> float:
    """Time of the dense MLP block plus its all-reduce; the MoE block replaces exactly this."""
    out = TimeBreakdown()
    factors = [1.0, BACKWARD_FACTOR] if training else [1.0]
    for factor in factors:
        _add_kernels(out, mlp_kernels(tokens, model, shard.ffn_cols_local, run.precision,
                                      system.accelerator), system, factor)
    return out.total + _tp_allreduce(tokens, model, p, run, system) * len(factors)


def _head_time(model: ModelConfig, p: ParallelismConfig, run: RunConfig, system: SystemSpec,
               tokens: int, training: bool) -> TimeBreakdown:
    out = TimeBreakdown()
    kernels = head_kernels(tokens, model, p.tp, run.precision, system.accelerator, training, p.pp)
    _add_kernels(out, kernels, system)
    if training:
        _add_kernels(out, kernels, system, BACKWARD_FACTOR)
    return out


def _p2p_time(nbytes: float, p: ParallelismConfig, system: SystemSpec) -> float:
    if p.pp == 1:
        return 0.0
    topo = p2p_level(system, p.tp * p.dp)
    return collective_time(CollectiveRequest("p2p", nbytes, 2, topo)).seconds


def _stage_time(model: ModelConfig, shard: DeviceShard, p: ParallelismConfig, run: RunConfig,
                system: SystemSpec, flash: bool, *, batch: int, q_len: int, kv_len: int,
                training: bool, head_tokens: int) -> TimeBreakdown:
    recompute = run.activation_recompute and training
    kwargs = dict(batch=batch, q_len=q_len, kv_len=kv_len, training=training, recompute=recompute)
    stage = TimeBreakdown()
    moe_layers = model.num_moe_layers / p.pp
    dense_layers = shard.layers_per_stage - moe_layers
    if dense_layers:
        stage.merge(layer_time(model, shard, p, run, system, flash, **kwargs), dense_layers)
    if moe_layers:
        stage.merge(layer_time(model, shard, p, run, system, flash, moe_layer=True, **kwargs),
                    moe_layers)
    stage.merge(_head_time(model, p, run, system, head_tokens, training))
    act_bytes = batch * q_len * model.hidden_dim * run.bytes_per_element
    sends = 2 if training else 1
    stage.add("pp_p2p", sends * _p2p_time(act_bytes, p, system), "network")
    return stage


def _memory(p: ParallelismConfig, model: ModelConfig, run: RunConfig, system: SystemSpec,
            flash: bool) -> tuple[dict[str, float], float, bool]:
    mem = memory_breakdown(p, model, run, flash)
    total = sum(mem.values())
    return mem, total, total <= system.accelerator.hbm.capacity


def _check_peak(tflops: float, system: SystemSpec, run: RunConfig) -> None:
    peak = system.accelerator.peak(run.precision)
    assert tflops <= peak * (1 + 1e-9), f"achieved {tflops:.4g} flop/s exceeds peak {peak:.4g}"


def _prepare(system: SystemSpec, model: ModelConfig, run: RunConfig, p: ParallelismConfig):
    validate_parallelism(p, p.devices, model, run)
    if p.devices > system.total_devices:
        raise ConfigError(f"run.parallelism needs {p.devices} devices, system has {system.total_devices}")
    return shard_workload(p, model, run)


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------

def predict_training(system: SystemSpec, model: ModelConfig, run: RunConfig,
                     parallelism: ParallelismConfig, flash: bool | None = None) -> PredictionReport:
    if not run.is_training:
        raise ConfigError(f"predict_training needs phase 'training', got {run.phase!r}")
    flash = run.flash_attention if flash is None else flash
    p = parallelism
    shard = _prepare(system, model, run, p)
    seq = model.context_length
    stage = _stage_time(model, shard, p, run, system, flash, batch=shard.microbatch, q_len=seq,
                        kv_len=seq, training=True, head_tokens=shard.microbatch * seq)
    makespan, bubble = pipeline_time(stage.total, p.microbatches, p.pp, p.schedule)

    out = stage.scaled(p.microbatches)
    out.add("pipeline_bubble", makespan - p.microbatches * stage.total, "pipeline")
    b = run.bytes_per_element
    dp_comm = 0.0
    if p.dp > 1:
        dense_bytes = dense_params(model) / (p.tp * p.pp) * b
        dp_comm += hierarchical_collective_time(
            CollectiveRequest("all_reduce", dense_bytes, p.dp, stride=p.tp), system).seconds
    if model.moe is not None and p.dp_exp > 1:
        exp_bytes = expert_params(model) / (p.tp * p.pp * p.ep) * b
        dp_comm += hierarchical_collective_time(
            CollectiveRequest("all_reduce", exp_bytes, p.dp_exp, stride=p.tp * p.ep),
            system).seconds
    out.add("dp_comm", dp_comm, "network")
    _add_kernels(out, optimizer_kernel(local_params(p, model), system.accelerator, run.precision),
                 system)

    iteration = out.total
    tokens = run.global_batch * seq
    model_flops = flops_per_token(model, "training", run.activation_recompute) * tokens
    tflops = model_flops / (iteration * p.devices) if iteration > 0 else 0.0
    _check_peak(tflops, system, run)
    iterations = 1.0 if run.tokens_to_train is None else run.tokens_to_train / tokens
    mem, mem_total, feasible = _memory(p, model, run, system, flash)
    out.metadata.update({"flash_attention": flash, "bubble_fraction": bubble,
                         "stage_time_s": stage.total, "iterations": iterations,
                         "time_per_token_s": iteration / tokens})
    notes = [LOAD_IMBALANCE_NOTE] if model.moe is not None else []
    return PredictionReport("training", iteration, iterations * iteration, tflops, mem_total, out,
                            feasible, mem, {**out.metadata, "devices": p.devices,
                                            "accelerator": system.accelerator.name,
                                            "model": model.name}, notes)


def _inference_flops(model: ModelConfig, batch: int, prompt: int, steps: int, kv_len: int) -> float:
    head = 2 * model.hidden_dim * model.vocab_size
    layers_prompt = model.num_layers * layer_forward_flops_per_token(model, prompt)
    layers_decode = model.num_layers * layer_forward_flops_per_token(model, kv_len)
    # logits are produced for the final prompt position only
    return batch * (prompt * layers_prompt + head) + steps * batch * (layers_decode + head)


def predict_inference(system: SystemSpec, model: ModelConfig, run: RunConfig,
                      parallelism: ParallelismConfig, requests: float | None = None,
                      flash: bool | None = None) -> PredictionReport:
    """Prefill over the prompt, then ``gen_tokens`` decode steps at full cache length.

    ``inference_prefill`` stops after the prefill.  The prompt is the context
    minus the generated tokens.
    """
    if run.is_training:
        raise ConfigError("predict_inference needs an inference phase")
    flash = run.flash_attention if flash is None else flash
    requests = run.requests if requests is None else requests
    p = parallelism
    shard = _prepare(system, model, run, p)
    gen = run.gen_tokens if run.phase == "inference_decode" else 0
    ctx = model.context_length
    prompt = max(1, ctx - run.gen_tokens)
    batch = shard.batch_local
    kwargs = dict(training=False, head_tokens=batch)
    prefill = _stage_time(model, shard, p, run, system, flash, batch=batch, q_len=prompt,
                          kv_len=prompt, **kwargs)
    out = prefill.scaled(p.pp)
    decode = None
    if gen:
        decode = _stage_time(model, shard, p, run, system, flash, batch=batch, q_len=1,
                             kv_len=ctx, **kwargs)
        out.merge(decode, gen * p.pp)
    latency = out.total
    replicas = system.total_devices // p.devices
    throughput = run.global_batch / latency * replicas if latency > 0 else math.inf
    serving = requests / throughput if requests else 0.0
    flops = _inference_flops(model, run.global_batch, prompt, gen, ctx)
    tflops = flops / (latency * p.devices) if latency > 0 else 0.0
    _check_peak(tflops, system, run)
    mem, mem_total, feasible = _memory(p, model, run, system, flash)
    out.metadata.update({"flash_attention": flash, "prefill_time_s": prefill.total * p.pp,
                         "decode_step_time_s": decode.total * p.pp if decode else 0.0,
                         "prompt_tokens": prompt, "generated_tokens": gen,
                         "replicas": replicas, "requests": requests,
                         "throughput_seq_per_s": throughput})
    notes = [LOAD_IMBALANCE_NOTE] if model.moe is not None else []
    return PredictionReport(run.phase, latency, serving, tflops, mem_total, out, feasible, mem,
                            {**out.metadata, "devices": p.devices,
                             "accelerator": system.accelerator.name, "model": model.name},
                            notes)


def predict(system: SystemSpec, model: ModelConfig, run: RunConfig,
            parallelism: ParallelismConfig, flash: bool | None = None) -> PredictionReport:
    if run.is_training:
        return predict_training(system, model, run, parallelism, flash)
    return predict_inference(system, model, run, parallelism, flash=flash)


def combined_metric(train_time: float, infer_time: float, baseline_train: float,
                    baseline_infer: float, weight: float = 0.5) -> float:
    if not baseline_train > 0 or not baseline_infer > 0:
        raise ConfigError("combined_metric: baselines must be > 0")
    if not 0.0 <= weight <= 1.0:
        raise ConfigError("combined_metric: weight must lie in [0, 1]")
    return weight * (train_time / baseline_train) + (1 - weight) * (infer_time / baseline_infer)


def with_flash(run: RunConfig, flash: bool) -> RunConfig:
    return replace(run, flash_attention=flash)


def csv_row(report: PredictionReport, fingerprint: str, label: str = "",
            cost: float | None = None, metric: float | None = None) -> dict[str, Any]:
    return {
        "fingerprint": fingerprint,
        "label": label,
        "phase": report.phase,
        "iteration_time_s": repr(report.iteration_time),
        "epoch_or_serving_time_s": repr(report.epoch_or_serving_time),
        "tflops_per_device": repr(report.tflops_per_device),
        "memory_per_device_bytes": repr(report.memory_per_device),
        "feasible": str(report.feasible).lower(),
        "cost": "" if cost is None else repr(cost),
        "combined_metric": "" if metric is None else repr(metric),
    }


def rows_to_csv(rows: list[dict[str, Any]], columns: tuple[str, ...] = CSV_COLUMNS,
                notes: list[str] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    for note in notes or []:
        buf.write(f"# {note}\n")
    return buf.getvalue()
