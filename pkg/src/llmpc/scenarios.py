"""Named configuration trees for the validation studies.

Each builder returns a plain config tree (the same shape a YAML file has),
so the CLI, the validation suite and the tests share one definition.
"""

from __future__ import annotations

from typing import Any

from llmpc.config import Config, config_from_tree

NVLINK3_LATENCY = 0.7e-6
NVSWITCH_DELAY = 0.3e-6
IB_HDR_BPS = 25.0e9
IB_LATENCY = 2.0e-6


def tree(accelerator: str, network: list[dict[str, Any]], model: str, run: dict[str, Any],
         parallelism: dict[str, Any], workload: dict[str, Any] | None = None,
         system: dict[str, Any] | None = None, cost: str | None = "placeholder") -> dict[str, Any]:
    out: dict[str, Any] = {
        "system": {"preset": accelerator, "network": network, **(system or {})},
        "workload": {"preset": model, **(workload or {})},
        "run": {**run, "parallelism": parallelism},
    }
    if cost:
        out["cost"] = {"library": cost}
    return out


def nvlink_node(size: int = 8, kind: str = "switch") -> dict[str, Any]:
    """One node; link bandwidth is derived from the accelerator's off-chip bandwidth."""
    level: dict[str, Any] = {"kind": kind, "size": size, "link_bandwidth_Bps": "auto",
                             "link_latency_s": NVLINK3_LATENCY}
    if kind == "switch":
        level["switch_delay_s"] = NVSWITCH_DELAY
    return level


def infiniband(nodes: int) -> dict[str, Any]:
    return {"kind": "switch", "size": nodes, "link_bandwidth_Bps": IB_HDR_BPS,
            "link_latency_s": IB_LATENCY, "switch_delay_s": NVSWITCH_DELAY}


def build(t: dict[str, Any]) -> Config:
    return config_from_tree(t)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

FA_TOKENS_PER_BATCH = 512 * 1024


def flash_validation(model: str, context: int, flash: bool, dp: int = 8, tp: int = 1,
                     accelerator: str = "a100-40gb", devices: int = 8,
                     batch: int | None = None) -> dict[str, Any]:
    """GPT2 data-parallel training with equal tokens per batch across contexts."""
    batch = FA_TOKENS_PER_BATCH // context if batch is None else batch
    micro = max(1, batch // dp // 8)
    return tree(accelerator, [nvlink_node(devices)], model,
                {"phase": "training", "batch": batch, "precision": "bf16",
                 "flash_attention": flash},
                {"dp": dp, "tp": tp, "microbatches": batch // dp // micro},
                workload={"context": context})


# second-level fabric scales with the generation (HDR, NDR, XDR class)
GENERATION_IB_BPS = {"a100-40gb": 25.0e9, "h100": 50.0e9, "b200": 100.0e9}


def flash_generations(batch: int, accelerator: str = "h100", flash: bool = False,
                      model: str = "gpt2-xl", context: int = 2048) -> dict[str, Any]:
    """Two 8-device nodes, data parallel over all 16 devices."""
    t = flash_validation(model, context, flash, dp=16, accelerator=accelerator, devices=8,
                         batch=batch)
    fabric = infiniband(2)
    fabric["link_bandwidth_Bps"] = GENERATION_IB_BPS[accelerator]
    t["system"]["network"].append(fabric)
    return t


def megatron_145b(flash: bool = False) -> dict[str, Any]:
    return tree("a100-80gb", [nvlink_node(8), infiniband(32)], "megatron-145b",
                {"phase": "training", "batch": 192, "precision": "bf16", "tokens": 300.0e9,
                 "recompute": True, "flash_attention": flash},
                {"dp": 8, "tp": 8, "pp": 4, "sp": 8, "microbatches": 8})


def moe_139b(flash: bool = False) -> dict[str, Any]:
    t = tree("a100-80gb", [nvlink_node(8), infiniband(32)], "moe-139b",
             {"phase": "training", "batch": 512, "precision": "bf16", "tokens": 300.0e9,
              "recompute": True, "flash_attention": flash},
             {"dp": 32, "tp": 8, "pp": 1, "microbatches": 16})
    return t


def summit_moe(gpus: int, experts: int | None = None) -> dict[str, Any]:
    """GPT3-6.7B base with one expert per expert-parallel rank, TP=4 inside a node."""
    dp = gpus // 4
    experts = dp if experts is None else experts
    network = [{"kind": "switch", "size": 4, "link_bandwidth_Bps": 50.0e9,
                "link_latency_s": 1.0e-6, "switch_delay_s": 0.3e-6}]
    if dp > 1:
        network.append({"kind": "switch", "size": dp, "link_bandwidth_Bps": 25.0e9,
                        "link_latency_s": IB_LATENCY, "switch_delay_s": NVSWITCH_DELAY})
    return tree("v100", network, "gpt3-6.7b",
                {"phase": "training", "batch": 1024, "precision": "fp16"},
                {"dp": dp, "tp": 4, "microbatches": 1024 // dp},
                workload={"name": "GPT3-6.7B-MoE",
                          "moe": {"experts": experts, "top_k": 1, "capacity_factor": 1.0,
                                  "stride": 2}})


TOPOLOGY_SHAPES = {8: (2, 4), 16: (4, 4)}


def topology_inference(kind: str, devices: int) -> dict[str, Any]:
    level = nvlink_node(devices, kind)
    if kind == "mesh2d":
        level["mesh_rows"], level["mesh_cols"] = TOPOLOGY_SHAPES[devices]
    return tree("a100-80gb", [level], "llama-70b",
                {"phase": "inference_prefill", "batch": 8, "precision": "bf16",
                 "gen_tokens": 1, "flash_attention": True},
                {"tp": devices, "sp": 1})


HBM_VARIANTS = (
    ("A100-4HBMs", 4, 1.0), ("A100-5HBMs", 5, 1.0), ("A100-6HBMs", 6, 1.0),
    ("A100-8HBMs", 8, 1.0), ("HA100-3HBMs", 3, 0.5), ("HA100-4HBMs", 4, 0.5),
    ("HA100-6HBMs", 6, 0.5),
)
HBM_BASELINE = "A100-5HBMs"


def _dgx_cluster(nodes: int) -> list[dict[str, Any]]:
    return [nvlink_node(8), infiniband(nodes)]


def hbm_training(hbm_stacks: int, die_scale: float) -> dict[str, Any]:
    return tree("a100-80gb", _dgx_cluster(128), "gpt3-175b",
                {"phase": "training", "batch": 256, "precision": "bf16", "tokens": 300.0e9,
                 "recompute": True},
                {"dp": 16, "tp": 8, "pp": 8, "sp": 8, "microbatches": 16},
                system={"variant": {"hbm_stacks": hbm_stacks, "logic_die_scale": die_scale}})


def hbm_inference(hbm_stacks: int, die_scale: float) -> dict[str, Any]:
    return tree("a100-80gb", _dgx_cluster(128), "gpt3-175b",
                {"phase": "inference_decode", "batch": 32, "precision": "bf16",
                 "gen_tokens": 256, "requests": 1.0e9},
                {"dp": 1, "tp": 8, "pp": 1, "sp": 8},
                system={"variant": {"hbm_stacks": hbm_stacks, "logic_die_scale": die_scale}})
