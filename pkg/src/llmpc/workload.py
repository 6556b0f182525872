"""Transformer workload descriptions and the counting primitives built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from llmpc.errors import ConfigError
from llmpc.sysdesc import PRECISION_BYTES, bytes_per_element

PHASES = ("training", "inference_prefill", "inference_decode")

# forward + backward (2x forward); one extra forward over the layers if recomputing
BACKWARD_FACTOR = 2.0
RECOMPUTE_FACTOR = 1.0


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int
    top_k: int = 1
    capacity_factor: float = 1.0
    stride: int = 2

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError("moe.experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError("moe.top_k must satisfy 1 <= top_k <= experts")
        if not self.capacity_factor > 0:
            raise ConfigError("moe.capacity_factor must be > 0")
        if self.stride < 1:
            raise ConfigError("moe.stride must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    context_length: int
    kv_heads: int | None = None
    gated_mlp: bool = False
    moe: MoEConfig | None = None

    def __post_init__(self):
        if self.kv_heads is None:
            object.__setattr__(self, "kv_heads", self.num_heads)
        if self.num_layers < 0:
            raise ConfigError("workload.layers must be >= 0")
        for key in ("hidden_dim", "num_heads", "kv_heads", "ffn_dim", "vocab_size", "context_length"):
            if getattr(self, key) < 1:
                raise ConfigError(f"workload.{key} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("workload.hidden must be a multiple of workload.heads")
        if self.num_heads % self.kv_heads:
            raise ConfigError("workload.kv_heads must divide workload.heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def num_moe_layers(self) -> int:
        return 0 if self.moe is None else self.num_layers // self.moe.stride

    def is_moe_layer(self, index: int) -> bool:
        """Zero-based layer index; MoE replaces the MLP of every ``stride``-th layer."""
        return self.moe is not None and (index + 1) % self.moe.stride == 0


@dataclass(frozen=True)
class RunConfig:
    phase: str = "training"
    global_batch: int = 1
    precision: str = "bf16"
    tokens_to_train: float | None = None
    activation_recompute: bool = False
    flash_attention: bool = False
    gen_tokens: int = 1
    requests: float = 0.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"run.phase must be one of {PHASES}, got {self.phase!r}")
        if self.global_batch < 1:
            raise ConfigError("run.batch must be >= 1")
        if self.precision not in PRECISION_BYTES:
            raise ConfigError(f"run.precision: unknown precision {self.precision!r}")
        if self.gen_tokens < 0 or self.requests < 0:
            raise ConfigError("run.gen_tokens and run.requests must be >= 0")

    @property
    def bytes_per_element(self) -> int:
        return bytes_per_element(self.precision)

    @property
    def is_training(self) -> bool:
        return self.phase == "training"


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------

def attention_params(model: ModelConfig) -> int:
    """Q and output projections D x D; K and V span kv_heads * head_dim columns."""
    d_model = model.hidden_dim
    return 2 * d_model * d_model + 2 * d_model * model.kv_heads * model.head_dim


def mlp_params(model: ModelConfig) -> int:
    matrices = 3 if model.gated_mlp else 2
    return matrices * model.hidden_dim * model.ffn_dim


def embedding_params(model: ModelConfig) -> int:
    return model.vocab_size * model.hidden_dim


def expert_params(model: ModelConfig) -> int:
    """Parameters that live in expert FFNs (all experts, all MoE layers)."""
    if model.moe is None:
        return 0
    return model.num_moe_layers * model.moe.num_experts * mlp_params(model)


def dense_params(model: ModelConfig) -> int:
    """Everything replicated across the data-parallel group (non-expert weights, gates)."""
    dense_mlp_layers = model.num_layers - model.num_moe_layers
    gate = 0 if model.moe is None else model.num_moe_layers * model.hidden_dim * model.moe.num_experts
    return (model.num_layers * attention_params(model) + dense_mlp_layers * mlp_params(model)
            + gate + embedding_params(model))


def param_count(model: ModelConfig) -> int:
    return dense_params(model) + expert_params(model)


# ---------------------------------------------------------------------------
# flop counts
# ---------------------------------------------------------------------------

def layer_forward_flops_per_token(model: ModelConfig, seq_len: int | None = None) -> float:
    """Average forward flops per token of one transformer layer (MoE layers amortized)."""
    if model.num_layers == 0:
        return 0.0
    n = model.context_length if seq_len is None else seq_len
    attn = 2 * attention_params(model) + 4 * n * model.hidden_dim
    active = model.moe.top_k if model.moe else 1
    mlp_total = 2 * mlp_params(model) * (
        model.num_layers - model.num_moe_layers + active * model.num_moe_layers)
    return attn + mlp_total / model.num_layers


def flops_per_token(model: ModelConfig, phase: str = "training", activation_recompute: bool = False,
                    seq_len: int | None = None) -> float:
    """Model flops per token; gating is excluded so the count is invariant in expert count."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    layers = model.num_layers * layer_forward_flops_per_token(model, seq_len)
    head = 2 * model.hidden_dim * model.vocab_size
    forward = layers + head
    if phase != "training":
        return forward
    total = forward * (1 + BACKWARD_FACTOR)
    if activation_recompute:
        total += layers * RECOMPUTE_FACTOR
    return total


def kv_cache_bytes(model: ModelConfig, run: RunConfig, seq_len: int, batch: int | None = None) -> int:
    if run.is_training:
        raise ConfigError("kv_cache_bytes is only defined for inference phases")
    b = run.global_batch if batch is None else batch
    return (2 * model.num_layers * model.kv_heads * model.head_dim * seq_len * b
            * run.bytes_per_element)


# ---------------------------------------------------------------------------
# dict -> config
# ---------------------------------------------------------------------------

def _get(tree: Mapping[str, Any], key: str, path: str, cast=int, default: Any = ...):
    if key not in tree or tree[key] is None:
        if default is ...:
            raise ConfigError(f"missing required key {path}.{key}")
        return default
    try:
        value = cast(float(tree[key])) if cast is int else cast(tree[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: cannot interpret {tree[key]!r}") from None
    if cast is int and float(tree[key]) != value:
        raise ConfigError(f"{path}.{key}: expected an integer, got {tree[key]!r}")
    return value


def _bool(value: Any) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return bool(value)


def model_from_dict(tree: Mapping[str, Any], path: str = "workload") -> ModelConfig:
    moe_tree = tree.get("moe")
    moe = None
    if moe_tree:
        mp = f"{path}.moe"
        moe = MoEConfig(
            num_experts=_get(moe_tree, "experts", mp),
            top_k=_get(moe_tree, "top_k", mp, default=1),
            capacity_factor=_get(moe_tree, "capacity_factor", mp, float, 1.0),
            stride=_get(moe_tree, "stride", mp, default=2),
        )
    return ModelConfig(
        name=str(tree.get("name", "model")),
        num_layers=_get(tree, "layers", path),
        hidden_dim=_get(tree, "hidden", path),
        num_heads=_get(tree, "heads", path),
        kv_heads=_get(tree, "kv_heads", path, default=None),
        ffn_dim=_get(tree, "ffn", path, default=4 * _get(tree, "hidden", path)),
        vocab_size=_get(tree, "vocab", path),
        context_length=_get(tree, "context", path),
        gated_mlp=_bool(tree.get("gated_mlp", False)),
        moe=moe,
    )


def model_to_dict(model: ModelConfig) -> dict[str, Any]:
    tree: dict[str, Any] = {
        "name": model.name, "layers": model.num_layers, "hidden": model.hidden_dim,
        "heads": model.num_heads, "kv_heads": model.kv_heads, "ffn": model.ffn_dim,
        "vocab": model.vocab_size, "context": model.context_length, "gated_mlp": model.gated_mlp,
    }
    if model.moe is not None:
        tree["moe"] = {"experts": model.moe.num_experts, "top_k": model.moe.top_k,
                       "capacity_factor": model.moe.capacity_factor, "stride": model.moe.stride}
    return tree


def run_from_dict(tree: Mapping[str, Any], path: str = "run") -> RunConfig:
    tokens = tree.get("tokens")
    return RunConfig(
        phase=str(tree.get("phase", "training")),
        global_batch=_get(tree, "batch", path),
        precision=str(tree.get("precision", "bf16")),
        tokens_to_train=None if tokens is None else _get(tree, "tokens", path, float),
        activation_recompute=_bool(tree.get("recompute", False)),
        flash_attention=_bool(tree.get("flash_attention", False)),
        gen_tokens=_get(tree, "gen_tokens", path, default=1),
        requests=_get(tree, "requests", path, float, 0.0),
    )


def run_to_dict(run: RunConfig) -> dict[str, Any]:
    return {
        "phase": run.phase, "batch": run.global_batch, "precision": run.precision,
        "tokens": run.tokens_to_train, "recompute": run.activation_recompute,
        "flash_attention": run.flash_attention, "gen_tokens": run.gen_tokens,
        "requests": run.requests,
    }
