"""Reproduction checks for the published validation and case studies.

Each suite returns :class:`Check` records with the measured value, what was
expected and the tolerance applied.  The CLI prints them; the acceptance
tests assert on them, so both always run the same computation.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Any, Callable

from llmpc import scenarios as S
from llmpc.chipcost import ChipletSpec, TechLibrary, die_yield, export_cost_inputs, \
    library_from_dict, load_library, system_cost
from llmpc.config import config_from_tree, load_preset
from llmpc.engine import PredictionReport, combined_metric, device_gemm_flops, predict
from llmpc.errors import ParallelismError
from llmpc.network import CollectiveRequest, all_to_all_time, hierarchical_collective_time, \
    p2p_delay
from llmpc.oracles import pipeline_makespan, ring_serialized_bytes, simulate_collective
from llmpc.parallelism import ParallelismConfig, pipeline_time, shard_workload, \
    validate_parallelism
from llmpc.sysdesc import system_from_dict
from llmpc.workload import ModelConfig, MoEConfig, RunConfig, flops_per_token


@dataclass(frozen=True)
class Check:
    criterion: int
    suite: str
    name: str
    measured: Any
    expected: str
    tolerance: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] C{self.criterion} {self.suite}/{self.name}: measured {_fmt(self.measured)}"
                f" | expected {self.expected} | tolerance {self.tolerance}")


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _run(tree: dict[str, Any], flash: bool | None = None) -> PredictionReport:
    c = config_from_tree(tree)
    return predict(c.system, c.model, c.run, c.parallelism, flash)


def _strictly_increasing(xs) -> bool:
    return all(b > a for a, b in zip(xs, xs[1:]))


def _strictly_decreasing(xs) -> bool:
    return all(b < a for a, b in zip(xs, xs[1:]))


# ---------------------------------------------------------------------------
# 1-3: FlashAttention
# ---------------------------------------------------------------------------

MATCHED_BAND = (1.3, 1.7)
BAND_SLACK = 0.08
FA_4K_FLOOR = 3.0


def _band(lo: float, hi: float) -> tuple[float, float]:
    return lo / (1 + BAND_SLACK), hi * (1 + BAND_SLACK)


def check_flash() -> list[Check]:
    lo, hi = _band(*MATCHED_BAND)
    out = []
    for model in ("gpt2-small", "gpt2-medium"):
        base = _run(S.flash_validation(model, 1024, False)).iteration_time
        for ctx in (1024, 2048, 4096):
            fa = _run(S.flash_validation(model, ctx, True)).iteration_time
            s = base / fa
            out.append(Check(1, "flash", f"{model}/fa{ctx}_vs_std1k", s,
                             f"in {MATCHED_BAND[0]}x..{MATCHED_BAND[1]}x",
                             f"+-{BAND_SLACK:.0%} band [{lo:.3f}, {hi:.3f}]", lo <= s <= hi))
        std4k = _run(S.flash_validation(model, 4096, False)).iteration_time
        fa4k = _run(S.flash_validation(model, 4096, True)).iteration_time
        s = std4k / fa4k
        out.append(Check(1, "flash", f"{model}/fa4k_vs_std4k", s, f"> {FA_4K_FLOOR}x", "strict",
                         s > FA_4K_FLOOR))
    return out


def _fa_speedup(tree_fn: Callable[[bool], dict[str, Any]]) -> float:
    return _run(tree_fn(False)).iteration_time / _run(tree_fn(True)).iteration_time


def check_generations() -> list[Check]:
    batches = (512, 1024, 2048, 4096)
    sp = [_fa_speedup(lambda f, b=b: S.flash_generations(b, "h100", f)) for b in batches]
    gens = ("a100-40gb", "h100", "b200")
    gp = [_fa_speedup(lambda f, a=a: S.flash_generations(2048, a, f)) for a in gens]
    return [
        Check(2, "generations", "batch_monotone", sp, "nondecreasing over B=512..4096",
              "property", all(b >= a for a, b in zip(sp, sp[1:]))),
        Check(2, "generations", "a100<h100<b200", gp, "strictly increasing", "property",
              _strictly_increasing(gp)),
    ]


TP_ANCHOR = 1.7


def check_tp_decay() -> list[Check]:
    base = _run(S.flash_validation("gpt2-medium", 1024, False)).iteration_time
    sp = []
    for tp in (1, 2, 4):
        fa = _run(S.flash_validation("gpt2-medium", 1024, True, dp=8 // tp, tp=tp)).iteration_time
        sp.append(base / fa)
    lo, hi = _band(TP_ANCHOR, TP_ANCHOR)
    return [
        Check(3, "tp_decay", "tp1_anchor", sp[0], f"~{TP_ANCHOR}x",
              f"+-{BAND_SLACK:.0%} band [{lo:.3f}, {hi:.3f}]", lo <= sp[0] <= hi),
        Check(3, "tp_decay", "tp1>tp2>tp4", sp, "strictly decreasing", "property",
              _strictly_decreasing(sp)),
    ]


# ---------------------------------------------------------------------------
# 4: MoE strong scaling
# ---------------------------------------------------------------------------

MOE_GPUS = (16, 32, 64, 128, 256)


def check_moe_scaling() -> list[Check]:
    times = [_run(S.summit_moe(g)).iteration_time for g in MOE_GPUS]
    ratios = [a / b for a, b in zip(times, times[1:])]
    flops, per_token = [], []
    for experts in (16, 32, 64):
        cfg = config_from_tree(S.summit_moe(64, experts))
        flops.append(device_gemm_flops(cfg.model, cfg.parallelism, cfg.run,
                                       cfg.system.accelerator))
        per_token.append(flops_per_token(cfg.model, "training"))
    return [
        Check(4, "moe_scaling", "batch_time_decreasing", times, "strictly decreasing in GPUs",
              "property", _strictly_decreasing(times)),
        Check(4, "moe_scaling", "saturating_returns", ratios,
              "successive improvement ratios decreasing", "property", _strictly_decreasing(ratios)),
        Check(4, "moe_scaling", "flops_invariant_in_experts", flops,
              "identical device GEMM flops for E=16,32,64", "exact",
              len(set(flops)) == 1 and len(set(per_token)) == 1),
    ]


# ---------------------------------------------------------------------------
# 5-6: network
# ---------------------------------------------------------------------------

SWEEP_PAYLOADS = (64e6, 128e6, 256e6, 512e6, 1e9, 1.5e9)
SWEEP_BW = 150e9
ORACLE_RTOL = 1e-9


def sweep_system(kind: str, devices: int = 16):
    level: dict[str, Any] = {"kind": kind, "size": devices, "link_bandwidth_Bps": SWEEP_BW,
                             "link_latency_s": 1.0e-6, "switch_delay_s": 0.5e-6}
    if kind == "mesh2d":
        level["mesh_rows"], level["mesh_cols"] = S.TOPOLOGY_SHAPES[devices]
    tree = load_preset("accelerators", "v100")
    tree["network"] = [level]
    return system_from_dict(tree)


def check_network() -> list[Check]:
    out = []
    p = 16
    for kind in ("ring", "switch", "fully_connected", "mesh2d"):
        system = sweep_system(kind, p)
        worst = 0.0
        correct = True
        for d in SWEEP_PAYLOADS:
            a = hierarchical_collective_time(CollectiveRequest("all_reduce", d, p), system).seconds
            o = simulate_collective(system, p, d)
            worst = max(worst, abs(a - o.seconds) / o.seconds)
            correct &= o.correct
        out.append(Check(5, "network", f"{kind}_vs_oracle", worst,
                         "analytic == discrete-event oracle", f"rel <= {ORACLE_RTOL:g}",
                         worst <= ORACLE_RTOL and correct))
    ring = sweep_system("ring", p)
    exact = True
    for d in SWEEP_PAYLOADS:
        sent = hierarchical_collective_time(CollectiveRequest("all_reduce", d, p), ring).bytes_sent
        want = 2 * (p - 1) / p * d
        exact &= sent == want and ring_serialized_bytes(p, d) == want
        exact &= simulate_collective(ring, p, d).bytes_sent[0] == want
    out.append(Check(5, "network", "ring_volume", "2(p-1)/p*d" if exact else "mismatch",
                     "2(p-1)/p*d per device", "exact", exact))
    return out


TOPOLOGIES = ("fully_connected", "switch", "ring", "mesh2d")


def check_topology() -> list[Check]:
    comm = {n: [_run(S.topology_inference(k, n)).communication_time for k in TOPOLOGIES]
            for n in (8, 16)}
    gap8 = comm[8][3] - comm[8][2]
    gap16 = comm[16][3] - comm[16][2]
    return [
        Check(6, "topology", "order_16", comm[16], "fully_connected < switch < ring < mesh2d",
              "strict", _strictly_increasing(comm[16])),
        Check(6, "topology", "ring_mesh_gap_widens", [gap8, gap16], "gap(16) > gap(8)", "strict",
              gap16 > gap8),
    ]


# ---------------------------------------------------------------------------
# 7-8: anchors
# ---------------------------------------------------------------------------

MEGATRON_TFLOPS = 149.0
MEGATRON_RTOL = 0.15
MOE_RATIO = 6.1
MOE_RATIO_RTOL = 0.2
MOE_FA_BAND = (1.05, 1.15)


def check_megatron() -> list[Check]:
    r = _run(S.megatron_145b())
    tf = r.tflops_per_device / 1e12
    lo, hi = MEGATRON_TFLOPS * (1 - MEGATRON_RTOL), MEGATRON_TFLOPS * (1 + MEGATRON_RTOL)
    return [
        Check(7, "megatron", "tflops_per_gpu", tf, f"{MEGATRON_TFLOPS} TFLOP/s",
              f"+-{MEGATRON_RTOL:.0%} [{lo:.0f}, {hi:.0f}]", lo <= tf <= hi),
        Check(7, "megatron", "memory_feasible", r.memory_per_device / 1e9, "fits 80 GB",
              "feasible flag", r.feasible),
    ]


def check_moe_dense() -> list[Check]:
    dense = _run(S.megatron_145b())
    moe = _run(S.moe_139b())
    moe_fa = _run(S.moe_139b(True))
    ratio = dense.metadata["time_per_token_s"] / moe.metadata["time_per_token_s"]
    further = moe.iteration_time / moe_fa.iteration_time
    lo, hi = MOE_RATIO * (1 - MOE_RATIO_RTOL), MOE_RATIO * (1 + MOE_RATIO_RTOL)
    return [
        Check(8, "moe_dense", "per_token_ratio", ratio, f"{MOE_RATIO}x",
              f"+-{MOE_RATIO_RTOL:.0%} [{lo:.2f}, {hi:.2f}]", lo <= ratio <= hi),
        Check(8, "moe_dense", "flash_further", further, "~1.1x",
              f"[{MOE_FA_BAND[0]}, {MOE_FA_BAND[1]}]", MOE_FA_BAND[0] <= further <= MOE_FA_BAND[1]),
    ]


# ---------------------------------------------------------------------------
# 9: closed-form checks
# ---------------------------------------------------------------------------

def _unit_library(assembly_yield: float) -> TechLibrary:
    return library_from_dict({
        "io": {"x": {"area_per_lane_mm2": 0.0}},
        "process": {"n": {"cost_per_mm2": 0.1, "defect_density_per_mm2": 0.0,
                          "clustering_alpha": 1.0}},
        "assembly": {"interposer_2.5d": {"material_cost": 3.0, "machine_rate_per_s": 0.5,
                                         "time_per_placement_s": 2.0,
                                         "yield": assembly_yield}},
    })


def check_equations() -> list[Check]:
    a2a = all_to_all_time(64, 1024, 4096, "fp16", 50e9).seconds
    a2a_want = 64 * 1024 * 4096 * 2 / 50e9
    p2p = p2p_delay(1e9, 100e9, 2, 1e-6, 2e-6).seconds
    p2p_want = 1e9 / 100e9 + 1e-6 * 2 + 2e-6
    idle = p2p_delay(0, 1e9, 1, 1e-6, 1e-6).seconds
    die = ChipletSpec("d", 100.0, "n")
    one = system_cost([die], _unit_library(1.0))
    half = system_cost([die], _unit_library(0.5))
    identity = one.total == 100.0 * 0.1 + (3.0 + 0.5 * 2.0)
    area, d0 = 826.0, 0.001
    poisson = abs(die_yield(area, d0, 1e6) - math.exp(-area * d0))
    a100_yield = die_yield(area, d0, 2.0)
    direct = 1.0 / (1.413 * 1.413)
    return [
        Check(9, "equations", "a2a_substitution", a2a, f"{a2a_want!r}", "bit-exact",
              a2a == a2a_want),
        Check(9, "equations", "p2p_substitution", [p2p, idle], f"[{p2p_want!r}, 1e-06]",
              "bit-exact", p2p == p2p_want and idle == 1e-6),
        Check(9, "equations", "cost_identity", one.total, "die + assembly at unit yields",
              "exact", identity),
        Check(9, "equations", "cost_doubling", half.total / one.total, "2.0", "exact",
              half.total == 2 * one.total),
        Check(9, "equations", "yield_poisson_limit", poisson, "|Y(alpha=1e6) - exp(-A D0)|",
              "<= 1e-6", poisson <= 1e-6),
        Check(9, "equations", "yield_a100_die", a100_yield, f"(1 + 0.413)^-2 = {direct!r}",
              "1e-12", abs(a100_yield - direct) <= 1e-12),
    ]


# ---------------------------------------------------------------------------
# 10: performance-cost case
# ---------------------------------------------------------------------------

def hbm_study_table(library: str = "placeholder") -> dict[str, dict[str, float]]:
    lib = load_library(library)
    raw = {}
    for name, stacks, scale in S.HBM_VARIANTS:
        train_cfg = config_from_tree(S.hbm_training(stacks, scale))
        tr = predict(train_cfg.system, train_cfg.model, train_cfg.run, train_cfg.parallelism)
        inf = _run(S.hbm_inference(stacks, scale))
        cost = system_cost(export_cost_inputs(train_cfg.system).chiplets, lib).total
        raw[name] = (tr.epoch_or_serving_time, inf.epoch_or_serving_time, cost,
                     tr.feasible, inf.feasible)
    bt, bi = raw[S.HBM_BASELINE][:2]
    table = {}
    for name, (t, i, c, ft, fi) in raw.items():
        m = combined_metric(t, i, bt, bi, 0.5)
        table[name] = {"training_rel": t / bt, "inference_rel": i / bi, "cost": c, "metric": m,
                       "metric_x_cost": m * c, "training_feasible": ft, "inference_feasible": fi}
    return table


def check_cost() -> list[Check]:
    t = hbm_study_table()
    full = [t[f"A100-{n}HBMs"]["cost"] for n in (4, 5, 6, 8)]
    half = [t[f"HA100-{n}HBMs"]["cost"] for n in (3, 4, 6)]
    cheaper = all(t[f"HA100-{n}HBMs"]["cost"] < t[f"A100-{n}HBMs"]["cost"] for n in (4, 6))
    best = min(t, key=lambda k: t[k]["metric_x_cost"])
    runner = min((k for k in t if k != S.HBM_BASELINE), key=lambda k: t[k]["metric_x_cost"])
    margin = t[runner]["metric_x_cost"] / t[S.HBM_BASELINE]["metric_x_cost"]
    return [
        Check(10, "cost", "a_cost_increases_with_hbm", full + half,
              "strictly increasing per die size", "strict",
              _strictly_increasing(full) and _strictly_increasing(half)),
        Check(10, "cost", "b_halved_die_cheaper", cheaper, "HA100-n < A100-n for n=4,6",
              "strict", cheaper),
        Check(10, "cost", "c_a100_5hbm_optimal", f"{best} (runner-up {runner} at {margin:.4f}x)",
              f"{S.HBM_BASELINE} minimizes metric x cost (w=0.5)", "argmin",
              best == S.HBM_BASELINE),
    ]


# ---------------------------------------------------------------------------
# 11: conservation and validity
# ---------------------------------------------------------------------------

RANDOM_CONFIGS = 1000
SEED = 20240611


def _random_system(rng: random.Random):
    tree = load_preset("accelerators", rng.choice(["a100-80gb", "h100", "v100"]))
    tree["network"] = [
        {"kind": rng.choice(["switch", "ring", "fully_connected"]), "size": 8,
         "link_bandwidth_Bps": "auto", "link_latency_s": 1e-6, "switch_delay_s": 0.3e-6},
        {"kind": "switch", "size": 64, "link_bandwidth_Bps": 25e9, "link_latency_s": 2e-6,
         "switch_delay_s": 0.3e-6},
    ]
    return system_from_dict(tree)


def random_case(rng: random.Random) -> tuple[ModelConfig, RunConfig, ParallelismConfig]:
    """A random valid (model, run, parallelism) triple sized for the random system."""
    while True:
        heads = rng.choice([4, 8, 16])
        kv = rng.choice([h for h in (1, 2, 4, 8, 16) if heads % h == 0])
        hidden = heads * rng.choice([32, 64, 128])
        layers = rng.choice([2, 4, 8])
        moe = None
        if rng.random() < 0.3:
            e = rng.choice([2, 4, 8, 16])
            moe = MoEConfig(e, rng.randint(1, min(2, e)), rng.choice([1.0, 1.25, 2.0]), 2)
        model = ModelConfig("random", layers, hidden, heads, 4 * hidden,
                            rng.choice([1000, 4096, 32000]), rng.choice([128, 256, 512, 1024]),
                            kv, rng.random() < 0.3, moe)
        tp = rng.choice([1, 2, 4, 8])
        dp = rng.choice([1, 2, 4, 8])
        pp = rng.choice([1, 2, 4])
        sp = rng.choice([s for s in (1, 2, 4, 8) if s <= tp and tp % s == 0])
        m = rng.choice([1, 2, 4, 8])
        batch = dp * m * rng.choice([1, 2, 4])
        phase = rng.choice(["training", "training", "inference_prefill", "inference_decode"])
        ep = None
        if moe is not None:
            ep = rng.choice([x for x in (1, 2, 4, 8) if dp % x == 0 and moe.num_experts % x == 0])
        par = ParallelismConfig(dp, tp, pp, sp, ep, dp // ep if ep else 1, m,
                                rng.choice(["gpipe", "pipedream_flush"]))
        gen = rng.choice([1, 4, 16]) if phase != "training" else 1
        run = RunConfig(phase, batch, "bf16", None, rng.random() < 0.5, rng.random() < 0.5,
                        min(gen, model.context_length - 1), 1e3)
        try:
            validate_parallelism(par, par.devices, model, run)
        except ParallelismError:
            continue
        return model, run, par


def _reassembles(model: ModelConfig, run: RunConfig, p: ParallelismConfig) -> bool:
    s = shard_workload(p, model, run)
    ok = (s.layers_per_stage * p.pp == model.num_layers
          and s.heads_local * p.tp == model.num_heads
          and s.ffn_cols_local * p.tp == model.ffn_dim
          and s.seq_local * p.sp == model.context_length
          and s.microbatch * p.microbatches * p.dp == run.global_batch)
    if model.moe is not None:
        ok &= s.experts_local * p.ep == model.moe.num_experts
    return ok


def _flops_conserved(model: ModelConfig, run: RunConfig, p: ParallelismConfig, system) -> bool:
    if model.moe is not None or model.kv_heads % p.tp:
        return True
    acc = system.accelerator
    whole = ParallelismConfig(microbatches=p.microbatches * p.dp)
    sharded = device_gemm_flops(model, p, run, acc) * p.devices
    return sharded == device_gemm_flops(model, whole, run, acc)


def _ted_predicate(tp: int, ep: int, dp_exp: int, dp: int) -> bool:
    return tp * ep * dp_exp == tp * dp


def check_conservation(n_random: int = RANDOM_CONFIGS) -> list[Check]:
    rng = random.Random(SEED)
    # TED identity fuzzing against an independent predicate
    dummy = ModelConfig("fuzz", 8, 512, 8, 2048, 1000, 256, moe=MoEConfig(64))
    run = RunConfig("training", 64)
    agree = 0
    trials = 500
    for _ in range(trials):
        tp, ep, dpx, dp = (rng.choice([1, 2, 4, 8]) for _ in range(4))
        p = ParallelismConfig(dp, tp, 1, 1, ep, dpx, 1)
        try:
            validate_parallelism(p, p.devices, dummy, run)
            accepted = True
        except ParallelismError as exc:
            accepted = "TED" not in str(exc)
        agree += accepted == _ted_predicate(tp, ep, dpx, dp)

    bubble_ok = all(
        abs(pipeline_makespan(m, pp, 1.0, 2.0, sched) - pipeline_time(3.0, m, pp, sched)[0]) <= 1e-12
        for sched in ("gpipe", "pipedream_flush") for m in range(1, 9) for pp in range(1, 9))

    reassembled = conserved = peak_ok = 0
    worst = 0.0
    halved = True
    for i in range(n_random):
        model, run, p = random_case(rng)
        system = _random_system(rng)
        reassembled += _reassembles(model, run, p)
        conserved += _flops_conserved(model, run, p, system)
        r = predict(system, model, run, p)
        frac = r.tflops_per_device / system.accelerator.peak(run.precision)
        worst = max(worst, frac)
        peak_ok += frac <= 1.0
        if i < 50 and run.is_training and run.global_batch % (2 * p.dp * p.microbatches) == 0:
            doubled = ParallelismConfig(p.dp * 2, p.tp, p.pp, p.sp, None, 1, p.microbatches,
                                        p.schedule)
            if model.moe is None:
                acc = system.accelerator
                halved &= (device_gemm_flops(model, doubled, run, acc) * 2
                           == device_gemm_flops(model, p, run, acc))
    return [
        Check(11, "conservation", "shard_reassembly", f"{reassembled}/{n_random}",
              "all shards multiply back", "exact", reassembled == n_random),
        Check(11, "conservation", "flops_conserved", f"{conserved}/{n_random}",
              "sum over devices == unsharded GEMM flops", "exact", conserved == n_random),
        Check(11, "conservation", "dp_doubling_halves_flops", halved,
              "per-device flops halve when dp doubles", "exact", halved),
        Check(11, "conservation", "ted_identity_fuzz", f"{agree}/{trials}",
              "accept iff tp*ep*dp_exp == tp*dp", "exact", agree == trials),
        Check(11, "conservation", "bubble_vs_enumeration", bubble_ok,
              "(m+p-1)*t for (m,p) in [1,8]^2, both schedules", "1e-12", bubble_ok),
        Check(11, "conservation", "tflops_le_peak", f"{peak_ok}/{n_random} (max {worst:.3f})",
              "achieved <= peak", "hard bound", peak_ok == n_random),
    ]


SUITES: dict[str, tuple[int, Callable[[], list[Check]]]] = {
    "flash": (1, check_flash),
    "generations": (2, check_generations),
    "tp_decay": (3, check_tp_decay),
    "moe_scaling": (4, check_moe_scaling),
    "network": (5, check_network),
    "topology": (6, check_topology),
    "megatron": (7, check_megatron),
    "moe_dense": (8, check_moe_dense),
    "equations": (9, check_equations),
    "cost": (10, check_cost),
    "conservation": (11, check_conservation),
}


def run_validation(only: list[str] | None = None) -> list[Check]:
    names = list(SUITES) if not only else only
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {', '.join(unknown)}; available: {', '.join(SUITES)}")
    checks: list[Check] = []
    for name in names:
        checks.extend(SUITES[name][1]())
    return checks


__all__ = ["Check", "SUITES", "run_validation", "hbm_study_table", "random_case"]
