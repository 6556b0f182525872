"""Accelerator and cluster descriptions.

An :class:`AcceleratorSpec` carries peak throughput per precision and an
ordered memory hierarchy (outermost first).  A :class:`SystemSpec` binds the
accelerator to a stack of :class:`NetworkTopology` levels, innermost
(intra-node) first.  Everything here is immutable once validated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from llmpc.errors import ConfigError

PRECISION_BYTES = {"fp32": 4, "tf32": 4, "fp16": 2, "bf16": 2, "fp8": 1}

TOPOLOGY_KINDS = ("ring", "switch", "fully_connected", "mesh2d")


def bytes_per_element(precision: str) -> int:
    try:
        return PRECISION_BYTES[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}") from None


@dataclass(frozen=True)
class MemoryLevel:
    name: str
    capacity: float
    bandwidth: float

    def __post_init__(self):
        if not self.capacity > 0:
            raise ConfigError(f"memory level {self.name!r}: capacity must be > 0")
        if not self.bandwidth > 0:
            raise ConfigError(f"memory level {self.name!r}: bandwidth must be > 0")


@dataclass(frozen=True)
class HBMStack:
    """Per-stack physical description, used to scale capacity/bandwidth and for costing."""

    capacity: float
    bandwidth: float
    dram_dies: int = 8
    dram_die_area: float = 110.0
    logic_die_area: float = 110.0


@dataclass(frozen=True)
class PhysicalAnnotations:
    """Die-level facts the cost interface needs; absent for purely logical presets."""

    process_node: str
    core_area: float
    pad_area: float
    hbm_stacks: int
    hbm_stack: HBMStack
    dummy_chiplets: int = 0
    dummy_area: float = 0.0
    # io type -> lane count on the compute die (hbm lanes are per stack)
    serial_io: tuple[tuple[str, int], ...] = ()
    hbm_io_type: str = "hbm_parallel"
    hbm_lanes_per_stack: int = 1024
    logic_die_scale: float = 1.0


@dataclass(frozen=True)
class AcceleratorSpec:
    name: str
    peak_flops: Mapping[str, float]
    memory_levels: tuple[MemoryLevel, ...]
    offchip_bandwidth: float
    physical: PhysicalAnnotations | None = None

    def __post_init__(self):
        if not self.peak_flops:
            raise ConfigError(f"accelerator {self.name!r}: peak_flops is empty")
        for prec, value in self.peak_flops.items():
            bytes_per_element(prec)
            if not value > 0:
                raise ConfigError(f"accelerator {self.name!r}: peak_flops.{prec} must be > 0")
        if len(self.memory_levels) < 2:
            raise ConfigError(
                f"accelerator {self.name!r}: need at least two memory levels (HBM-like and SRAM-like)"
            )
        for outer, inner in zip(self.memory_levels, self.memory_levels[1:]):
            if not inner.capacity < outer.capacity:
                raise ConfigError(
                    f"memory level {inner.name!r}: capacity must be below {outer.name!r}"
                )
            if not inner.bandwidth > outer.bandwidth:
                raise ConfigError(
                    f"memory level {inner.name!r}: bandwidth must exceed {outer.name!r}"
                )
        if not self.offchip_bandwidth > 0:
            raise ConfigError(f"accelerator {self.name!r}: offchip_bandwidth must be > 0")

    @property
    def hbm(self) -> MemoryLevel:
        return self.memory_levels[0]

    @property
    def sram(self) -> MemoryLevel:
        """The shared-memory-like level: the one just outside the innermost."""
        if len(self.memory_levels) >= 3:
            return self.memory_levels[-2]
        return self.memory_levels[-1]

    def level(self, name: str) -> MemoryLevel:
        for lvl in self.memory_levels:
            if lvl.name == name:
                return lvl
        raise ConfigError(f"accelerator {self.name!r} has no memory level {name!r}")

    def peak(self, precision: str) -> float:
        try:
            return self.peak_flops[precision]
        except KeyError:
            raise ConfigError(
                f"accelerator {self.name!r} has no peak_flops entry for {precision!r}"
            ) from None


@dataclass(frozen=True)
class NetworkTopology:
    kind: str
    size: int
    link_bandwidth: float
    link_latency: float = 0.0
    switch_delay: float = 0.0
    mesh_dims: tuple[int, int] | None = None
    a2a_bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in TOPOLOGY_KINDS:
            raise ConfigError(f"unknown topology kind {self.kind!r}")
        if self.size < 1:
            raise ConfigError("topology size must be >= 1")
        if not self.link_bandwidth > 0:
            raise ConfigError("link_bandwidth must be > 0")
        if self.link_latency < 0 or self.switch_delay < 0:
            raise ConfigError("link_latency and switch_delay must be >= 0")
        if self.kind == "mesh2d":
            if self.mesh_dims is None:
                raise ConfigError("mesh2d topology requires mesh_rows and mesh_cols")
            rows, cols = self.mesh_dims
            if rows < 1 or cols < 1 or rows * cols != self.size:
                raise ConfigError(
                    f"mesh2d: mesh_rows x mesh_cols = {rows}x{cols} does not equal size {self.size}"
                )
        elif self.mesh_dims is not None:
            raise ConfigError(f"mesh dims given for non-mesh topology {self.kind!r}")
        if self.a2a_bandwidth is not None and not self.a2a_bandwidth > 0:
            raise ConfigError("a2a_bandwidth must be > 0")

    @property
    def effective_a2a_bandwidth(self) -> float:
        return self.a2a_bandwidth if self.a2a_bandwidth is not None else self.link_bandwidth

    @property
    def hops(self) -> int:
        """Hop count of one neighbor/peer transfer in this topology."""
        return 2 if self.kind == "switch" else 1


@dataclass(frozen=True)
class SystemSpec:
    accelerator: AcceleratorSpec
    levels: tuple[NetworkTopology, ...]
    total_devices: int = field(default=0)

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("system needs at least one network level")
        product = math.prod(lvl.size for lvl in self.levels)
        if self.total_devices == 0:
            object.__setattr__(self, "total_devices", product)
        elif self.total_devices != product:
            raise ConfigError(
                f"total_devices {self.total_devices} != product of level sizes {product}"
            )


def links_per_device(topology: NetworkTopology) -> int:
    p = topology.size
    if topology.kind == "ring":
        return min(2, p - 1)
    if topology.kind == "fully_connected":
        return p - 1
    if topology.kind == "mesh2d":
        rows, cols = topology.mesh_dims
        # interior-node approximation; boundary nodes are treated like interior ones
        return min(2, rows - 1) + min(2, cols - 1)
    return 1


def derive_link_bandwidth(offchip_bandwidth: float, num_links: int) -> float:
    if num_links < 1:
        raise ConfigError("num_links must be >= 1 to divide off-chip bandwidth")
    return offchip_bandwidth / num_links


def scale_accelerator(acc: AcceleratorSpec, hbm_stacks: int | None = None,
                      logic_die_scale: float | None = None) -> AcceleratorSpec:
    """Derive a hardware variant by changing HBM stack count and/or logic die size.

    HBM capacity and bandwidth scale with the stack count; peak throughput and
    every on-die memory level scale with the logic die.
    """
    phys = acc.physical
    if phys is None:
        raise ConfigError(f"accelerator {acc.name!r} carries no physical annotations")
    stacks = phys.hbm_stacks if hbm_stacks is None else hbm_stacks
    scale = 1.0 if logic_die_scale is None else logic_die_scale
    if stacks < 1 or not scale > 0:
        raise ConfigError("hbm_stacks must be >= 1 and logic_die_scale > 0")
    hbm = acc.memory_levels[0]
    levels = [replace(hbm, capacity=phys.hbm_stack.capacity * stacks,
                      bandwidth=phys.hbm_stack.bandwidth * stacks)]
    for lvl in acc.memory_levels[1:]:
        levels.append(replace(lvl, capacity=lvl.capacity * scale, bandwidth=lvl.bandwidth * scale))
    prefix = "H" if scale < 1 else ""
    return AcceleratorSpec(
        name=f"{prefix}{acc.name}-{stacks}HBMs",
        peak_flops={k: v * scale for k, v in acc.peak_flops.items()},
        memory_levels=tuple(levels),
        offchip_bandwidth=acc.offchip_bandwidth,
        physical=replace(phys, hbm_stacks=stacks, logic_die_scale=phys.logic_die_scale * scale),
    )


# ---------------------------------------------------------------------------
# dict <-> spec
# ---------------------------------------------------------------------------

def _num(tree: Mapping[str, Any], key: str, path: str, default: Any = ...) -> float:
    if key not in tree or tree[key] is None:
        if default is ...:
            raise ConfigError(f"missing required key {path}.{key}")
        return default
    try:
        return float(tree[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: expected a number, got {tree[key]!r}") from None


def _int(tree: Mapping[str, Any], key: str, path: str, default: Any = ...) -> int:
    value = _num(tree, key, path, default)
    if value != int(value):
        raise ConfigError(f"{path}.{key}: expected an integer, got {value}")
    return int(value)


def _physical_from_dict(tree: Mapping[str, Any], path: str) -> PhysicalAnnotations:
    stack = tree.get("hbm_stack") or {}
    sp = f"{path}.hbm_stack"
    return PhysicalAnnotations(
        process_node=str(tree.get("process_node", "n7")),
        core_area=_num(tree, "core_area_mm2", path),
        pad_area=_num(tree, "pad_area_mm2", path, 0.0),
        hbm_stacks=_int(tree, "hbm_stacks", path),
        hbm_stack=HBMStack(
            capacity=_num(stack, "capacity_bytes", sp),
            bandwidth=_num(stack, "bandwidth_Bps", sp),
            dram_dies=_int(stack, "dram_dies", sp, 8),
            dram_die_area=_num(stack, "dram_die_area_mm2", sp, 110.0),
            logic_die_area=_num(stack, "logic_die_area_mm2", sp, 110.0),
        ),
        dummy_chiplets=_int(tree, "dummy_chiplets", path, 0),
        dummy_area=_num(tree, "dummy_area_mm2", path, 0.0),
        serial_io=tuple((str(k), int(v)) for k, v in (tree.get("serial_io") or {}).items()),
        hbm_io_type=str(tree.get("hbm_io_type", "hbm_parallel")),
        hbm_lanes_per_stack=_int(tree, "hbm_lanes_per_stack", path, 1024),
        logic_die_scale=_num(tree, "logic_die_scale", path, 1.0),
    )


def accelerator_from_dict(system_tree: Mapping[str, Any], path: str = "system") -> AcceleratorSpec:
    acc = system_tree.get("accelerator")
    if not isinstance(acc, Mapping):
        raise ConfigError(f"missing section {path}.accelerator")
    ap = f"{path}.accelerator"
    flops = acc.get("peak_flops")
    if not isinstance(flops, Mapping) or not flops:
        raise ConfigError(f"{ap}.peak_flops must be a non-empty mapping")
    peak = {str(k): _num(flops, k, f"{ap}.peak_flops") for k in flops}
    memory = system_tree.get("memory")
    if not isinstance(memory, Mapping) or not memory:
        raise ConfigError(f"missing section {path}.memory")
    levels = []
    for name, lvl in memory.items():
        lp = f"{path}.memory.{name}"
        if not isinstance(lvl, Mapping):
            raise ConfigError(f"{lp} must be a mapping")
        levels.append(MemoryLevel(str(name), _num(lvl, "capacity_bytes", lp),
                                  _num(lvl, "bandwidth_Bps", lp)))
    phys = acc.get("physical")
    physical = _physical_from_dict(phys, f"{ap}.physical") if phys else None
    spec = AcceleratorSpec(
        name=str(acc.get("name", "accelerator")),
        peak_flops=peak,
        memory_levels=tuple(levels),
        offchip_bandwidth=_num(acc, "offchip_bandwidth_Bps", ap),
        physical=physical,
    )
    overrides = system_tree.get("variant") or {}
    if overrides:
        spec = scale_accelerator(spec, overrides.get("hbm_stacks"), overrides.get("logic_die_scale"))
    return spec


def topology_from_dict(tree: Mapping[str, Any], path: str,
                       offchip_bandwidth: float | None = None) -> NetworkTopology:
    kind = str(tree.get("kind", ""))
    size = _int(tree, "size", path)
    dims = None
    if "mesh_rows" in tree or "mesh_cols" in tree:
        dims = (_int(tree, "mesh_rows", path), _int(tree, "mesh_cols", path))
    bw = tree.get("link_bandwidth_Bps")
    if bw is None or bw == "auto":
        # divide the accelerator's off-chip bandwidth across its links in this topology
        if offchip_bandwidth is None:
            raise ConfigError(f"{path}.link_bandwidth_Bps missing and no off-chip bandwidth known")
        probe = NetworkTopology(kind, size, 1.0, mesh_dims=dims)
        bandwidth = derive_link_bandwidth(offchip_bandwidth, max(links_per_device(probe), 1))
    else:
        bandwidth = _num(tree, "link_bandwidth_Bps", path)
    a2a = tree.get("a2a_bandwidth_Bps")
    return NetworkTopology(
        kind=kind,
        size=size,
        link_bandwidth=bandwidth,
        link_latency=_num(tree, "link_latency_s", path, 0.0),
        switch_delay=_num(tree, "switch_delay_s", path, 0.0),
        mesh_dims=dims,
        a2a_bandwidth=None if a2a is None else _num(tree, "a2a_bandwidth_Bps", path),
    )


def system_from_dict(system_tree: Mapping[str, Any], path: str = "system") -> SystemSpec:
    acc = accelerator_from_dict(system_tree, path)
    network = system_tree.get("network")
    if not isinstance(network, list) or not network:
        raise ConfigError(f"{path}.network must be a non-empty list of levels")
    levels = tuple(topology_from_dict(lvl, f"{path}.network.{i}", acc.offchip_bandwidth)
                   for i, lvl in enumerate(network))
    total = system_tree.get("total_devices")
    return SystemSpec(acc, levels, int(total) if total is not None else 0)


def _physical_to_dict(p: PhysicalAnnotations) -> dict[str, Any]:
    return {
        "process_node": p.process_node,
        "core_area_mm2": p.core_area,
        "pad_area_mm2": p.pad_area,
        "hbm_stacks": p.hbm_stacks,
        "hbm_stack": {
            "capacity_bytes": p.hbm_stack.capacity,
            "bandwidth_Bps": p.hbm_stack.bandwidth,
            "dram_dies": p.hbm_stack.dram_dies,
            "dram_die_area_mm2": p.hbm_stack.dram_die_area,
            "logic_die_area_mm2": p.hbm_stack.logic_die_area,
        },
        "dummy_chiplets": p.dummy_chiplets,
        "dummy_area_mm2": p.dummy_area,
        "serial_io": dict(p.serial_io),
        "hbm_io_type": p.hbm_io_type,
        "hbm_lanes_per_stack": p.hbm_lanes_per_stack,
        "logic_die_scale": p.logic_die_scale,
    }


def system_to_dict(spec: SystemSpec) -> dict[str, Any]:
    """Normalized, preset-free tree; ``system_from_dict`` reproduces ``spec`` exactly."""
    acc = spec.accelerator
    acc_tree: dict[str, Any] = {
        "name": acc.name,
        "peak_flops": dict(acc.peak_flops),
        "offchip_bandwidth_Bps": acc.offchip_bandwidth,
    }
    if acc.physical is not None:
        acc_tree["physical"] = _physical_to_dict(acc.physical)
    network = []
    for lvl in spec.levels:
        entry: dict[str, Any] = {
            "kind": lvl.kind,
            "size": lvl.size,
            "link_bandwidth_Bps": lvl.link_bandwidth,
            "link_latency_s": lvl.link_latency,
            "switch_delay_s": lvl.switch_delay,
        }
        if lvl.mesh_dims is not None:
            entry["mesh_rows"], entry["mesh_cols"] = lvl.mesh_dims
        if lvl.a2a_bandwidth is not None:
            entry["a2a_bandwidth_Bps"] = lvl.a2a_bandwidth
        network.append(entry)
    return {
        "accelerator": acc_tree,
        "memory": {
            m.name: {"capacity_bytes": m.capacity, "bandwidth_Bps": m.bandwidth}
            for m in acc.memory_levels
        },
        "network": network,
        "total_devices": spec.total_devices,
    }


def dump_system_json(spec: SystemSpec) -> str:
    return json.dumps(system_to_dict(spec), indent=2, sort_keys=False)


def load_system_config(path: str | Path) -> SystemSpec:
    from llmpc.config import load_config_tree

    tree = load_config_tree(path)
    if "system" not in tree:
        raise ConfigError(f"{path}: no 'system' section")
    return system_from_dict(tree["system"])
