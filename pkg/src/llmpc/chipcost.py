"""Chiplet manufacturing cost with negative-binomial yield.

Package cost:

    C = 1/Y_assembly * (sum_i C_die_i / Y_die_i + C_assembly)

A stacked component (an HBM stack) is itself priced with the same formula
over its own dies and bonding process, then enters the package sum as a
known-good part.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from llmpc.errors import ConfigError
from llmpc.sysdesc import SystemSpec, scale_accelerator

PACKAGE_PROCESS = "interposer_2.5d"
STACK_PROCESS = "hbm_stack_bonding"
LIBRARY_SECTIONS = ("io", "process", "substrate", "assembly", "wafer", "test")


@dataclass(frozen=True)
class IOLink:
    peer: str
    io_type: str
    lanes: int


@dataclass(frozen=True)
class ChipletSpec:
    name: str
    core_area: float
    process_node: str
    pad_area: float = 0.0
    io_cell_area: float = 0.0
    io_links: tuple[IOLink, ...] = ()
    # non-empty for stacked parts; priced recursively with ``assembly_process``
    components: tuple["ChipletSpec", ...] = ()
    assembly_process: str | None = None

    def __post_init__(self):
        for key in ("core_area", "pad_area", "io_cell_area"):
            if getattr(self, key) < 0:
                raise ConfigError(f"chiplet {self.name!r}: {key} must be >= 0")
        if self.components and self.assembly_process is None:
            raise ConfigError(f"stacked chiplet {self.name!r} needs an assembly process")
        for link in self.io_links:
            if link.lanes < 0:
                raise ConfigError(f"chiplet {self.name!r}: negative lane count")

    @property
    def is_stack(self) -> bool:
        return bool(self.components)


@dataclass(frozen=True)
class ProcessNode:
    cost_per_mm2: float
    defect_density: float
    clustering: float


@dataclass(frozen=True)
class AssemblyProcess:
    material_cost: float
    interposer_cost_per_mm2: float
    machine_rate: float
    assembly_time: float
    assembly_yield: float
    area_overhead: float = 1.0
    # only the outermost package sits on the organic substrate
    on_substrate: bool = True


@dataclass(frozen=True)
class TechLibrary:
    process: Mapping[str, ProcessNode]
    assembly: Mapping[str, AssemblyProcess]
    io_area_per_lane: Mapping[str, float]
    io_reach: Mapping[str, str] = field(default_factory=dict)
    substrate_cost_per_mm2: float = 0.0
    substrate_base_cost: float = 0.0
    test_cost_per_die: float = 0.0
    name: str = "library"

    def __post_init__(self):
        for node, p in self.process.items():
            if not (p.cost_per_mm2 > 0 and p.defect_density >= 0 and p.clustering > 0):
                raise ConfigError(f"library process {node!r}: values must be positive")
        for proc, a in self.assembly.items():
            if not 0 < a.assembly_yield <= 1:
                raise ConfigError(f"library assembly {proc!r}: yield must lie in (0, 1]")
            if min(a.material_cost, a.interposer_cost_per_mm2, a.machine_rate, a.assembly_time) < 0:
                raise ConfigError(f"library assembly {proc!r}: costs must be >= 0")

    def node(self, name: str) -> ProcessNode:
        try:
            return self.process[name]
        except KeyError:
            raise ConfigError(f"library has no process node {name!r}") from None

    def assembly_process(self, name: str) -> AssemblyProcess:
        try:
            return self.assembly[name]
        except KeyError:
            raise ConfigError(f"library has no assembly process {name!r}") from None

    def lane_area(self, io_type: str) -> float:
        try:
            return self.io_area_per_lane[io_type]
        except KeyError:
            raise ConfigError(f"library has no io type {io_type!r}") from None


@dataclass(frozen=True)
class DieCost:
    name: str
    area: float
    die_cost: float
    die_yield: float
    breakdown: "CostReport | None" = None

    @property
    def effective(self) -> float:
        return self.die_cost / self.die_yield


@dataclass(frozen=True)
class CostReport:
    dies: tuple[DieCost, ...]
    assembly_cost: float
    assembly_yield: float
    total: float

    @property
    def die_term(self) -> float:
        return sum(d.effective for d in self.dies)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dies": [{"name": d.name, "area_mm2": d.area, "die_cost": d.die_cost,
                      "yield": d.die_yield, "cost_over_yield": d.effective,
                      **({"stack": d.breakdown.to_dict()} if d.breakdown else {})}
                     for d in self.dies],
            "sum_die_cost_over_yield": self.die_term,
            "assembly_cost": self.assembly_cost,
            "assembly_yield": self.assembly_yield,
            "total": self.total,
        }


def die_yield(area: float, defect_density: float, alpha: float) -> float:
    if area < 0 or defect_density < 0:
        raise ConfigError("die_yield: area and defect density must be >= 0")
    if not alpha > 0:
        raise ConfigError("die_yield: alpha must be > 0")
    return (1.0 + area * defect_density / alpha) ** (-alpha)


def io_cell_area(c: ChipletSpec, lib: TechLibrary) -> float:
    return c.io_cell_area + sum(link.lanes * lib.lane_area(link.io_type) for link in c.io_links)


def chiplet_area(c: ChipletSpec, lib: TechLibrary) -> float:
    """Footprint; a stack occupies the area of its largest die."""
    if c.is_stack:
        return max(chiplet_area(d, lib) for d in c.components)
    return max(c.core_area + io_cell_area(c, lib), c.pad_area)


def assembly_cost(chiplets: list[ChipletSpec] | tuple[ChipletSpec, ...], lib: TechLibrary,
                  process: str = PACKAGE_PROCESS) -> float:
    proc = lib.assembly_process(process)
    footprint = sum(chiplet_area(c, lib) for c in chiplets) * proc.area_overhead
    sub_base, sub_area = ((lib.substrate_base_cost, lib.substrate_cost_per_mm2)
                          if proc.on_substrate else (0.0, 0.0))
    material = proc.material_cost + sub_base + footprint * (proc.interposer_cost_per_mm2 + sub_area)
    machine = proc.machine_rate * proc.assembly_time * len(chiplets)
    return material + machine


def _die_cost(c: ChipletSpec, lib: TechLibrary) -> DieCost:
    if c.is_stack:
        sub = system_cost(c.components, lib, c.assembly_process)
        return DieCost(c.name, chiplet_area(c, lib), sub.total, 1.0, sub)
    node = lib.node(c.process_node)
    area = chiplet_area(c, lib)
    cost = area * node.cost_per_mm2 + lib.test_cost_per_die
    return DieCost(c.name, area, cost, die_yield(area, node.defect_density, node.clustering))


def system_cost(chiplets: list[ChipletSpec] | tuple[ChipletSpec, ...], lib: TechLibrary,
                process: str = PACKAGE_PROCESS) -> CostReport:
    dies = tuple(_die_cost(c, lib) for c in chiplets)
    asm = assembly_cost(chiplets, lib, process)
    y_asm = lib.assembly_process(process).assembly_yield
    total = (sum(d.effective for d in dies) + asm) / y_asm
    return CostReport(dies, asm, y_asm, total)


# ---------------------------------------------------------------------------
# system -> cost inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostInputs:
    chiplets: tuple[ChipletSpec, ...]
    netlist: tuple[tuple[str, str, str, int], ...]
    assembly_process: str = PACKAGE_PROCESS

    def to_dict(self) -> dict[str, Any]:
        def describe(c: ChipletSpec) -> dict[str, Any]:
            out: dict[str, Any] = {"name": c.name, "core_area_mm2": c.core_area,
                                   "pad_area_mm2": c.pad_area, "process_node": c.process_node}
            if c.components:
                out["components"] = [describe(d) for d in c.components]
                out["assembly_process"] = c.assembly_process
            return out
        return {
            "system": {"assembly_process": self.assembly_process,
                       "chiplets": [describe(c) for c in self.chiplets]},
            "netlist": [{"from": a, "to": b, "io_type": t, "lanes": n}
                        for a, b, t, n in self.netlist],
        }


def export_cost_inputs(system: SystemSpec,
                       overrides: Mapping[str, Any] | None = None) -> CostInputs:
    """Package description and IO netlist for one accelerator of ``system``."""
    acc = system.accelerator
    overrides = dict(overrides or {})
    if overrides:
        acc = scale_accelerator(acc, overrides.get("hbm_stacks"), overrides.get("logic_die_scale"))
    phys = acc.physical
    if phys is None:
        raise ConfigError(f"accelerator {acc.name!r} carries no physical annotations")
    netlist: list[tuple[str, str, str, int]] = []
    compute_links = [IOLink("offpackage", io, lanes) for io, lanes in phys.serial_io]
    netlist += [("compute", "offpackage", io, lanes) for io, lanes in phys.serial_io]
    stacks = []
    st = phys.hbm_stack
    for i in range(phys.hbm_stacks):
        name = f"hbm{i}"
        compute_links.append(IOLink(name, phys.hbm_io_type, phys.hbm_lanes_per_stack))
        netlist.append(("compute", name, phys.hbm_io_type, phys.hbm_lanes_per_stack))
        dram = tuple(ChipletSpec(f"{name}.dram{j}", st.dram_die_area, "dram")
                     for j in range(st.dram_dies))
        base = ChipletSpec(f"{name}.logic", st.logic_die_area, "dram_logic",
                           io_links=(IOLink("compute", phys.hbm_io_type, phys.hbm_lanes_per_stack),))
        stacks.append(ChipletSpec(name, 0.0, "stack", components=dram + (base,),
                                  assembly_process=STACK_PROCESS))
    compute = ChipletSpec("compute", phys.core_area * phys.logic_die_scale, phys.process_node,
                          pad_area=phys.pad_area * phys.logic_die_scale,
                          io_links=tuple(compute_links))
    dummies = tuple(ChipletSpec(f"dummy{i}", phys.dummy_area, "dummy")
                    for i in range(phys.dummy_chiplets))
    return CostInputs((compute, *stacks, *dummies), tuple(netlist))


def library_from_dict(tree: Mapping[str, Any], name: str = "library") -> TechLibrary:
    missing = [s for s in ("io", "process", "assembly") if s not in tree]
    if missing:
        raise ConfigError(f"cost library missing sections: {', '.join(missing)}")
    wafer = tree.get("wafer") or {}
    process = {}
    for node, body in tree["process"].items():
        cost = body.get("cost_per_mm2")
        if cost is None:
            # derive from wafer price over usable wafer area
            w = wafer.get(node)
            if w is None:
                raise ConfigError(f"cost.process.{node}: no cost_per_mm2 and no wafer entry")
            radius = float(w["diameter_mm"]) / 2
            cost = float(w["cost"]) / (math.pi * radius * radius * float(w.get("utilization", 1.0)))
        process[str(node)] = ProcessNode(float(cost), float(body["defect_density_per_mm2"]),
                                         float(body["clustering_alpha"]))
    assembly = {
        str(k): AssemblyProcess(
            material_cost=float(v.get("material_cost", 0.0)),
            interposer_cost_per_mm2=float(v.get("interposer_cost_per_mm2", 0.0)),
            machine_rate=float(v.get("machine_rate_per_s", 0.0)),
            assembly_time=float(v.get("time_per_placement_s", 0.0)),
            assembly_yield=float(v.get("yield", 1.0)),
            area_overhead=float(v.get("area_overhead", 1.0)),
            on_substrate=bool(v.get("on_substrate", str(k) == PACKAGE_PROCESS)),
        ) for k, v in tree["assembly"].items()
    }
    io = tree["io"]
    substrate = tree.get("substrate") or {}
    test = tree.get("test") or {}
    return TechLibrary(
        process=process,
        assembly=assembly,
        io_area_per_lane={str(k): float(v["area_per_lane_mm2"]) for k, v in io.items()},
        io_reach={str(k): str(v.get("reach", "")) for k, v in io.items()},
        substrate_cost_per_mm2=float(substrate.get("cost_per_mm2", 0.0)),
        substrate_base_cost=float(substrate.get("base_cost", 0.0)),
        test_cost_per_die=float(test.get("per_die", 0.0)),
        name=name,
    )


def load_library(name_or_path: str | Path) -> TechLibrary:
    from llmpc.config import load_preset, read_yaml

    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.is_file():
        return library_from_dict(read_yaml(path), path.stem)
    return library_from_dict(load_preset("costlib", str(name_or_path)), str(name_or_path))


def cost_report_json(report: CostReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
