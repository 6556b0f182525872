"""Point-to-point delay, topology-specific collectives and their hierarchical composition.

Every collective is a sequence of synchronous steps.  Within a step each
device pushes ``bytes_per_link`` over ``links`` parallel links, costing one
point-to-point delay; steps never overlap.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterator

from llmpc.errors import ConfigError
from llmpc.sysdesc import NetworkTopology, SystemSpec, bytes_per_element

COLLECTIVE_KINDS = ("all_reduce", "reduce_scatter", "all_gather", "all_to_all", "p2p")


@dataclass(frozen=True)
class CommTime:
    serialization: float = 0.0
    link: float = 0.0
    switching: float = 0.0
    steps: int = 0
    bytes_sent: float = 0.0

    @property
    def seconds(self) -> float:
        return self.serialization + self.link + self.switching

    def __add__(self, other: "CommTime") -> "CommTime":
        return CommTime(self.serialization + other.serialization, self.link + other.link,
                        self.switching + other.switching, self.steps + other.steps,
                        self.bytes_sent + other.bytes_sent)

    def scaled(self, factor: float) -> "CommTime":
        return CommTime(self.serialization * factor, self.link * factor, self.switching * factor,
                        self.steps, self.bytes_sent * factor)


ZERO = CommTime()


@dataclass(frozen=True)
class CollectiveRequest:
    kind: str
    bytes: float
    participants: int
    topology: NetworkTopology | None = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in COLLECTIVE_KINDS:
            raise ConfigError(f"unknown collective kind {self.kind!r}")
        if self.bytes < 0:
            raise ConfigError("collective payload must be >= 0")
        if self.participants < 1:
            raise ConfigError("collective needs >= 1 participant")
        if self.topology is not None and self.participants > self.topology.size:
            raise ConfigError(
                f"{self.participants} participants exceed topology size {self.topology.size}")


@dataclass(frozen=True)
class Step:
    bytes_per_link: float
    links: int = 1
    hops: int = 1


def p2p_delay(nbytes: float, bandwidth: float, hops: int = 1, latency: float = 0.0,
              switch_delay: float = 0.0) -> CommTime:
    if not bandwidth > 0:
        raise ConfigError("p2p_delay: bandwidth must be > 0")
    if hops < 1:
        raise ConfigError("p2p_delay: hops must be >= 1")
    return CommTime(
        serialization=nbytes / bandwidth,
        link=latency * hops,
        switching=switch_delay if hops > 1 else 0.0,
        steps=1,
        bytes_sent=nbytes,
    )


# ---------------------------------------------------------------------------
# step schedules
# ---------------------------------------------------------------------------

def _ring_half(p: int, d: float) -> list[Step]:
    return [Step(d / p)] * (p - 1)


def _rabenseifner_rs(p: int, d: float) -> list[Step]:
    """Recursive halving; non-power-of-two groups first fold the excess ranks."""
    q = 1 << (p.bit_length() - 1)
    steps = [Step(d, hops=2)] if q != p else []
    steps += [Step(d / 2 ** i, hops=2) for i in range(1, int(math.log2(q)) + 1)]
    return steps


def _rabenseifner_ag(p: int, d: float) -> list[Step]:
    q = 1 << (p.bit_length() - 1)
    steps = [Step(d / 2 ** i, hops=2) for i in range(int(math.log2(q)), 0, -1)]
    if q != p:
        steps.append(Step(d, hops=2))
    return steps


def _direct_half(p: int, d: float) -> list[Step]:
    return [Step(d / p, links=p - 1)]


def mesh_group_dims(topology: NetworkTopology, p: int) -> tuple[int, int]:
    rows, cols = topology.mesh_dims
    if p == rows * cols:
        return rows, cols
    if p <= cols and cols % p == 0:
        return 1, p
    if p % cols == 0:
        return p // cols, cols
    raise ConfigError(f"{p} participants do not form a sub-mesh of {rows}x{cols}")


def _mesh_rs(topology: NetworkTopology, p: int, d: float) -> list[Step]:
    r, c = mesh_group_dims(topology, p)
    return _ring_half(r, d) + _ring_half(c, d / r)


def _mesh_ag(topology: NetworkTopology, p: int, d: float) -> list[Step]:
    r, c = mesh_group_dims(topology, p)
    return _ring_half(c, d / r) + _ring_half(r, d)


def reduce_scatter_steps(topology: NetworkTopology, p: int, d: float) -> list[Step]:
    if p <= 1:
        return []
    kind = topology.kind
    if kind == "ring":
        return _ring_half(p, d)
    if kind == "switch":
        return _rabenseifner_rs(p, d)
    if kind == "fully_connected":
        return _direct_half(p, d)
    return _mesh_rs(topology, p, d)


def all_gather_steps(topology: NetworkTopology, p: int, d: float) -> list[Step]:
    if p <= 1:
        return []
    kind = topology.kind
    if kind == "ring":
        return _ring_half(p, d)
    if kind == "switch":
        return _rabenseifner_ag(p, d)
    if kind == "fully_connected":
        return _direct_half(p, d)
    return _mesh_ag(topology, p, d)


def steps_time(steps: list[Step], topology: NetworkTopology, trace: list | None = None,
               kind: str = "", level: int = 0) -> CommTime:
    total = ZERO
    for i, step in enumerate(steps):
        t = p2p_delay(step.bytes_per_link, topology.link_bandwidth, step.hops,
                      topology.link_latency, topology.switch_delay)
        t = CommTime(t.serialization, t.link, t.switching, 1, step.bytes_per_link * step.links)
        total = total + t
        if trace is not None:
            trace.append((kind, level, i, step.bytes_per_link * step.links, t.seconds))
    return total


# ---------------------------------------------------------------------------
# single-level collectives
# ---------------------------------------------------------------------------

def _topology(req: CollectiveRequest) -> NetworkTopology:
    if req.topology is None:
        raise ConfigError(f"{req.kind} request needs a topology")
    return req.topology


def reduce_scatter_time(req: CollectiveRequest, trace: list | None = None) -> CommTime:
    topo = _topology(req)
    return steps_time(reduce_scatter_steps(topo, req.participants, req.bytes), topo, trace,
                      "reduce_scatter")


def all_gather_time(req: CollectiveRequest, trace: list | None = None) -> CommTime:
    topo = _topology(req)
    return steps_time(all_gather_steps(topo, req.participants, req.bytes), topo, trace,
                      "all_gather")


def all_reduce_time(req: CollectiveRequest, trace: list | None = None) -> CommTime:
    if req.kind != "all_reduce":
        raise ConfigError(f"all_reduce_time got a {req.kind} request")
    topo = _topology(req)
    p = req.participants
    steps = reduce_scatter_steps(topo, p, req.bytes) + all_gather_steps(topo, p, req.bytes)
    return steps_time(steps, topo, trace, "all_reduce")


def all_to_all_time(experts: int, capacity: float, dim: int, precision: str,
                    bw_a2a: float) -> CommTime:
    """Fixed-volume dispatch: every device ships E*C*D elements regardless of routing."""
    if not bw_a2a > 0:
        raise ConfigError("all_to_all_time: bandwidth must be > 0")
    volume = experts * capacity * dim * bytes_per_element(precision)
    return CommTime(serialization=volume / bw_a2a, steps=1 if volume else 0, bytes_sent=volume)


def collective_time(req: CollectiveRequest, trace: list | None = None) -> CommTime:
    topo = _topology(req)
    if req.kind == "all_reduce":
        return all_reduce_time(req, trace)
    if req.kind == "reduce_scatter":
        return reduce_scatter_time(req, trace)
    if req.kind == "all_gather":
        return all_gather_time(req, trace)
    if req.kind == "all_to_all":
        if req.participants <= 1:
            return ZERO
        return CommTime(serialization=req.bytes / topo.effective_a2a_bandwidth, steps=1,
                        bytes_sent=req.bytes)
    if req.participants <= 1:
        return ZERO
    return p2p_delay(req.bytes, topo.link_bandwidth, topo.hops, topo.link_latency,
                     topo.switch_delay)


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

def group_levels(system: SystemSpec, participants: int,
                 stride: int = 1) -> list[tuple[int, NetworkTopology, int]]:
    """Map a group of ``participants`` devices spaced ``stride`` apart onto hierarchy levels.

    Returns ``(level index, topology, devices of the group at that level)``
    for every level the group spans, innermost first.
    """
    out = []
    remaining, s = participants, stride
    for i, topo in enumerate(system.levels):
        if remaining == 1:
            break
        n = topo.size
        if s >= n:
            if s % n:
                raise ConfigError(f"group stride {stride} does not factor across level {i} (size {n})")
            s //= n
            continue
        if n % s:
            raise ConfigError(f"group stride {stride} does not factor across level {i} (size {n})")
        avail = n // s
        take = min(avail, remaining)
        if remaining % take:
            raise ConfigError(f"group of {participants} does not factor across level {i}")
        if take < avail and remaining > take:
            raise ConfigError(f"group of {participants} is not contiguous at level {i}")
        out.append((i, topo, take))
        remaining //= take
        s = 1
    if remaining != 1:
        raise ConfigError(f"group of {participants} (stride {stride}) exceeds the system")
    return out


def hierarchical_collective_time(req: CollectiveRequest, system: SystemSpec,
                                 trace: list | None = None) -> CommTime:
    """Reduce-scatter inward level by level, then all-gather back outward."""
    if req.participants <= 1:
        return ZERO
    levels = group_levels(system, req.participants, req.stride)
    if req.kind in ("all_to_all", "p2p"):
        _, topo, p = levels[-1]
        return collective_time(CollectiveRequest(req.kind, req.bytes, p, topo), trace)
    total = ZERO
    payloads = []
    d = req.bytes
    for _, _, p in levels:
        payloads.append(d)
        d /= p
    if req.kind in ("all_reduce", "reduce_scatter"):
        for (i, topo, p), d in zip(levels, payloads):
            total += steps_time(reduce_scatter_steps(topo, p, d), topo, trace, "reduce_scatter", i)
    if req.kind in ("all_reduce", "all_gather"):
        for (i, topo, p), d in reversed(list(zip(levels, payloads))):
            total += steps_time(all_gather_steps(topo, p, d), topo, trace, "all_gather", i)
    return total


def outermost_a2a_bandwidth(system: SystemSpec, participants: int, stride: int = 1) -> float:
    levels = group_levels(system, participants, stride)
    topo = levels[-1][1] if levels else system.levels[0]
    return topo.effective_a2a_bandwidth


def p2p_level(system: SystemSpec, stride: int) -> NetworkTopology:
    """Topology carrying transfers between devices ``stride`` apart."""
    acc = 1
    for topo in system.levels:
        acc *= topo.size
        if stride < acc:
            return topo
    return system.levels[-1]


def trace_csv(rows: Iterator[tuple] | list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "level", "step", "bytes", "seconds"])
    for kind, level, step, nbytes, seconds in rows:
        writer.writerow([kind, level, step, repr(float(nbytes)), repr(float(seconds))])
    return buf.getvalue()
