"""Independent reference implementations used to check the analytical models.

Nothing here imports the step schedules of ``network``, the pipeline formula
of ``parallelism`` or the tile rule of ``roofline``.  Each oracle rebuilds the
quantity from first principles:

* collectives: a discrete-event simulation that moves explicit chunks
  between ranks and checks that every rank ends with the right data;
* pipelines: list scheduling of the forward/backward task graph;
* GEMM tiling: loop-nest counting over every admissible square tile.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

from llmpc.errors import ConfigError
from llmpc.sysdesc import NetworkTopology, SystemSpec

# ---------------------------------------------------------------------------
# collectives
# ---------------------------------------------------------------------------


@dataclass
class Transfer:
    src: int
    dst: int
    chunks: tuple[int, ...]
    hops: int
    reduce: bool
    topology: NetworkTopology


@dataclass
class SimResult:
    seconds: float
    bytes_sent: dict[int, float]
    steps: int
    correct: bool
    buffers: dict[int, dict[int, frozenset]] = field(repr=False, default_factory=dict)


Round = list[Transfer]


class _RingView:
    """A mesh line treated as a ring of one-hop links (the mesh routing model)."""

    kind = "ring"

    def __init__(self, topo: NetworkTopology):
        self.link_bandwidth = topo.link_bandwidth
        self.link_latency = topo.link_latency
        self.switch_delay = topo.switch_delay


def _split(chunks: tuple[int, ...], parts: int) -> list[tuple[int, ...]]:
    if len(chunks) % parts:
        raise ConfigError(f"{len(chunks)} chunks do not split into {parts} blocks")
    w = len(chunks) // parts
    return [chunks[i * w:(i + 1) * w] for i in range(parts)]


def _merge(a: list[Round], b: list[Round]) -> list[Round]:
    """Run two independent groups side by side, round by round."""
    return [(a[i] if i < len(a) else []) + (b[i] if i < len(b) else [])
            for i in range(max(len(a), len(b)))]


def _rs_group(members: list[int], topo, owned: dict[int, tuple[int, ...]]) -> list[Round]:
    """Reduce-scatter rounds for one group; updates ``owned`` in place."""
    p = len(members)
    chunks = owned[members[0]]
    if topo.kind == "ring":
        blocks = _split(chunks, p)
        rounds = [[Transfer(src, members[(i + 1) % p], blocks[(i - s) % p], 1, True, topo)
                   for i, src in enumerate(members)] for s in range(p - 1)]
        for i, r in enumerate(members):
            owned[r] = blocks[(i + 1) % p]
        return rounds
    if topo.kind == "fully_connected":
        blocks = _split(chunks, p)
        rnd = [Transfer(src, dst, blocks[j], 1, True, topo)
               for i, src in enumerate(members) for j, dst in enumerate(members) if i != j]
        for j, r in enumerate(members):
            owned[r] = blocks[j]
        return [rnd]
    if topo.kind == "switch":
        if p & (p - 1):
            raise ConfigError("switch oracle needs a power-of-two group")
        rounds = []
        half = p // 2
        while half:
            rnd, nxt = [], {}
            for i, r in enumerate(members):
                lo, hi = _split(owned[r], 2)
                keep, give = (lo, hi) if not i & half else (hi, lo)
                rnd.append(Transfer(r, members[i ^ half], give, 2, True, topo))
                nxt[r] = keep
            owned.update(nxt)
            rounds.append(rnd)
            half //= 2
        return rounds
    raise ConfigError(f"oracle has no reduce-scatter for {topo.kind!r}")


def _ag_group(members: list[int], topo, owned: dict[int, tuple[int, ...]],
              full: dict[int, tuple[int, ...]]) -> list[Round]:
    """All-gather rounds undoing ``_rs_group``: ``full`` is the pre-scatter ownership."""
    p = len(members)
    if topo.kind == "ring":
        blocks = _split(full[members[0]], p)
        return [[Transfer(src, members[(i + 1) % p], blocks[(i + 1 - s) % p], 1, False, topo)
                 for i, src in enumerate(members)] for s in range(p - 1)]
    if topo.kind == "fully_connected":
        return [[Transfer(src, dst, owned[src], 1, False, topo)
                 for src in members for dst in members if src != dst]]
    rounds = []
    cur = {r: owned[r] for r in members}
    half = 1
    while half < p:
        rnd = [Transfer(r, members[i ^ half], cur[r], 2, False, topo)
               for i, r in enumerate(members)]
        cur = {r: tuple(sorted(cur[r] + cur[members[i ^ half]])) for i, r in enumerate(members)}
        rounds.append(rnd)
        half *= 2
    return rounds


def _mesh_shape(topo: NetworkTopology, p: int) -> tuple[int, int]:
    rows, cols = topo.mesh_dims
    if p == rows * cols:
        return rows, cols
    if p <= cols:
        return 1, p
    return p // cols, cols


def _phases(system: SystemSpec, members: list[int]) -> list[tuple[object, list[list[int]]]]:
    """Ordered (topology, groups) phases of the inward reduce-scatter."""
    sizes = [t.size for t in system.levels]

    def coords(dev: int) -> tuple[int, ...]:
        out = []
        for n in sizes:
            out.append(dev % n)
            dev //= n
        return tuple(out)

    phases: list[tuple[object, list[list[int]]]] = []
    for i, topo in enumerate(system.levels):
        buckets: dict[tuple, list[int]] = {}
        for m in members:
            c = coords(m)
            buckets.setdefault(c[:i] + c[i + 1:], []).append(m)
        groups = [g for g in buckets.values() if len(g) > 1]
        if not groups:
            continue
        if topo.kind != "mesh2d":
            phases.append((topo, groups))
            continue
        rows, cols = _mesh_shape(topo, len(groups[0]))
        ring = _RingView(topo)
        grids = [[g[r * cols:(r + 1) * cols] for r in range(rows)] for g in groups]
        if rows > 1:
            phases.append((ring, [[grid[r][c] for r in range(rows)]
                                  for grid in grids for c in range(cols)]))
        if cols > 1:
            phases.append((ring, [row for grid in grids for row in grid]))
    return phases


def transfer_seconds(t: Transfer, chunk_bytes: float) -> float:
    topo = t.topology
    nbytes = len(t.chunks) * chunk_bytes
    switching = topo.switch_delay if t.hops > 1 else 0.0
    return nbytes / topo.link_bandwidth + topo.link_latency * t.hops + switching


def simulate(rounds: list[Round], ranks: Sequence[int], chunk_bytes: float,
             n_chunks: int, initial: dict[int, dict[int, frozenset]] | None = None) -> SimResult:
    """Event-driven execution of per-rank rounds.

    A rank starts round k once its own round k-1 sends have left and every
    round k-1 message addressed to it has arrived.  Sends from one rank in a
    round use separate links and run concurrently.
    """
    buffers = initial or {r: {c: frozenset([r]) for c in range(n_chunks)} for r in ranks}
    sent = {r: 0.0 for r in ranks}
    ready = {r: 0.0 for r in ranks}
    events: list[tuple[float, int, int, Transfer, dict]] = []
    seq = itertools.count()
    for rnd in rounds:
        busy = {}
        for t in rnd:
            start = ready[t.src]
            done = start + transfer_seconds(t, chunk_bytes)
            payload = {c: buffers[t.src][c] for c in t.chunks}
            heapq.heappush(events, (done, next(seq), t.dst, t, payload))
            busy[t.src] = max(busy.get(t.src, start), done)
            sent[t.src] += len(t.chunks) * chunk_bytes
        arrivals = dict(busy)
        while events:
            when, _, dst, t, payload = heapq.heappop(events)
            arrivals[dst] = max(arrivals.get(dst, ready[dst]), when)
            for c, contrib in payload.items():
                buffers[dst][c] = buffers[dst][c] | contrib if t.reduce else contrib
        for r, when in arrivals.items():
            ready[r] = max(ready[r], when)
    total = max(ready.values()) if ready else 0.0
    return SimResult(total, sent, len(rounds), True, buffers)


def simulate_collective(system: SystemSpec, participants: int, nbytes: float,
                        kind: str = "all_reduce", stride: int = 1) -> SimResult:
    """Hierarchical reduce-scatter inward then all-gather outward, executed chunk by chunk."""
    members = [k * stride for k in range(participants)]
    if participants <= 1:
        return SimResult(0.0, {m: 0.0 for m in members}, 0, True)
    if kind not in ("all_reduce", "reduce_scatter"):
        raise ConfigError(f"oracle does not simulate {kind!r}")
    phases = _phases(system, members)
    n_chunks = math.prod(len(groups[0]) for _, groups in phases)
    chunk_bytes = nbytes / n_chunks
    owned = {m: tuple(range(n_chunks)) for m in members}
    rounds: list[Round] = []
    history = []
    for topo, groups in phases:
        before = dict(owned)
        level: list[Round] = []
        for g in groups:
            level = _merge(level, _rs_group(g, topo, owned))
        history.append((topo, groups, before, dict(owned)))
        rounds += level
    if kind == "all_reduce":
        for topo, groups, before, after in reversed(history):
            level = []
            for g in groups:
                level = _merge(level, _ag_group(g, topo, after, before))
            rounds += level
    res = simulate(rounds, members, chunk_bytes, n_chunks)
    everyone = frozenset(members)
    wanted = {m: range(n_chunks) for m in members} if kind == "all_reduce" else owned
    res.correct = all(res.buffers[m][c] == everyone for m in members for c in wanted[m])
    return res


def ring_serialized_bytes(p: int, nbytes: float) -> float:
    """Bytes each rank pushes in a ring all-reduce, by direct counting of chunk moves."""
    return sum(nbytes / p for _ in range(2 * (p - 1)))


def mesh_neighbors(rows: int, cols: int) -> dict[tuple[int, int], int]:
    out = {}
    for r in range(rows):
        for c in range(cols):
            out[(r, c)] = sum(0 <= r + dr < rows and 0 <= c + dc < cols
                              for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)))
    return out


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def stage_order(schedule: str, stage: int, stages: int, m: int) -> list[tuple[str, int]]:
    if schedule == "gpipe":
        return [("F", i) for i in range(m)] + [("B", i) for i in range(m)]
    if schedule != "pipedream_flush":
        raise ConfigError(f"unknown schedule {schedule!r}")
    warm = min(stages - stage - 1, m)
    order = [("F", i) for i in range(warm)]
    f, b = warm, 0
    while f < m:
        order += [("F", f), ("B", b)]
        f += 1
        b += 1
    order += [("B", i) for i in range(b, m)]
    return order


def pipeline_makespan(m: int, stages: int, t_forward: float, t_backward: float,
                      schedule: str = "pipedream_flush") -> float:
    """Earliest-start list scheduling of the F/B task graph with one task per stage at a time."""
    orders = [stage_order(schedule, s, stages, m) for s in range(stages)]
    done: dict[tuple[str, int, int], float] = {}
    pos = [0] * stages
    clock = [0.0] * stages
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s in range(stages):
            if pos[s] == len(orders[s]):
                continue
            op, mb = orders[s][pos[s]]
            deps = []
            if op == "F" and s > 0:
                deps.append(("F", s - 1, mb))
            if op == "B":
                deps.append(("F", s, mb))
                if s < stages - 1:
                    deps.append(("B", s + 1, mb))
            if any(d not in done for d in deps):
                continue
            dep_ready = max((done[d] for d in deps), default=0.0)
            start = max(clock[s], dep_ready)
            clock[s] = start + (t_forward if op == "F" else t_backward)
            done[(op, s, mb)] = clock[s]
            pos[s] += 1
            remaining -= 1
            progressed = True
        if not progressed:
            raise RuntimeError("pipeline schedule deadlocked")
    return max(clock)


def peak_in_flight(m: int, stages: int, schedule: str = "pipedream_flush") -> int:
    """Most microbatches whose activations stage 0 holds at once."""
    live = peak = 0
    for op, _ in stage_order(schedule, 0, stages, m):
        live += 1 if op == "F" else -1
        peak = max(peak, live)
    return peak


# ---------------------------------------------------------------------------
# GEMM tiling
# ---------------------------------------------------------------------------

def tiled_traffic(m: int, n: int, k: int, tile: int, elem_bytes: int) -> int:
    """Count element transfers of an output-stationary tiled loop nest."""
    total = 0
    for i0 in range(0, m, tile):
        mi = min(tile, m - i0)
        for j0 in range(0, n, tile):
            nj = min(tile, n - j0)
            total += mi * k + k * nj + 2 * mi * nj
    return total * elem_bytes


def best_square_tile(m: int, n: int, k: int, capacity: float,
                     elem_bytes: int) -> tuple[int, int]:
    """Exhaustive minimum of traffic over square tiles whose three blocks fit."""
    best = None
    for t in range(1, min(m, n, k) + 1):
        if 3 * t * t * elem_bytes > capacity:
            break
        traffic = tiled_traffic(m, n, k, t, elem_bytes)
        if best is None or traffic < best[1]:
            best = (t, traffic)
    if best is None:
        return 1, tiled_traffic(m, n, k, 1, elem_bytes)
    return best


def flops_reference(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


__all__ = [
    "SimResult", "simulate_collective", "ring_serialized_bytes", "mesh_neighbors",
    "pipeline_makespan", "peak_in_flight", "stage_order", "tiled_traffic",
    "best_square_tile", "flops_reference",
]
