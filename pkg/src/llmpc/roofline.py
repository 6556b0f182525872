"""Hierarchical roofline: kernel descriptors in, execution time and boundedness out."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from llmpc.errors import ConfigError
from llmpc.sysdesc import AcceleratorSpec, bytes_per_element

# Per-element flop weights of pointwise kernels.  exp counts as one flop.
SOFTMAX_FLOPS = 5  # max, subtract, exp, sum, divide
LAYERNORM_FLOPS = 5
GELU_FLOPS = 8
DROPOUT_FLOPS = 2
MASK_FLOPS = 1
ADD_FLOPS = 1

COMPUTE = "compute"


@dataclass(frozen=True)
class KernelDescriptor:
    name: str
    flops: float
    bytes_per_level: Mapping[str, float] = field(default_factory=dict)
    precision: str = "bf16"

    def __post_init__(self):
        if self.flops < 0:
            raise ConfigError(f"kernel {self.name!r}: flops must be >= 0")
        for level, nbytes in self.bytes_per_level.items():
            if nbytes < 0:
                raise ConfigError(f"kernel {self.name!r}: bytes at {level!r} must be >= 0")

    def scaled(self, flop_factor: float = 1.0, byte_factor: float | None = None,
               name: str | None = None) -> "KernelDescriptor":
        bf = flop_factor if byte_factor is None else byte_factor
        return KernelDescriptor(
            name or self.name,
            self.flops * flop_factor,
            {lvl: b * bf for lvl, b in self.bytes_per_level.items()},
            self.precision,
        )


@dataclass(frozen=True)
class KernelTime:
    seconds: float
    bound_by: str
    name: str = ""


def kernel_time(k: KernelDescriptor, acc: AcceleratorSpec) -> KernelTime:
    best = k.flops / acc.peak(k.precision)
    bound = COMPUTE
    for level_name, nbytes in k.bytes_per_level.items():
        t = nbytes / acc.level(level_name).bandwidth
        # ties stay with compute (strict comparison)
        if t > best:
            best, bound = t, level_name
    return KernelTime(best, bound, k.name)


def square_tile(capacity: float, elem_bytes: int, m: int, n: int, k: int) -> int:
    """Largest square tile with two operands and an accumulator resident."""
    t = math.isqrt(int(capacity // (3 * elem_bytes)))
    return max(1, min(t, m, n, k))


def gemm_traffic(m: int, n: int, k: int, tile: int, elem_bytes: int) -> int:
    return (m * k * math.ceil(n / tile) + k * n * math.ceil(m / tile) + 2 * m * n) * elem_bytes


def gemm_descriptor(m: int, n: int, k: int, precision: str, acc: AcceleratorSpec,
                    batch: int = 1, name: str = "gemm",
                    levels: Iterable[str] | None = None) -> KernelDescriptor:
    """``batch`` independent (m x k) @ (k x n) products.

    Traffic at each level is set by the tile that fits the next level inward;
    the innermost level sees only compulsory operand traffic.  ``levels``
    restricts which hierarchy levels get a traffic term (outermost first).
    """
    if min(m, n, k) < 1:
        raise ConfigError(f"gemm {name!r}: m, n, k must be >= 1")
    b = bytes_per_element(precision)
    hierarchy = acc.memory_levels
    traffic: dict[str, float] = {}
    for i, level in enumerate(hierarchy):
        if i + 1 < len(hierarchy):
            t = square_tile(hierarchy[i + 1].capacity, b, m, n, k)
            traffic[level.name] = batch * gemm_traffic(m, n, k, t, b)
        else:
            traffic[level.name] = batch * (m * k + k * n + 2 * m * n) * b
    if levels is not None:
        keep = set(levels)
        traffic = {lvl: v for lvl, v in traffic.items() if lvl in keep}
    return KernelDescriptor(name, 2.0 * m * n * k * batch, traffic, precision)


def pointwise_descriptor(elements: float, flops_per_element: float, precision: str,
                         level: str = "hbm", name: str = "pointwise",
                         passes: float = 1.0) -> KernelDescriptor:
    """Read + write of every element at ``level``; ``passes`` fuses repeated ops."""
    if elements < 0:
        raise ConfigError(f"pointwise {name!r}: elements must be >= 0")
    b = bytes_per_element(precision)
    return KernelDescriptor(name, elements * flops_per_element,
                            {level: 2.0 * elements * b * passes}, precision)


def trace_csv(rows: Iterable[tuple[KernelDescriptor, KernelTime]]) -> str:
    rows = list(rows)
    levels: list[str] = []
    for desc, _ in rows:
        for lvl in desc.bytes_per_level:
            if lvl not in levels:
                levels.append(lvl)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "flops", *[f"bytes_{lvl}" for lvl in levels], "seconds", "bound_by"])
    for desc, kt in rows:
        writer.writerow([desc.name, repr(float(desc.flops)),
                         *[repr(float(desc.bytes_per_level.get(lvl, 0.0))) for lvl in levels],
                         repr(kt.seconds), kt.bound_by])
    return buf.getvalue()
