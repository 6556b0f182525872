"""Labelled time accounting shared by the attention, MoE and engine layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from llmpc.roofline import KernelTime


@dataclass
class TimeBreakdown:
    components: dict[str, float] = field(default_factory=dict)
    bound_tags: dict[str, str] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    # largest single contribution per label; decides which bound tag wins
    _dominant: dict[str, float] = field(default_factory=dict, repr=False, compare=False)

    @property
    def total(self) -> float:
        return sum(self.components.values())

    def add(self, label: str, seconds: float, bound: str | None = None) -> "TimeBreakdown":
        if seconds < 0:
            raise ValueError(f"negative time for {label!r}")
        self.components[label] = self.components.get(label, 0.0) + seconds
        if bound is not None and seconds >= self._dominant.get(label, -1.0):
            self._dominant[label] = seconds
            self.bound_tags[label] = bound
        return self

    def add_kernel(self, label: str, kt: KernelTime) -> "TimeBreakdown":
        return self.add(label, kt.seconds, kt.bound_by)

    def merge(self, other: "TimeBreakdown", scale: float = 1.0) -> "TimeBreakdown":
        for label, seconds in other.components.items():
            self.add(label, seconds * scale, other.bound_tags.get(label))
        return self

    def scaled(self, factor: float) -> "TimeBreakdown":
        return TimeBreakdown(metadata=dict(self.metadata)).merge(self, factor)

    def get(self, label: str) -> float:
        return self.components.get(label, 0.0)

    def sum_of(self, labels: Iterable[str]) -> float:
        return sum(self.components.get(lbl, 0.0) for lbl in labels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "components": dict(self.components),
            "bound_tags": dict(self.bound_tags),
            "total": self.total,
            "metadata": dict(self.metadata),
        }
