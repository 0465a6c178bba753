"""Shortcut router: accept the direct segmentation when presence clears a
threshold that grows with instruction length."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Path(str, enum.Enum):
    Direct = "Direct"
    Reason = "Reason"


@dataclass(frozen=True)
class RouteDecision:
    threshold: float
    presence: float
    path: Path


def word_count(instruction: str) -> int:
    # an empty instruction counts as one word
    return max(1, len(instruction.split()))


def threshold(instruction: str) -> float:
    t = 0.1 * 2.0 ** (word_count(instruction) - 1)
    return min(1.0, max(0.0, t))


def route(presence: float, instruction: str) -> RouteDecision:
    if not 0.0 <= presence <= 1.0:
        raise ValueError(f"presence must lie in [0, 1], got {presence}")
    t = threshold(instruction)
    return RouteDecision(t, presence, Path.Direct if presence >= t else Path.Reason)
