"""Snowballing metrics: HS score, propagation distances, allocation decay."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import TYPE_CHECKING, Sequence

from .errors import ValidationError
from .selection import peak_salience

__all__ = [
    "DEFAULT_ONSET", "HSRecord", "allocation_decay", "hs_score", "hs_weight",
    "peak_salience", "percent", "propagation_distances", "trace_hs",
]

if TYPE_CHECKING:
    from .mas import SystemTrace

DEFAULT_ONSET = 20.0


@dataclass(frozen=True)
class HSRecord:
    severities: tuple[float, ...]
    distances: tuple[int, ...]
    total_distance: int

    def __post_init__(self):
        h = tuple(float(x) for x in self.severities)
        d = tuple(int(x) for x in self.distances)
        object.__setattr__(self, "severities", h)
        object.__setattr__(self, "distances", d)
        if len(h) != len(d):
            raise ValidationError("need one distance per severity")
        if self.total_distance < 1:
            raise ValidationError("total distance must be a positive integer")
        if any(not 0.0 <= x <= 100.0 for x in h):
            raise ValidationError("severities must lie in [0, 100]")
        if any(x < 0 or x > self.total_distance for x in d):
            raise ValidationError("distances must lie in [0, D]")

    @property
    def n(self) -> int:
        return len(self.severities)


def hs_weight(d: float, total_distance: float) -> float:
    return 1.0 / (1.0 + math.exp(total_distance / 2.0 - d))


def hs_score(record: HSRecord) -> float:
    """Mean of severities weighted by a sigmoid of propagation distance."""
    if record.n == 0:
        raise ValidationError("HS score needs at least one agent activation")
    D = record.total_distance
    total = sum(hs_weight(d, D) * h for h, d in zip(record.severities, record.distances))
    return total / record.n


def propagation_distances(
    trace: "SystemTrace", onset: float = DEFAULT_ONSET
) -> tuple[list[int], int]:
    """Hop distances of each activation from the hallucination onset.

    The realised communication graph links each activation to the earlier
    activations whose outputs it consumed.  The origin is the first
    activation with severity above ``onset``; activations before it, or not
    downstream of it, get 0.  ``D`` is the largest shortest-hop distance
    between any two connected activations (at least 1), so ``d_i <= D``.
    """
    logs = trace.logs
    children: dict[int, list[int]] = {log.turn: [] for log in logs}
    for log in logs:
        for src in log.inbound_turns:
            children[src].append(log.turn)

    def hops(start: int) -> dict[int, int]:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in children[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    D = max(1, max(max(hops(log.turn).values()) for log in logs))
    origin = next((log.turn for log in logs if log.severity > onset), None)
    if origin is None:
        return [0] * len(logs), D
    dist = hops(origin)
    return [dist.get(log.turn, 0) for log in logs], D


def trace_hs(trace: "SystemTrace", onset: float = DEFAULT_ONSET) -> float:
    d, D = propagation_distances(trace, onset)
    return hs_score(HSRecord(tuple(log.severity for log in trace.logs), tuple(d), D))


def allocation_decay(series: Sequence[float]) -> tuple[list[float], float]:
    """Series plus relative reduction first -> last (negative means growth)."""
    s = [float(x) for x in series]
    if not s:
        raise ValidationError("empty series")
    if s[0] == 0:
        return s, 0.0
    return s, (s[0] - s[-1]) / s[0]


def percent(fraction: float, places: int = 1) -> float:
    """Fraction as a percentage rounded half-up to ``places`` decimals."""
    q = Decimal(1).scaleb(-places)
    return float((Decimal(repr(fraction)) * 100).quantize(q, rounding=ROUND_HALF_UP))
