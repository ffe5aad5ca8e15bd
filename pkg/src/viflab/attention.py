"""Attention kernels: tempered softmax, allocation accounting, reallocation.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .tokens import TokenType

Band = tuple[int, int]

# Relay tokens are vision tokens carried over from an earlier agent; for mask
# construction they count as (always active) vision.
_VISUAL = (TokenType.VISION, TokenType.RELAY)


@dataclass(frozen=True)
class ReallocationConfig:
    """Temperature and reallocation coefficients for the middle/deep bands.

    Bands are inclusive ``(first, last)`` layer indices.
    """

    middle_band: Band
    deep_band: Band
    tau: float = 0.8
    alpha_middle: float = 0.1
    alpha_deep: float = 0.3

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ParameterError(f"tau must be positive, got {self.tau}")
        for name in ("alpha_middle", "alpha_deep"):
            a = getattr(self, name)
            if not 0.0 <= a < 1.0:
                raise ParameterError(f"{name} must be in [0, 1), got {a}")
        for band in (self.middle_band, self.deep_band):
            if len(band) != 2 or band[0] > band[1] or band[0] < 0:
                raise ParameterError(f"invalid band {band}")
        lo = max(self.middle_band[0], self.deep_band[0])
        hi = min(self.middle_band[1], self.deep_band[1])
        if lo <= hi:
            raise ParameterError("middle and deep bands overlap")

    @classmethod
    def for_depth(cls, depth: int, **kwargs) -> "ReallocationConfig":
        from .model import layer_bands

        bands = layer_bands(depth)
        return cls(middle_band=bands["middle"], deep_band=bands["deep"], **kwargs)

    def check_depth(self, depth: int) -> None:
        if max(self.middle_band[1], self.deep_band[1]) >= depth:
            raise ValidationError(f"reallocation bands exceed model depth {depth}")

    def band_of(self, layer: int) -> str | None:
        if self.middle_band[0] <= layer <= self.middle_band[1]:
            return "middle"
        if self.deep_band[0] <= layer <= self.deep_band[1]:
            return "deep"
        return None


@dataclass(frozen=True)
class MaskSpec:
    """Key positions whose mass is collected (source) and those receiving it (sink)."""

    source: frozenset[int]
    sink: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "source", frozenset(int(i) for i in self.source))
        object.__setattr__(self, "sink", frozenset(int(i) for i in self.sink))
        if self.source & self.sink:
            raise ValidationError(
                f"source and sink overlap at {sorted(self.source & self.sink)}"
            )

    def check_width(self, width: int) -> None:
        for idx in self.source | self.sink:
            if not 0 <= idx < width:
                raise ValidationError(f"mask index {idx} outside row of length {width}")

    def as_arrays(self, width: int) -> tuple[np.ndarray, np.ndarray]:
        self.check_width(width)
        src = np.zeros(width, dtype=bool)
        snk = np.zeros(width, dtype=bool)
        src[list(self.source)] = True
        snk[list(self.sink)] = True
        return src, snk


def _check_tau(tau: float) -> None:
    if not (np.isfinite(tau) and tau > 0):
        raise ParameterError(f"temperature must be positive and finite, got {tau}")


def softmax_tempered(scores, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``scores / tau`` along the last axis.

    >>> softmax_tempered([np.log(2.0), 0.0], 1.0).round(6).tolist()
    [0.666667, 0.333333]
    """
    _check_tau(tau)
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[-1] == 0:
        raise ValidationError("score row must have at least one entry")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    z = s / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_tempered(scores: np.ndarray, visible: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Tempered softmax where ``visible == False`` keys get exactly zero weight.

    Every row must have at least one visible key.  Only visible scores need
    to be finite.
    """
    _check_tau(tau)
    s = np.asarray(scores, dtype=np.float64)
    visible = np.broadcast_to(visible, s.shape)
    if not np.all(visible.any(axis=-1)):
        raise ValidationError("every row needs at least one visible key")
    if not np.all(np.isfinite(s[visible])):
        raise ValidationError("visible scores must be finite")
    z = np.where(visible, s / tau, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(visible, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def allocation_by_type(
    attention,
    tags: Sequence[TokenType],
    types: Iterable[TokenType] | None = None,
) -> dict[TokenType, float]:
    """Fraction of attention mass received by each token type.

    ``attention`` is a ``(Q, K)`` matrix of row-stochastic query rows (or a
    single row).  Mass is summed over all queries and divided by ``Q``.  By
    default the result has one entry per type present in ``tags``; pass
    ``types`` to report a fixed set (absent types get 0.0).
    """
    a = np.atleast_2d(np.asarray(attention, dtype=np.float64))
    tags = list(tags)
    if a.shape[1] != len(tags):
        raise ValidationError(f"{len(tags)} tags for attention width {a.shape[1]}")
    per_key = a.sum(axis=0) / a.shape[0]
    if types is None:
        types = [t for t in TokenType if t in tags]
    out = {}
    for t in types:
        sel = np.array([tag is t for tag in tags])
        out[t] = float(per_key[sel].sum()) if sel.any() else 0.0
    return out


def reallocate_rows(
    attention,
    mask: MaskSpec,
    alpha: float,
    visible: np.ndarray | None = None,
) -> np.ndarray:
    """Move ``alpha`` of the source mass of every row onto the sink keys.

    Works on any array whose last axis indexes keys.  Each source entry is
    scaled by ``1 - alpha``; the collected mass is split over the sink
    entries in proportion to their current weight (uniformly if the sinks
    carry no mass).  ``visible`` restricts, per row, which keys may act as
    sinks (used for causal attention so no mass reaches future keys).  Rows
    with no source or no visible sink are returned unchanged.
    """
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must be in [0, 1), got {alpha}")
    a = np.array(attention, dtype=np.float64, copy=True)
    width = a.shape[-1]
    src, snk = mask.as_arrays(width)
    if not src.any() or not snk.any() or alpha == 0.0:
        return a
    if visible is None:
        sink_ok = np.broadcast_to(snk, a.shape)
    else:
        sink_ok = np.broadcast_to(visible, a.shape) & snk
    has_sink = sink_ok.any(axis=-1, keepdims=True)

    src_mass = (a * src).sum(axis=-1, keepdims=True)
    collected = alpha * src_mass
    sink_w = np.where(sink_ok, a, 0.0)
    sink_mass = sink_w.sum(axis=-1, keepdims=True)
    n_sink = sink_ok.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(
            sink_mass > 0,
            sink_w / sink_mass,
            np.where(sink_ok, 1.0 / np.maximum(n_sink, 1), 0.0),
        )
    updated = np.where(src, a * (1.0 - alpha), a) + share * collected
    return np.where(has_sink, updated, a)


def reallocate_row(row, mask: MaskSpec, alpha: float) -> np.ndarray:
    """Single-row form of :func:`reallocate_rows`."""
    r = np.asarray(row, dtype=np.float64)
    if r.ndim != 1:
        raise ValidationError("expected a single attention row")
    return reallocate_rows(r, mask, alpha)


def build_masks(tags: Sequence[TokenType], inactive_vision: Iterable[int], band: str) -> MaskSpec:
    """Collection/reallocation key sets for one band.

    middle: collect from inactive vision and instruction keys, give to the
    remaining (active) vision keys.  deep: collect from all vision keys,
    give to instruction keys.  Relay keys are treated as active vision.
    """
    tags = list(tags)
    inactive = {int(i) for i in inactive_vision}
    for i in inactive:
        if not 0 <= i < len(tags) or tags[i] is not TokenType.VISION:
            raise ValidationError(f"inactive index {i} is not a vision position")
    visual = {i for i, t in enumerate(tags) if t in _VISUAL}
    instruction = {i for i, t in enumerate(tags) if t is TokenType.INSTRUCTION}
    if band == "middle":
        return MaskSpec(source=frozenset(inactive | instruction), sink=frozenset(visual - inactive))
    if band == "deep":
        return MaskSpec(source=frozenset(visual), sink=frozenset(instruction))
    raise ValidationError(f"unknown band {band!r}")


def key_norms(key_vectors) -> np.ndarray:
    """Euclidean norm of each row."""
    k = np.asarray(key_vectors, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise ValidationError("key vectors must be finite")
    return np.linalg.norm(np.atleast_2d(k), axis=-1)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def profile_sums_ok(profile: Mapping[TokenType, float], tol: float = 1e-9) -> bool:
    return abs(sum(profile.values()) - 1.0) <= tol
