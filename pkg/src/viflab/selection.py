"""Trajectory classification and relay-token selection.

A trajectory is the attention mass one vision token receives in each
middle-band layer.  Tokens are sorted into five subsets (inactive, rise,
fall, unimodal, unclassified); the unimodal ones become relay tokens.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ParameterError, SelectionError, ValidationError

EPS = 1e-12
MAX_RANDOM_RETRIES = 10_000


class SubsetLabel(enum.Enum):
    RANDOM = "random"
    INACTIVE = "inactive"
    RISE = "rise"
    FALL = "fall"
    UNIMODAL = "unimodal"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class SelectionParams:
    omega: float = 0.3
    trend_tolerance: float = 0.15
    inactive_fluctuation: float = 0.20
    random_component_cap: float = 0.10
    keynorm_buffer: int = 3

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ParameterError(f"omega must be in (0, 1), got {self.omega}")
        if self.trend_tolerance < 0:
            raise ParameterError("trend_tolerance must be >= 0")
        if self.inactive_fluctuation < 0 or not 0 < self.random_component_cap <= 1:
            raise ParameterError("fluctuation / component cap out of range")
        if not 0 <= self.keynorm_buffer <= 8:
            raise ParameterError("keynorm_buffer must be in [0, 8]")


@dataclass(frozen=True)
class Trajectory:
    token_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("trajectory values must be a finite vector")
        object.__setattr__(self, "values", v)


def peak_salience(values) -> float:
    """Relative prominence of the maximum over the higher endpoint, floored at 0."""
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if v.size < 3:
        raise ValidationError("salience needs at least three points")
    peak = v.max()
    return max(0.0, float((peak - max(v[0], v[-1])) / max(peak, EPS)))


def _tolerated_nondecreasing(v: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.diff(v) >= -tol))


def _tolerated_nonincreasing(v: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.diff(v) <= tol))


def _is_unimodal(v: np.ndarray, params: SelectionParams) -> bool:
    peak = v.max()
    at_peak = np.flatnonzero(v == peak)
    # one contiguous maximal plateau
    if at_peak[-1] - at_peak[0] + 1 != at_peak.size:
        return False
    first, last = at_peak[0], at_peak[-1]
    if first == 0 or last == v.size - 1:
        return False
    tol = params.trend_tolerance * peak
    if not _tolerated_nondecreasing(v[: first + 1], tol):
        return False
    if not _tolerated_nonincreasing(v[last:], tol):
        return False
    return peak_salience(v) >= params.omega


def classify_trajectory(
    traj: Trajectory | Sequence[float],
    params: SelectionParams,
    global_lower_quartile: float,
) -> SubsetLabel:
    """Label one trajectory.  Precedence: inactive, unimodal, rise, fall."""
    v = traj.values if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if v.size < 3:
        raise ValidationError(f"trajectory needs >= 3 layers, got {v.size}")
    mean = float(v.mean())
    if mean < global_lower_quartile and (v.max() - v.min()) / max(mean, EPS) <= params.inactive_fluctuation:
        return SubsetLabel.INACTIVE
    if _is_unimodal(v, params):
        return SubsetLabel.UNIMODAL
    tol = params.trend_tolerance * max(float(v.max()), EPS)
    if v[-1] > v[0] and _tolerated_nondecreasing(v, tol):
        return SubsetLabel.RISE
    if v[-1] < v[0] and _tolerated_nonincreasing(v, tol):
        return SubsetLabel.FALL
    return SubsetLabel.UNCLASSIFIED


def lower_quartile(trajectories: Sequence[Trajectory]) -> float:
    """Lower quartile of per-token mean allocation across the batch."""
    if not trajectories:
        return 0.0
    return float(np.percentile([t.values.mean() for t in trajectories], 25))


def classify_all(
    trajectories: Sequence[Trajectory], params: SelectionParams
) -> dict[int, SubsetLabel]:
    q = lower_quartile(trajectories)
    return {t.token_index: classify_trajectory(t, params, q) for t in trajectories}


def select_unimodal(trajectories: Sequence[Trajectory], params: SelectionParams) -> list[int]:
    """Indices of unimodal trajectories, most salient first (ties by index)."""
    labels = classify_all(trajectories, params)
    picked = [t for t in trajectories if labels[t.token_index] is SubsetLabel.UNIMODAL]
    picked.sort(key=lambda t: (-peak_salience(t.values), t.token_index))
    return [t.token_index for t in picked]


def trajectories_from_matrix(values: np.ndarray, token_indices: Sequence[int]) -> list[Trajectory]:
    """``values`` is ``(layers, tokens)``; one trajectory per column."""
    values = np.asarray(values, dtype=np.float64)
    return [Trajectory(int(idx), values[:, j]) for j, idx in enumerate(token_indices)]


# ---------------------------------------------------------- random subsets


def largest_component(cells: Iterable[int], grid_side: int) -> int:
    """Size of the largest 4-connected component of the given row-major cells."""
    grid = np.zeros((grid_side, grid_side), dtype=bool)
    for c in cells:
        grid.flat[c] = True
    if not grid.any():
        return 0
    labels, n = ndimage.label(grid)  # default structure is 4-connectivity
    return int(np.bincount(labels.ravel())[1:].max())


def component_cap(count: int, fraction: float = 0.10) -> int:
    # isolated cells always pass
    return max(1, int(np.floor(fraction * count + 1e-9)))


def select_random(
    count: int,
    grid_side: int,
    rng_seed: int | Sequence[int],
    params: SelectionParams = SelectionParams(),
) -> list[int]:
    """Uniform cell sample whose largest 4-connected component obeys the cap.

    Cells are row-major indices into the ``grid_side x grid_side`` patch
    grid; the result is in sampling order.
    """
    n_cells = grid_side * grid_side
    if not 0 <= count <= n_cells:
        raise ValidationError(f"count {count} not in [0, {n_cells}]")
    if count == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    cap = component_cap(count, params.random_component_cap)
    for _ in range(MAX_RANDOM_RETRIES):
        cells = rng.choice(n_cells, size=count, replace=False)
        if largest_component(cells, grid_side) <= cap:
            return [int(c) for c in cells]
    raise SelectionError(
        f"no {count}-cell sample with components <= {cap} after {MAX_RANDOM_RETRIES} draws"
    )


# -------------------------------------------------------------- key norms


def select_by_keynorm(
    norms: np.ndarray,
    token_indices: Sequence[int],
    grid: np.ndarray,
    params: SelectionParams = SelectionParams(),
    count: int | None = None,
    buffer: int | None = None,
) -> list[int]:
    """Select relay tokens from key norms in place of attention.

    ``norms`` is ``(middle_layers, n_vision)``; ``grid`` gives ``(row, col)``
    for each column.  Each layer's norms are divided by their sum so the
    unimodal rule applies with the same omega.  Each selected token is then
    padded with up to ``buffer`` (default ``params.keynorm_buffer``) of its
    highest-norm unselected neighbours in the surrounding 3x3 window.
    ``count`` optionally caps the initial selection.
    """
    norms = np.asarray(norms, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.int64)
    if norms.shape[1] != len(token_indices) or grid.shape != (len(token_indices), 2):
        raise ValidationError("norms, indices and grid disagree on token count")
    buffer = params.keynorm_buffer if buffer is None else buffer
    sums = norms.sum(axis=1, keepdims=True)
    normalized = norms / np.where(sums > 0, sums, 1.0)
    initial = select_unimodal(trajectories_from_matrix(normalized, token_indices), params)
    if count is not None:
        initial = initial[:count]
    if buffer == 0 or not initial:
        return initial

    col_of = {int(idx): j for j, idx in enumerate(token_indices)}
    at_cell = {(int(r), int(c)): int(token_indices[j]) for j, (r, c) in enumerate(grid)}
    strength = norms.mean(axis=0)
    chosen = list(initial)
    taken = set(initial)
    for idx in initial:
        r, c = grid[col_of[idx]]
        neighbours = [
            at_cell[(r + dr, c + dc)]
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
            if (dr or dc) and (r + dr, c + dc) in at_cell
        ]
        neighbours = [n for n in neighbours if n not in taken]
        neighbours.sort(key=lambda n: (-strength[col_of[n]], n))
        for n in neighbours[:buffer]:
            chosen.append(n)
            taken.add(n)
    return chosen


# ----------------------------------------------------------------- summary


def overlap(a: Iterable[int], b: Iterable[int]) -> float:
    """Jaccard index; 1.0 when both sets are empty."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def subset_proportions(labels: Iterable[SubsetLabel]) -> dict[SubsetLabel, float]:
    labels = list(labels)
    if not labels:
        raise ValidationError("no labels")
    counts = Counter(labels)
    return {lab: counts[lab] / len(labels) for lab in SubsetLabel if lab in counts}


# ----------------------------------------------------------------- export


def selection_mask(cells: Iterable[int], grid_side: int) -> np.ndarray:
    m = np.zeros((grid_side, grid_side), dtype=np.uint8)
    for c in cells:
        m.flat[int(c)] = 1
    return m


def write_pgm(cells: Iterable[int], grid_side: int, path: str | Path) -> None:
    """ASCII PGM (P2), maxval 1, selected cells set to 1."""
    m = selection_mask(cells, grid_side)
    lines = ["P2", f"{grid_side} {grid_side}", "1"]
    lines += [" ".join(str(v) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValidationError("not an ASCII PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.uint8).reshape(h, w)


def label_counts(labels: Mapping[int, SubsetLabel]) -> dict[SubsetLabel, int]:
    c = Counter(labels.values())
    return {lab: c.get(lab, 0) for lab in SubsetLabel if lab is not SubsetLabel.RANDOM}
