"""Partial identification: clipped residuals, outer sets, breakpoint rule.

Beyond the censoring bound c0 the survival surface is flat in its first
argument, so candidate quantile vectors are only constrained through their
clipped values.  The outer set of admissible vectors is assembled as a
union of axis-aligned boxes by fixing coordinates at c0 and slicing the
remaining ones, exactly as the dimension-lowering recursion prescribes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimator import PhiEstimate, _residual_batch

_BISECTION_REL_TOL = 1e-10


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    """One axis interval; ``hi`` may be math.inf for an unbounded end."""

    lo: float
    hi: float
    closed_lo: bool = True
    closed_hi: bool = True

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"lower end {self.lo} exceeds upper end {self.hi}")

    def contains(self, x: float, tol: float = 0.0) -> bool:
        above = x >= self.lo - tol if self.closed_lo else x > self.lo + tol
        below = x <= self.hi + tol if self.closed_hi else x < self.hi - tol
        return bool(above and below)

    def covers(self, other: "Interval") -> bool:
        lo_ok = self.lo < other.lo or (
            self.lo == other.lo and (self.closed_lo or not other.closed_lo)
        )
        hi_ok = self.hi > other.hi or (
            self.hi == other.hi and (self.closed_hi or not other.closed_hi)
        )
        return lo_ok and hi_ok

    def to_json_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": "inf" if math.isinf(self.hi) else self.hi,
            "closed_lo": self.closed_lo,
            "closed_hi": self.closed_hi,
        }


@dataclass(frozen=True)
class BoxUnion:
    """Union of L-dimensional boxes (tuples of intervals)."""

    dimension: int
    boxes: tuple = ()

    def __post_init__(self):
        for box in self.boxes:
            if len(box) != self.dimension:
                raise ValueError("box dimension mismatch")

    @property
    def is_empty(self) -> bool:
        return len(self.boxes) == 0

    def contains(self, theta, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return any(
            all(iv.contains(float(x), tol) for iv, x in zip(box, theta))
            for box in self.boxes
        )

    def covers_box(self, box) -> bool:
        return any(
            all(mine.covers(theirs) or mine == theirs for mine, theirs in zip(candidate, box))
            for candidate in self.boxes
        )

    def to_json_dict(self, u: float | None = None, c0: float | None = None) -> dict:
        doc = {"boxes": [[iv.to_json_dict() for iv in box] for box in self.boxes]}
        if u is not None:
            doc = {"u": u, "c0": c0, **doc}
        return doc

    def corner_rows(self, unbounded_cap: float):
        """All finite corner points, with unbounded ends capped for plotting."""
        rows = []
        for b, box in enumerate(self.boxes):
            ends = [
                (iv.lo, unbounded_cap if math.isinf(iv.hi) else iv.hi) for iv in box
            ]
            for corner in np.ndindex(*(2,) * self.dimension):
                rows.append((b,) + tuple(ends[d][corner[d]] for d in range(self.dimension)))
        return rows


def _box_covers(outer, inner) -> bool:
    return all(o.covers(i) for o, i in zip(outer, inner))


def _dedup_boxes(boxes):
    """Drop boxes contained in another box; identical boxes keep one copy."""
    kept = []
    for i, box in enumerate(boxes):
        redundant = False
        for j, other in enumerate(boxes):
            if i == j or not _box_covers(other, box):
                continue
            if _box_covers(box, other) and i < j:
                continue  # mutual coverage: the earlier copy survives
            redundant = True
            break
        if not redundant and box not in kept:
            kept.append(box)
    return kept


# ---------------------------------------------------------------------------
# Clipped residuals
# ---------------------------------------------------------------------------


def censored_residual_R(model, u: float, c0: float, theta) -> np.ndarray:
    """R_k(theta) = sum_l S(theta_l ^ c0, z_l | w_k) - exp(-u) for every k."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    theta = np.minimum(np.asarray(theta, dtype=float), c0)
    return _residual_batch(model, float(u), theta[None, :])[0]


def _min_residual(model, u: float, c0: float, thetas: np.ndarray) -> np.ndarray:
    clipped = np.minimum(thetas, c0)
    return _residual_batch(model, float(u), clipped).min(axis=1)


# ---------------------------------------------------------------------------
# Outer set
# ---------------------------------------------------------------------------


def _slice_sup(model, u, c0, pinned, free_coord, L) -> float | None:
    """Largest x in [0, c0] with min_k R >= 0 along one free coordinate.

    The map is nonincreasing and continuous in x, so the satisfying set is
    [0, sup] (or empty); with plateaus the supremum is still attained since
    the inequality is weak.  Returns None for an empty slice.
    """

    def min_r(x: float) -> float:
        theta = np.empty(L)
        for coord, value in pinned.items():
            theta[coord] = value
        theta[free_coord] = x
        return float(_min_residual(model, u, c0, theta[None, :])[0])

    if min_r(0.0) < 0:
        return None
    if min_r(c0) >= 0:
        return c0
    lo, hi = 0.0, c0
    tol = _BISECTION_REL_TOL * c0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if min_r(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return lo


def _region_boxes(model, u, c0, pinned, free, L, slices):
    """Box decomposition of {theta_free in [0, c0]^d : min_k R >= 0}.

    One free coordinate is exact (monotone bisection).  With several free
    coordinates the region is a downward-closed set with a curved boundary,
    which has no finite exact box decomposition; it is inner-approximated by
    a staircase of ``slices`` steps (sound: each returned box satisfies the
    predicate at its worst corner, hence everywhere).
    """
    if not free:
        theta = np.empty(L)
        for coord, value in pinned.items():
            theta[coord] = value
        ok = float(_min_residual(model, u, c0, theta[None, :])[0]) >= 0
        return [()] if ok else []
    if len(free) == 1:
        sup = _slice_sup(model, u, c0, pinned, free[0], L)
        if sup is None:
            return []
        return [((free[0], Interval(0.0, sup)),)]
    lead, rest = free[0], free[1:]
    edges = np.linspace(0.0, c0, slices + 1)
    boxes = []
    for lo_edge, hi_edge in zip(edges[:-1], edges[1:]):
        sub_pinned = dict(pinned)
        sub_pinned[lead] = hi_edge  # worst case: R nonincreasing in each theta
        for sub in _region_boxes(model, u, c0, sub_pinned, rest, L, slices):
            boxes.append(((lead, Interval(float(lo_edge), float(hi_edge))),) + sub)
    return boxes


def outer_set(model, u: float, c0: float, slices: int = 32) -> BoxUnion:
    """Admissible set beyond exact identification, as a union of boxes.

    For each coordinate fixed at c0, the remaining coordinates are sliced
    within [0, c0] and the resulting region is extruded to [c0, inf) in the
    fixed coordinate; the all-at-c0 corner contributes [c0, inf)^L when it
    satisfies the inequalities.  Exact for L <= 2; for L >= 3 cross sections
    with two or more free coordinates use the staircase approximation of
    ``_region_boxes``.  An empty union is a valid result.
    """
    L = model.n_treatments
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    unbounded = Interval(float(c0), math.inf)
    boxes = []
    for fixed in range(L):
        free = [c for c in range(L) if c != fixed]
        for sub in _region_boxes(model, u, c0, {fixed: c0}, free, L, slices):
            intervals = [None] * L
            intervals[fixed] = unbounded
            for coord, iv in sub:
                intervals[coord] = iv
            boxes.append(tuple(intervals))
    corner = np.full((1, L), float(c0))
    if float(_min_residual(model, u, c0, corner)[0]) >= 0:
        boxes.append(tuple([unbounded] * L))
    return BoxUnion(L, tuple(_dedup_boxes(boxes)))


# ---------------------------------------------------------------------------
# Triangular special case
# ---------------------------------------------------------------------------


def triangular_outer_set(model, u: float, c0: float) -> BoxUnion:
    """Refined outer set for the 2x2 design with an all-or-nothing instrument.

    Requires S(., z2 | w1) identically zero (treatment level 2 never occurs
    at instrument level 1), so the system is triangular: the first equation
    pins theta_1, the second then pins (or bounds) theta_2.
    """
    from .errors import TriangularPrecondition

    if model.n_treatments != 2 or model.n_instruments != 2:
        raise TriangularPrecondition("triangular refinement needs L = K = 2")
    if float(np.max(np.abs(model.sub_survival(np.array([0.0]), 1, 0)))) > 1e-12:
        raise TriangularPrecondition(
            "triangular refinement needs P(Z = z2 | W = w1) = 0"
        )
    target = math.exp(-u)

    def s(t: float, z: int, w: int) -> float:
        return float(model.sub_survival(np.array([float(t)]), z, w)[0])

    def invert(z: int, w: int, level: float) -> float:
        lo, hi = 0.0, c0
        tol = _BISECTION_REL_TOL * c0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if s(mid, z, w) >= level:
                lo = mid
            else:
                hi = mid
        return lo

    if s(c0, 0, 0) < target:
        # case 1: the first equation has an interior root
        theta1 = invert(0, 0, target)
        second_target = target - s(theta1, 0, 1)
        if s(c0, 1, 1) < second_target <= s(0.0, 1, 1):
            theta2 = invert(1, 1, second_target)
            return BoxUnion(
                2,
                (
                    (
                        Interval(theta1, theta1),
                        Interval(theta2, theta2),
                    ),
                ),
            )
        return BoxUnion(
            2, ((Interval(theta1, theta1), Interval(c0, math.inf)),)
        )
    # case 2: the quantile for the first arm lies at or beyond c0
    second_target = target - s(c0, 0, 1)
    if s(c0, 1, 1) >= second_target:
        theta2_bar: float = math.inf
    elif s(0.0, 1, 1) < second_target:
        return BoxUnion(2)
    else:
        theta2_bar = invert(1, 1, second_target)
    return BoxUnion(2, ((Interval(c0, math.inf), Interval(0.0, theta2_bar)),))


# ---------------------------------------------------------------------------
# Breakpoint rule of thumb
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BreakpointReport:
    """Residual-norm curve with the detected identification breakpoint."""

    u_grid: np.ndarray
    residual_norm: np.ndarray
    u0_hat: float | None
    kappa: float
    baseline_fraction: float
    baseline: float
    threshold: float

    def to_json_dict(self) -> dict:
        return {
            "u_grid": self.u_grid.tolist(),
            "residual_norm": self.residual_norm.tolist(),
            "u0_hat": self.u0_hat,
            "kappa": self.kappa,
            "baseline_fraction": self.baseline_fraction,
            "baseline": self.baseline,
            "threshold": self.threshold,
        }


def detect_breakpoint(
    estimate: PhiEstimate,
    kappa: float = 10.0,
    baseline_fraction: float = 0.5,
    boundary_exclusion: float = 0.05,
    baseline_floor: float = 1e-12,
) -> BreakpointReport:
    """First grid point from which the residual norm stays elevated.

    The baseline is the median residual norm over the lowest
    ``baseline_fraction`` of the grid, excluding its lowest
    ``boundary_exclusion`` share (where kernel boundary bias inflates the
    norm).  Detection requires the norm to reach ``kappa`` times the
    baseline at a point and at every later point.  The baseline is floored
    at ``baseline_floor`` because exactly-identified systems drive the
    interior norms to numerical zero, where a purely multiplicative rule
    would be meaningless.
    """
    if kappa <= 1:
        raise ValueError("kappa must exceed 1")
    if not 0 < baseline_fraction < 1:
        raise ValueError("baseline_fraction must lie in (0, 1)")
    norms = np.asarray(estimate.residual_norm, dtype=float)
    M = norms.size
    excl = int(np.ceil(boundary_exclusion * M))
    window_end = max(int(np.floor(baseline_fraction * M)), excl + 1)
    baseline = float(np.median(norms[excl:window_end]))
    threshold = kappa * max(baseline, baseline_floor)
    suffix_min = np.minimum.accumulate(norms[::-1])[::-1]
    hits = np.flatnonzero(suffix_min >= threshold)
    u0_hat = float(estimate.u_grid[hits[0]]) if hits.size else None
    return BreakpointReport(
        u_grid=np.asarray(estimate.u_grid, dtype=float),
        residual_norm=norms,
        u0_hat=u0_hat,
        kappa=kappa,
        baseline_fraction=baseline_fraction,
        baseline=baseline,
        threshold=threshold,
    )
