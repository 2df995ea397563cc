"""Conditional sub-survival estimation from right-censored data.

The estimable object is ``S(t, z | w) = P(T >= t, Z = z | W = w)``,
factored as a per-cell product-limit survival curve times the cell
probability ``p_hat(z, w)``.  The product-limit step function is smoothed
either by an exact Epanechnikov convolution (closed form, differentiable)
or by a local polynomial of degree one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import (
    DegenerateSample,
    EmptyCell,
    EmptyInstrumentLevel,
    InvalidBandwidth,
)

# ---------------------------------------------------------------------------
# Epanechnikov kernel
# ---------------------------------------------------------------------------


def epanechnikov(s):
    """Kernel K(s) = 0.75 (1 - s^2) on [-1, 1], zero elsewhere."""
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, 0.75 * (1.0 - s * s), 0.0)


def epanechnikov_cdf(y):
    """Antiderivative of the kernel, normalized so that it is 0 at -1 and 1 at 1."""
    y = np.clip(np.asarray(y, dtype=float), -1.0, 1.0)
    return 0.25 * (2.0 + 3.0 * y - y**3)


# ---------------------------------------------------------------------------
# Step survival (product-limit estimate)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSurvival:
    """Right-continuous step function starting at 1 before the first jump.

    ``values[j]`` is the survival level on ``[jump_times[j], jump_times[j+1])``.
    """

    jump_times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("jump_times and values must be 1-d arrays of equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0):
            raise ValueError("jump_times must be strictly increasing and nonnegative")
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12) or np.any(np.diff(v) > 1e-12):
            raise ValueError("values must be nonincreasing within [0, 1]")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        out = np.concatenate(([1.0], self.values))[idx]
        return out if out.ndim else float(out)

    def drops(self) -> np.ndarray:
        """Jump sizes d_j = S(tau_j-) - S(tau_j) > 0, aligned with jump_times."""
        if self.jump_times.size == 0:
            return np.empty(0)
        return -np.diff(np.concatenate(([1.0], self.values)))


def km_estimate(data: Dataset, z: int, w: int) -> StepSurvival:
    """Product-limit estimator for the (z, w) cell.

    Tied event times are aggregated into a single factor ``1 - d_s / Y_s``
    where ``Y_s`` counts subjects still at risk at ``s`` (censored subjects
    with follow-up exactly ``s`` remain in the risk set).
    """
    mask = data.cell_mask(z, w)
    if not mask.any():
        raise EmptyCell(data.z_levels[z], data.w_levels[w])
    return km_from_arrays(data.y[mask], data.delta[mask])


def km_from_arrays(y, delta) -> StepSurvival:
    """Product-limit curve from raw follow-up times and event flags.

    The product is accumulated over maximal runs of event times with no
    intervening censoring; within a run the telescoping factors reduce to a
    single exact integer ratio, so on fully-uncensored data the curve equals
    the empirical survival function bit for bit.
    """
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta)
    order = np.argsort(y, kind="stable")
    y_sorted = y[order]
    event_times = np.unique(y_sorted[delta[order] == 1])
    if event_times.size == 0:
        return StepSurvival(np.empty(0), np.empty(0))
    n = y_sorted.size
    at_risk = n - np.searchsorted(y_sorted, event_times, side="left")
    d = np.bincount(
        np.searchsorted(event_times, y[delta == 1]), minlength=event_times.size
    )
    # censoring between consecutive event times breaks the telescoping
    breaks = at_risk[1:] != at_risk[:-1] - d[:-1]
    group = np.concatenate(([0], np.cumsum(breaks)))
    starts = np.flatnonzero(np.concatenate(([True], breaks)))
    run_start_risk = at_risk[starts][group]
    cum_d = np.cumsum(d)
    d_before_run = np.concatenate(([0], cum_d))[starts][group]
    within = (run_start_risk - (cum_d - d_before_run)) / run_start_risk
    run_final = within[np.concatenate((starts[1:] - 1, [d.size - 1]))]
    run_prefix = np.concatenate(([1.0], np.cumprod(run_final)[:-1]))
    values = run_prefix[group] * within
    return StepSurvival(event_times, np.clip(values, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Bandwidth rule of thumb
# ---------------------------------------------------------------------------


def bandwidth_rule_of_thumb(durations, constant: float = 1.06) -> float:
    """constant * min(std, IQR/1.349) * n^(-1/5), the normal-reference rule.

    A zero interquartile range (heavy ties) falls back to the standard
    deviation so the returned bandwidth stays positive whenever the sample
    has any spread.
    """
    x = np.asarray(durations, dtype=float)
    if np.unique(x).size < 2:
        raise DegenerateSample(
            "bandwidth rule of thumb needs at least 2 distinct durations"
        )
    sd = float(np.std(x, ddof=1))
    iqr = float(np.quantile(x, 0.75) - np.quantile(x, 0.25))
    scale = min(sd, iqr / 1.349) if iqr > 0 else sd
    return constant * scale * x.size ** (-0.2)


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------


class SmoothSurvival:
    """Continuous, differentiable survival evaluator on [0, tbar].

    Subclasses provide ``value`` and ``derivative``; both accept scalars or
    arrays and are pure (safe for concurrent reads).
    """

    method: str
    bandwidth: float

    def value(self, t):
        raise NotImplementedError

    def derivative(self, t):
        raise NotImplementedError

    def __call__(self, t):
        return self.value(t)


class KernelSmoothedSurvival(SmoothSurvival):
    """Exact Epanechnikov convolution of a step survival curve.

    Writing the step curve as 1 minus a sum of jump masses, the convolution
    integral collapses to ``1 - sum_j d_j * Kbar((t - tau_j) / eps)`` with
    ``Kbar`` the kernel antiderivative.  Expanding ``Kbar`` in powers of
    ``tau`` turns evaluation into prefix-sum lookups, O(log J) per point.
    The step curve is implicitly extended by 1 on t < 0, so the convolution
    is well defined down to t = 0.
    """

    method = "kernel"

    def __init__(self, step: StepSurvival, bandwidth: float):
        if not (bandwidth > 0):
            raise InvalidBandwidth(f"bandwidth must be > 0, got {bandwidth}")
        self.bandwidth = float(bandwidth)
        self._step = step
        d = step.drops()
        # Center jump times before accumulating tau powers: keeps the
        # windowed moment differences accurate when tau >> bandwidth.
        self._shift = float(step.jump_times.mean()) if d.size else 0.0
        tau = step.jump_times - self._shift
        self._tau = tau
        zero = np.zeros(1)
        self._p0 = np.concatenate((zero, np.cumsum(d)))
        self._p1 = np.concatenate((zero, np.cumsum(d * tau)))
        self._p2 = np.concatenate((zero, np.cumsum(d * tau**2)))
        self._p3 = np.concatenate((zero, np.cumsum(d * tau**3)))

    def _window(self, t):
        eps = self.bandwidth
        lo = np.searchsorted(self._tau, t - eps, side="right")
        hi = np.searchsorted(self._tau, t + eps, side="left")
        return lo, hi

    def value(self, t):
        t_in = np.asarray(t, dtype=float)
        t = t_in - self._shift
        eps = self.bandwidth
        lo, hi = self._window(t)
        s0 = self._p0[hi] - self._p0[lo]
        s1 = self._p1[hi] - self._p1[lo]
        s2 = self._p2[hi] - self._p2[lo]
        s3 = self._p3[hi] - self._p3[lo]
        kbar = 0.25 * (
            2.0 * s0
            + 3.0 * (t * s0 - s1) / eps
            - (t**3 * s0 - 3.0 * t**2 * s1 + 3.0 * t * s2 - s3) / eps**3
        )
        out = 1.0 - self._p0[lo] - kbar
        out = np.clip(out, 0.0, 1.0)
        return out if out.ndim else float(out)

    def derivative(self, t):
        t_in = np.asarray(t, dtype=float)
        t = t_in - self._shift
        eps = self.bandwidth
        lo, hi = self._window(t)
        s0 = self._p0[hi] - self._p0[lo]
        s1 = self._p1[hi] - self._p1[lo]
        s2 = self._p2[hi] - self._p2[lo]
        out = -(0.75 / eps) * (s0 - (t**2 * s0 - 2.0 * t * s1 + s2) / eps**2)
        return out if out.ndim else float(out)


class LocalPolySurvival(SmoothSurvival):
    """Degree-one local polynomial fit to the step curve at its jump times.

    At each evaluation point the curve is fit by weighted least squares over
    jump points within one bandwidth, with Epanechnikov weights; the local
    intercept is the smoothed value (clipped to [0, 1]) and the local slope
    the derivative.  Windows holding fewer than two jump points are widened
    to the nearest two points and flagged.
    """

    method = "local-polynomial"

    def __init__(self, step: StepSurvival, bandwidth: float):
        if not (bandwidth > 0):
            raise InvalidBandwidth(f"bandwidth must be > 0, got {bandwidth}")
        self.bandwidth = float(bandwidth)
        self._tau = step.jump_times
        self._v = step.values
        self.boundary_flagged = False

    def _fit(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tau, v = self._tau, self._v
        if tau.size == 0:
            return np.ones_like(t), np.zeros_like(t)
        if tau.size == 1:
            return np.full_like(t, v[0]), np.zeros_like(t)
        vals = np.empty_like(t)
        slopes = np.empty_like(t)
        for i, ti in enumerate(t):
            lo = np.searchsorted(tau, ti - self.bandwidth, side="right")
            hi = np.searchsorted(tau, ti + self.bandwidth, side="left")
            eps = self.bandwidth
            if hi - lo < 2:
                # widen to the two nearest jump points
                self.boundary_flagged = True
                j = np.searchsorted(tau, ti)
                lo = max(0, min(j - 1, tau.size - 2))
                hi = lo + 2
                eps = max(abs(tau[lo] - ti), abs(tau[hi - 1] - ti)) * (1 + 1e-9) + 1e-300
            x = tau[lo:hi]
            y = v[lo:hi]
            wgt = 0.75 * (1.0 - ((x - ti) / eps) ** 2)
            wgt = np.clip(wgt, 1e-300, None)
            sw = wgt.sum()
            xbar = (wgt @ x) / sw
            ybar = (wgt @ y) / sw
            sxx = wgt @ (x - xbar) ** 2
            if sxx <= 0:
                slope = 0.0
            else:
                slope = float((wgt @ ((x - xbar) * (y - ybar))) / sxx)
            slopes[i] = slope
            vals[i] = ybar + slope * (ti - xbar)
        return vals, slopes

    def value(self, t):
        vals, _ = self._fit(t)
        out = np.clip(vals, 0.0, 1.0)
        return out if np.asarray(t).ndim else float(out[0])

    def derivative(self, t):
        _, slopes = self._fit(t)
        return slopes if np.asarray(t).ndim else float(slopes[0])


class ZeroSurvival(SmoothSurvival):
    """Identically-zero survival used for empty (z, w) cells."""

    method = "empty"
    bandwidth = 0.0

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        return out if out.ndim else 0.0

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        return out if out.ndim else 0.0


def kernel_smooth(km: StepSurvival, bandwidth: float) -> KernelSmoothedSurvival:
    """Closed-form Epanechnikov smoothing of a product-limit curve."""
    return KernelSmoothedSurvival(km, bandwidth)


def localpoly_smooth(km: StepSurvival, bandwidth: float) -> LocalPolySurvival:
    """Degree-one local polynomial smoothing of a product-limit curve."""
    return LocalPolySurvival(km, bandwidth)


# ---------------------------------------------------------------------------
# Full survival model
# ---------------------------------------------------------------------------

SMOOTHERS = {"kernel": kernel_smooth, "localpoly": localpoly_smooth}


@dataclass(frozen=True)
class CellFit:
    """Per-(z, w) cell: step curve, smoothed curve, cell probability, count."""

    step: StepSurvival
    smooth: SmoothSurvival
    p_hat: float
    n_obs: int


@dataclass(frozen=True)
class SurvivalModel:
    """Smoothed sub-survival estimates for every (treatment, instrument) cell.

    ``sub_survival(t, z, w)`` evaluates ``p_hat(z, w) * Stilde(t | z, w)``;
    empty cells have p_hat = 0 and evaluate to 0 identically.  Instances are
    immutable and safe to share across workers.
    """

    z_levels: tuple
    w_levels: tuple
    tbar: float
    cells: dict = field(repr=False)
    method: str = "kernel"

    @property
    def n_treatments(self) -> int:
        return len(self.z_levels)

    @property
    def n_instruments(self) -> int:
        return len(self.w_levels)

    def cell(self, z: int, w: int) -> CellFit:
        return self.cells[(z, w)]

    def p_hat(self, z: int, w: int) -> float:
        return self.cells[(z, w)].p_hat

    def empty_cells(self):
        return [zw for zw, c in self.cells.items() if c.n_obs == 0]

    def sub_survival(self, t, z: int, w: int):
        cell = self.cells[(z, w)]
        return cell.p_hat * cell.smooth.value(t)

    def sub_survival_deriv(self, t, z: int, w: int):
        cell = self.cells[(z, w)]
        return cell.p_hat * cell.smooth.derivative(t)

    def sub_density(self, t, z: int, w: int):
        """f(t, z | w) = -dS/dt, the smoothed sub-density."""
        return -self.sub_survival_deriv(t, z, w)


def fit_survival_model(
    data: Dataset,
    tbar: float,
    method: str = "kernel",
    bandwidth: float | None = None,
) -> SurvivalModel:
    """Fit per-cell product-limit curves, smoothers and cell probabilities.

    ``bandwidth`` overrides the per-cell rule of thumb (computed on each
    cell's uncensored durations) when given.  Cells with zero observations
    yield identically-zero sub-survival; instrument levels with zero
    observations are an error.
    """
    if method not in SMOOTHERS:
        raise ValueError(f"unknown smoothing method {method!r}")
    smoother = SMOOTHERS[method]
    w_counts = np.bincount(data.w, minlength=data.n_instruments)
    for w, count in enumerate(w_counts):
        if count == 0:
            raise EmptyInstrumentLevel(data.w_levels[w])
    cells = {}
    for z in range(data.n_treatments):
        for w in range(data.n_instruments):
            mask = data.cell_mask(z, w)
            n_obs = int(mask.sum())
            if n_obs == 0:
                cells[(z, w)] = CellFit(
                    StepSurvival(np.empty(0), np.empty(0)), ZeroSurvival(), 0.0, 0
                )
                continue
            step = km_from_arrays(data.y[mask], data.delta[mask])
            if bandwidth is not None:
                eps = bandwidth
            else:
                uncensored = data.y[mask & (data.delta == 1)]
                try:
                    eps = bandwidth_rule_of_thumb(uncensored)
                except DegenerateSample as exc:
                    raise DegenerateSample(
                        f"cell (z={data.z_levels[z]!r}, w={data.w_levels[w]!r}): {exc}"
                    ) from None
            cells[(z, w)] = CellFit(step, smoother(step, eps), n_obs / w_counts[w], n_obs)
    return SurvivalModel(data.z_levels, data.w_levels, float(tbar), cells, method)


def choose_tbar(data: Dataset, alpha: float = 0.95, c0: float | None = None) -> float:
    """Upper evaluation bound: c0 when known and finite, else the minimum
    over nonempty cells of the empirical alpha-quantile of the follow-up time."""
    if c0 is not None and np.isfinite(c0):
        return float(c0)
    quantiles = []
    for z in range(data.n_treatments):
        for w in range(data.n_instruments):
            y_cell = data.y[data.cell_mask(z, w)]
            if y_cell.size:
                quantiles.append(float(np.quantile(y_cell, alpha, method="inverted_cdf")))
    return min(quantiles)


# ---------------------------------------------------------------------------
# Naive comparator: inverted Nelson-Aalen cumulative hazard
# ---------------------------------------------------------------------------


def nelson_aalen_invert(data: Dataset, z: int, u_grid) -> np.ndarray:
    """Invert the pooled cumulative-hazard estimate of T given Z = z.

    This ignores the instrument entirely, so it is the endogeneity-blind
    benchmark.  Returns, per grid value u, the smallest t whose cumulative
    hazard reaches u (np.inf when the estimate never reaches u).
    """
    mask = data.z == z
    if not mask.any():
        raise EmptyCell(data.z_levels[z], None)
    y = data.y[mask]
    delta = data.delta[mask]
    order = np.argsort(y, kind="stable")
    y_sorted = y[order]
    event_times = np.unique(y_sorted[delta[order] == 1])
    u = np.asarray(u_grid, dtype=float)
    if event_times.size == 0:
        out = np.where(u <= 0, 0.0, np.inf)
        return out if out.ndim else float(out)
    at_risk = y_sorted.size - np.searchsorted(y_sorted, event_times, side="left")
    d = np.bincount(
        np.searchsorted(event_times, y[delta == 1]), minlength=event_times.size
    )
    cumhaz = np.cumsum(d / at_risk)
    idx = np.searchsorted(cumhaz, u, side="left")
    out = np.where(
        u <= 0,
        0.0,
        np.where(idx < event_times.size, event_times[np.minimum(idx, event_times.size - 1)], np.inf),
    )
    return out if out.ndim else float(out)

