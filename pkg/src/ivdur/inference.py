"""Bootstrap confidence intervals and derived causal quantities.

Inference resamples whole observation rows with replacement, re-runs the
full fit-and-solve pipeline per resample and reports percentile intervals
of any requested functional of the quantile curves.  Derived quantities
(counterfactual survival and hazard) invert a monotonized version of the
estimated curves.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .errors import (
    BootstrapDegeneracy,
    DegenerateSample,
    EmptyCell,
    EmptyInstrumentLevel,
    TailDominates,
)
from .estimator import PhiEstimate, SolverConfig, estimate_phi
from .survival import fit_survival_model


# ---------------------------------------------------------------------------
# Monotonization (pool adjacent violators)
# ---------------------------------------------------------------------------


def pava(y) -> np.ndarray:
    """Nondecreasing least-squares projection with equal weights."""
    y = np.asarray(y, dtype=float)
    n = y.size
    levels = []  # (mean, weight) blocks
    for value in y:
        mean, weight = float(value), 1.0
        while levels and levels[-1][0] > mean:
            m_prev, w_prev = levels.pop()
            mean = (m_prev * w_prev + mean * weight) / (w_prev + weight)
            weight += w_prev
        levels.append((mean, weight))
    out = np.empty(n)
    i = 0
    for mean, weight in levels:
        out[i : i + int(weight)] = mean
        i += int(weight)
    return out


def monotonize(estimate: PhiEstimate, z: int) -> np.ndarray:
    """Isotonic projection of the estimated curve for treatment level z.

    Idempotent, and exactly the identity on already-monotone inputs.
    """
    values = estimate.curve(z)
    if np.all(np.diff(values) >= 0):
        return values.copy()
    return pava(values)


# ---------------------------------------------------------------------------
# Derived quantities
# ---------------------------------------------------------------------------


def qte(estimate: PhiEstimate, z0: int, z1: int, u: float) -> float:
    """Quantile treatment effect phi(z1, u) - phi(z0, u) at a grid point.

    Off-grid u falls back to the nearest grid point with a warning.
    """
    idx = estimate.nearest_index(u)
    if abs(estimate.u_grid[idx] - u) > 1e-9:
        warnings.warn(
            f"u={u} is off the estimation grid; using nearest point "
            f"{estimate.u_grid[idx]:.6g}",
            stacklevel=2,
        )
    return float(estimate.theta[idx, z1] - estimate.theta[idx, z0])


class AteResult(NamedTuple):
    value: float
    tail_mass: float


def ate(estimate: PhiEstimate, z0: int, z1: int) -> AteResult:
    """Average treatment effect under the zero-tail policy.

    Integrates the QTE curve against the unit-exponential density by the
    trapezoid rule, anchored at (0, 0) since both curves vanish at u = 0;
    the mass beyond the grid is treated as zero and reported as a
    diagnostic.  Errors out when that tail dominates.
    """
    u = np.concatenate(([0.0], estimate.u_grid))
    diff = np.concatenate(([0.0], estimate.theta[:, z1] - estimate.theta[:, z0]))
    tail_mass = float(np.exp(-estimate.u_grid[-1]))
    if tail_mass > 0.5:
        raise TailDominates(
            f"tail mass {tail_mass:.3f} beyond the grid exceeds 0.5; extend the grid"
        )
    value = float(np.trapezoid(diff * np.exp(-u), u))
    return AteResult(value, tail_mass)


class SurvivalValue(NamedTuple):
    value: float
    is_bound: bool  # True when only the upper bound exp(-Ubar) can be reported


class HazardValue(NamedTuple):
    value: float
    flag: str | None  # None | "flat-segment" | "beyond-grid"


def _monotone_knots(estimate: PhiEstimate, z: int):
    u = np.concatenate(([0.0], estimate.u_grid))
    v = np.concatenate(([0.0], monotonize(estimate, z)))
    return u, v


def counterfactual_survival(estimate: PhiEstimate, z: int, t: float) -> SurvivalValue:
    """P(potential duration >= t) = exp(-inverse of the monotonized curve).

    Beyond the largest estimated quantile only the bound exp(-Ubar) is
    available; the result is then flagged.
    """
    u, v = _monotone_knots(estimate, z)
    if t <= 0:
        return SurvivalValue(1.0, False)
    if t > v[-1]:
        return SurvivalValue(float(np.exp(-u[-1])), True)
    k = int(np.searchsorted(v, t, side="left"))
    u_star = u[k - 1] + (t - v[k - 1]) * (u[k] - u[k - 1]) / (v[k] - v[k - 1])
    return SurvivalValue(float(np.exp(-u_star)), False)


def counterfactual_hazard(estimate: PhiEstimate, z: int, t: float) -> HazardValue:
    """Hazard of the potential duration: reciprocal slope of the curve.

    The cumulative hazard of the counterfactual duration is the inverse of
    the quantile curve, so on a piecewise-linear interpolant the hazard is
    piecewise constant; flat segments carry infinite hazard and are flagged.
    """
    u, v = _monotone_knots(estimate, z)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t >= v[-1]:
        return HazardValue(float("nan"), "beyond-grid")
    k_left = int(np.searchsorted(v, t, side="left"))
    k_right = int(np.searchsorted(v, t, side="right"))
    if k_right - k_left >= 2:
        # a flat stretch of the curve sits exactly at t: the inverse jumps
        return HazardValue(float("inf"), "flat-segment")
    k = max(1, min(k_right, v.size - 1))
    dv = v[k] - v[k - 1]
    if dv <= 0:
        return HazardValue(float("inf"), "flat-segment")
    return HazardValue(float((u[k] - u[k - 1]) / dv), None)


# ---------------------------------------------------------------------------
# Functionals and the bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionalSpec:
    """A functional of the quantile curves to bootstrap.

    Kinds: ``phi`` (z), ``qte`` (z0, z1), ``ate`` (z0, z1),
    ``counterfactual_survival`` (z, t), ``counterfactual_hazard`` (z, t).
    Curve functionals produce one value per grid point; the others are
    scalars.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __init__(self, kind: str, **params):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", dict(params))
        if kind not in (
            "phi",
            "qte",
            "ate",
            "counterfactual_survival",
            "counterfactual_hazard",
        ):
            raise ValueError(f"unknown functional kind {kind!r}")

    def label(self) -> str:
        p = self.params
        if self.kind == "phi":
            return f"phi[z={p['z']}]"
        if self.kind in ("qte", "ate"):
            return f"{self.kind}[z{p['z0']}->z{p['z1']}]"
        return f"{self.kind}[z={p['z']},t={p['t']:g}]"

    def is_curve(self) -> bool:
        return self.kind in ("phi", "qte")

    def evaluate(self, estimate: PhiEstimate) -> np.ndarray:
        p = self.params
        if self.kind == "phi":
            return estimate.curve(p["z"]).copy()
        if self.kind == "qte":
            return estimate.theta[:, p["z1"]] - estimate.theta[:, p["z0"]]
        if self.kind == "ate":
            return np.array([ate(estimate, p["z0"], p["z1"]).value])
        if self.kind == "counterfactual_survival":
            return np.array([counterfactual_survival(estimate, p["z"], p["t"]).value])
        return np.array([counterfactual_hazard(estimate, p["z"], p["t"]).value])


@dataclass(frozen=True)
class IntervalEntry:
    """Percentile interval of one functional across resamples."""

    u: np.ndarray | None  # None for scalar functionals
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    asymmetric: np.ndarray  # True where the point falls outside [lower, upper]
    band_lower: np.ndarray | None = None
    band_upper: np.ndarray | None = None


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile confidence bounds per functional, plus bookkeeping."""

    B: int
    seed: int
    redraws: int
    entries: dict  # label -> IntervalEntry

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["functional", "u", "point", "lower", "upper"])
            for label, entry in self.entries.items():
                u_values = entry.u if entry.u is not None else [float("nan")]
                for i, u in enumerate(u_values):
                    writer.writerow(
                        [
                            label,
                            "" if entry.u is None else repr(float(u)),
                            repr(float(entry.point[i])),
                            repr(float(entry.lower[i])),
                            repr(float(entry.upper[i])),
                        ]
                    )

    def to_json_dict(self) -> dict:
        out = {"B": self.B, "seed": self.seed, "redraws": self.redraws, "entries": {}}
        for label, entry in self.entries.items():
            out["entries"][label] = {
                "u": None if entry.u is None else entry.u.tolist(),
                "point": entry.point.tolist(),
                "lower": entry.lower.tolist(),
                "upper": entry.upper.tolist(),
                "asymmetric": entry.asymmetric.tolist(),
                "band_lower": None
                if entry.band_lower is None
                else entry.band_lower.tolist(),
                "band_upper": None
                if entry.band_upper is None
                else entry.band_upper.tolist(),
            }
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def _required_cells(data: Dataset):
    counts = data.cell_counts()
    return np.argwhere(counts > 0)


def _resample_ok(data: Dataset, required) -> bool:
    counts = data.cell_counts()
    return all(counts[z, w] > 0 for z, w in required)


def bootstrap(
    data: Dataset,
    tbar: float,
    u_grid,
    functionals,
    B: int = 200,
    seed: int = 0,
    solver_config: SolverConfig = SolverConfig(),
    smoother: str = "kernel",
    bandwidth: float | None = None,
    uniform_band: bool = False,
) -> BootstrapResult:
    """Percentile bootstrap over i.i.d. row resamples.

    Each resample re-runs the full pipeline with the same configuration and
    its own substream derived from (seed, resample index), so aggregation is
    order-independent.  Resamples that lose a required cell are redrawn
    (within their own substream); more than 10 * B redraws in total aborts.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    u_grid = np.asarray(u_grid, dtype=float)
    functionals = list(functionals)

    def run_pipeline(ds: Dataset) -> PhiEstimate:
        model = fit_survival_model(ds, tbar, smoother, bandwidth)
        return estimate_phi(model, u_grid, solver_config)

    point_estimate = run_pipeline(data)
    point_values = {f.label(): f.evaluate(point_estimate) for f in functionals}

    required = _required_cells(data)
    n = data.n
    redraws = 0
    samples = {f.label(): [] for f in functionals}
    for b in range(B):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((seed, 1, b)))
        )
        while True:
            idx = rng.integers(0, n, size=n)
            resample = data.resample(idx)
            if _resample_ok(resample, required):
                try:
                    est_b = run_pipeline(resample)
                    break
                except (DegenerateSample, EmptyCell, EmptyInstrumentLevel):
                    pass
            redraws += 1
            if redraws > 10 * B:
                raise BootstrapDegeneracy(
                    f"more than {10 * B} resample redraws; data too degenerate"
                )
        for f in functionals:
            samples[f.label()].append(f.evaluate(est_b))

    entries = {}
    for f in functionals:
        label = f.label()
        draws = np.stack(samples[label], axis=0)  # (B, M) or (B, 1)
        lower = np.percentile(draws, 2.5, axis=0)
        upper = np.percentile(draws, 97.5, axis=0)
        point = point_values[label]
        asym = ~((lower <= point) & (point <= upper))
        band_lo = band_hi = None
        if uniform_band and f.is_curve():
            sup_dev = np.max(np.abs(draws - point[None, :]), axis=1)
            c = float(np.percentile(sup_dev, 95.0))
            band_lo, band_hi = point - c, point + c
        entries[label] = IntervalEntry(
            u=u_grid.copy() if f.is_curve() else None,
            point=point,
            lower=lower,
            upper=upper,
            asymmetric=asym,
            band_lower=band_lo,
            band_upper=band_hi,
        )
    return BootstrapResult(B=B, seed=seed, redraws=redraws, entries=entries)
