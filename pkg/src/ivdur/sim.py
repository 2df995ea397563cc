"""Simulation design, Monte Carlo replication studies and analytic fixtures.

The data-generating process draws a Bernoulli instrument, a unit-exponential
latent rank, a normal selection shock and an exponential censoring time; the
treatment follows a latent-index selection rule so that it is endogenous
whenever the latent rank enters the index.  Randomness is counter-based
(Philox keyed by seed), with one block of four uniforms per row, so results
do not depend on chunking or scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .data import Dataset
from .estimator import SolverConfig, estimate_phi
from .fixtures import (  # noqa: F401  (fixtures are part of this module's surface)
    AnalyticFixture,
    counterexample_fixture,
    dgp_analytic_fixture,
    exponential_fixture,
)
from .inference import bootstrap, FunctionalSpec
from .partial_id import detect_breakpoint
from .survival import fit_survival_model, nelson_aalen_invert

Z_LEVELS = ("0", "1")
W_LEVELS = ("0", "1")


def substream(seed, *path) -> np.random.Generator:
    """Deterministic child generator for (seed, *path), independent of order
    of construction and of how many siblings exist."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *path))))


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the simulated design."""

    n: int
    seed: int = 0
    bernoulli_p_w: float = 0.7
    selection_intercept: float = -0.7
    selection_coef_w: float = 1.0
    selection_coef_u: float = 0.5
    hazard_z0: float = 1.0 / 10.0
    hazard_z1: float = 1.0 / 5.0
    censoring_scale: float = 15.0
    censoring_floor: float = 10.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 <= self.bernoulli_p_w <= 1.0:
            raise ValueError("bernoulli_p_w must lie in [0, 1]")
        if self.hazard_z0 <= 0 or self.hazard_z1 <= 0:
            raise ValueError("hazards must be positive")

    def phi_true(self, z: int, u):
        """True quantile curve: u times the treatment-arm scale (1 / hazard)."""
        scale = 1.0 / (self.hazard_z0 if z == 0 else self.hazard_z1)
        return np.asarray(u, dtype=float) * scale

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "bernoulli_p_w": self.bernoulli_p_w,
            "selection_intercept": self.selection_intercept,
            "selection_coef_w": self.selection_coef_w,
            "selection_coef_u": self.selection_coef_u,
            "hazard_z0": self.hazard_z0,
            "hazard_z1": self.hazard_z1,
            "censoring_scale": self.censoring_scale,
            "censoring_floor": self.censoring_floor,
        }


@dataclass(frozen=True)
class SimulatedData:
    """Observable dataset plus latent rows, kept apart from estimation paths."""

    dataset: Dataset
    u: np.ndarray
    t: np.ndarray
    c: np.ndarray


def dgp_generate(config: DgpConfig) -> SimulatedData:
    """Draw one sample; row i consumes the i-th counter block of uniforms."""
    rng = substream(config.seed, 0)
    uniforms = rng.random((config.n, 4))
    w = (uniforms[:, 0] < config.bernoulli_p_w).astype(np.int64)
    u = -np.log1p(-uniforms[:, 1])
    eps = ndtri(uniforms[:, 2])
    index = (
        config.selection_intercept
        + eps
        + config.selection_coef_w * w
        + config.selection_coef_u * u
    )
    z = ((index >= 0) & (w == 1)).astype(np.int64)
    t = np.where(z == 0, u * (1.0 / config.hazard_z0), u * (1.0 / config.hazard_z1))
    c = np.maximum(config.censoring_scale * -np.log1p(-uniforms[:, 3]), config.censoring_floor)
    y = np.minimum(t, c)
    delta = (t <= c).astype(np.int64)
    dataset = Dataset(y, z, w, delta, Z_LEVELS, W_LEVELS)
    return SimulatedData(dataset, u, t, c)


# ---------------------------------------------------------------------------
# Replication study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    """Pipeline parameters shared by every replication."""

    u_grid: np.ndarray
    tbar: float = 10.0
    smoother: str = "kernel"
    bandwidth: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    bootstrap_B: int = 0
    bootstrap_u: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    eval_lo: float = 0.05
    eval_hi: float = 0.9
    kappa: float = 10.0
    baseline_fraction: float = 0.5


@dataclass(frozen=True)
class ReplicationSummary:
    """Replication averages, coverage and breakpoint diagnostics."""

    u_grid: np.ndarray
    phi_mean: np.ndarray  # (M, 2) replication-mean estimates
    phi_truth: np.ndarray  # (M, 2)
    qte_mean: np.ndarray
    qte_truth: np.ndarray
    residual_mean: np.ndarray
    naive_mean: np.ndarray  # (M, 2) Nelson-Aalen inversions
    mean_abs_error: dict  # z -> mean_u |phi_mean - truth| on the eval range
    naive_mean_abs_error: dict
    coverage: dict  # functional label -> array over bootstrap_u
    bootstrap_u: np.ndarray
    breakpoints: np.ndarray  # detected u0-hat per replication, NaN if none
    replications: int
    seed: int
    censoring_fraction: float
    p_z1_given_w1: float

    @property
    def breakpoint_detection_rate(self) -> float:
        return float(np.mean(~np.isnan(self.breakpoints)))

    def breakpoint_rate_in(self, lo: float, hi: float) -> float:
        ok = ~np.isnan(self.breakpoints)
        return float(np.mean(ok & (self.breakpoints >= lo) & (self.breakpoints <= hi)))

    def to_json_dict(self) -> dict:
        return {
            "replications": self.replications,
            "seed": self.seed,
            "u_grid": self.u_grid.tolist(),
            "phi_mean": self.phi_mean.tolist(),
            "phi_truth": self.phi_truth.tolist(),
            "qte_mean": self.qte_mean.tolist(),
            "qte_truth": self.qte_truth.tolist(),
            "residual_mean": self.residual_mean.tolist(),
            "naive_mean": self.naive_mean.tolist(),
            "mean_abs_error": {str(k): v for k, v in self.mean_abs_error.items()},
            "naive_mean_abs_error": {
                str(k): v for k, v in self.naive_mean_abs_error.items()
            },
            "coverage": {k: list(v) for k, v in self.coverage.items()},
            "bootstrap_u": self.bootstrap_u.tolist(),
            "breakpoints": [None if np.isnan(b) else b for b in self.breakpoints],
            "breakpoint_detection_rate": self.breakpoint_detection_rate,
            "censoring_fraction": self.censoring_fraction,
            "p_z1_given_w1": self.p_z1_given_w1,
        }


def _replication_seed(master_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((master_seed, rep)).generate_state(1)[0])


def _run_one_replication(args):
    dgp, study, rep = args
    rep_seed = _replication_seed(dgp.seed, rep)
    sample = dgp_generate(replace(dgp, seed=rep_seed))
    data = sample.dataset
    model = fit_survival_model(data, study.tbar, study.smoother, study.bandwidth)
    estimate = estimate_phi(model, study.u_grid, study.solver, seed=rep_seed)
    naive = np.stack(
        [nelson_aalen_invert(data, z, study.u_grid) for z in (0, 1)], axis=1
    )
    report = detect_breakpoint(
        estimate, kappa=study.kappa, baseline_fraction=study.baseline_fraction
    )
    u0_hat = np.nan if report.u0_hat is None else report.u0_hat

    hits = {}
    if study.bootstrap_B > 0:
        functionals = [
            FunctionalSpec("phi", z=0),
            FunctionalSpec("phi", z=1),
            FunctionalSpec("qte", z0=0, z1=1),
        ]
        result = bootstrap(
            data,
            tbar=study.tbar,
            u_grid=np.asarray(study.bootstrap_u, dtype=float),
            functionals=functionals,
            B=study.bootstrap_B,
            seed=rep_seed,
            solver_config=study.solver,
            smoother=study.smoother,
            bandwidth=study.bandwidth,
        )
        for spec in functionals:
            entry = result.entries[spec.label()]
            truth = _truth_values(dgp, spec, np.asarray(study.bootstrap_u, dtype=float))
            hits[spec.label()] = (entry.lower <= truth) & (truth <= entry.upper)

    frac_censored = float(np.mean(data.delta == 0))
    w1 = data.w == 1
    p_z1_w1 = float(np.mean(data.z[w1] == 1)) if w1.any() else np.nan
    return {
        "theta": estimate.theta,
        "residual": estimate.residual_norm,
        "naive": naive,
        "u0_hat": u0_hat,
        "hits": hits,
        "censored": frac_censored,
        "p_z1_w1": p_z1_w1,
    }


def _truth_values(dgp: DgpConfig, spec: "FunctionalSpec", u: np.ndarray) -> np.ndarray:
    if spec.kind == "phi":
        return dgp.phi_true(spec.params["z"], u)
    if spec.kind == "qte":
        return dgp.phi_true(spec.params["z1"], u) - dgp.phi_true(spec.params["z0"], u)
    raise ValueError(f"no truth rule for functional {spec.kind!r}")


def run_replication_study(
    dgp: DgpConfig,
    replications: int,
    study: StudyConfig,
    n_jobs: int = 1,
) -> ReplicationSummary:
    """Generate, estimate and (optionally) bootstrap over many replications.

    Replication r draws its own substream from (seed, r), so parallel and
    serial execution produce identical summaries.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    u_grid = np.asarray(study.u_grid, dtype=float)
    study = replace(study, u_grid=u_grid)
    tasks = [(dgp, study, r) for r in range(replications)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_one_replication, tasks, chunksize=1))
    else:
        results = [_run_one_replication(t) for t in tasks]

    theta = np.mean([r["theta"] for r in results], axis=0)
    residual = np.mean([r["residual"] for r in results], axis=0)
    naive = np.mean([r["naive"] for r in results], axis=0)
    phi_truth = np.stack([dgp.phi_true(z, u_grid) for z in (0, 1)], axis=1)
    qte_truth = phi_truth[:, 1] - phi_truth[:, 0]
    eval_mask = (u_grid >= study.eval_lo - 1e-12) & (u_grid <= study.eval_hi + 1e-12)

    mean_abs_error = {
        z: float(np.mean(np.abs(theta[eval_mask, z] - phi_truth[eval_mask, z])))
        for z in (0, 1)
    }
    finite_naive = np.where(np.isfinite(naive), naive, np.nan)
    naive_mean_abs_error = {
        z: float(np.nanmean(np.abs(finite_naive[eval_mask, z] - phi_truth[eval_mask, z])))
        for z in (0, 1)
    }

    coverage = {}
    if study.bootstrap_B > 0:
        labels = results[0]["hits"].keys()
        for label in labels:
            coverage[label] = np.mean([r["hits"][label] for r in results], axis=0)

    return ReplicationSummary(
        u_grid=u_grid,
        phi_mean=theta,
        phi_truth=phi_truth,
        qte_mean=theta[:, 1] - theta[:, 0],
        qte_truth=qte_truth,
        residual_mean=residual,
        naive_mean=naive,
        mean_abs_error=mean_abs_error,
        naive_mean_abs_error=naive_mean_abs_error,
        coverage=coverage,
        bootstrap_u=np.asarray(study.bootstrap_u, dtype=float),
        breakpoints=np.array([r["u0_hat"] for r in results], dtype=float),
        replications=replications,
        seed=dgp.seed,
        censoring_fraction=float(np.mean([r["censored"] for r in results])),
        p_z1_given_w1=float(np.mean([r["p_z1_w1"] for r in results])),
    )
