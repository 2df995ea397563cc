"""Pointwise solution of the nonlinear survival system.

For a fitted (or analytic) sub-survival model the residual operator maps a
candidate quantile vector theta to the K-vector

    ( sum_l S(theta_l, z_l | w_k) - exp(-u) )_k ,

whose weighted least-norm point over the box [0, tbar]^L is the estimate of
the counterfactual quantile function at u.  The solver is a projected
Gauss-Newton iteration with Levenberg damping, run from every node of a
uniform multistart lattice; all starts are advanced in a single vectorized
batch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

STATUS_CONVERGED = "converged"
STATUS_BOUNDARY = "boundary"
STATUS_DISAGREEMENT = "multistart-disagreement"

# Two starts "agree" when their objectives differ by less than this.
_OBJECTIVE_TIE = 1e-10
# ... and "disagree" when their parameters differ by more than this times tbar.
_PARAM_TIE_REL = 1e-3


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs for the pointwise box-constrained least-norm solver."""

    multistart_grid_points_per_dim: int = 8
    max_iterations: int = 80
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    weighting: str = "identity"  # "identity" | "two-step"

    def __post_init__(self):
        if self.multistart_grid_points_per_dim < 2:
            raise ValueError("multistart lattice needs at least 2 points per axis")
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.weighting not in ("identity", "two-step"):
            raise ValueError(f"unknown weighting policy {self.weighting!r}")

    def to_dict(self) -> dict:
        return {
            "multistart_grid_points_per_dim": self.multistart_grid_points_per_dim,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "step_tolerance": self.step_tolerance,
            "weighting": self.weighting,
        }


@dataclass(frozen=True)
class ResidualContext:
    """Survival model, target u and SPD weighting matrix for one grid point."""

    model: object
    u: float
    weight: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.weight, dtype=float)
        K = self.model.n_instruments
        if V.shape != (K, K):
            raise ValueError(f"weight must be {K}x{K}, got {V.shape}")
        if not np.allclose(V, V.T, atol=1e-12):
            raise ValueError("weight matrix must be symmetric")
        eigs = np.linalg.eigvalsh(V)
        if eigs[0] <= 0 or not np.isfinite(eigs[-1]):
            raise ValueError("weight matrix must be positive definite with finite eigenvalues")
        object.__setattr__(self, "weight", V)


def _residual_batch(model, u: float, thetas: np.ndarray) -> np.ndarray:
    """Residual vectors for a (B, L) batch of candidate points; returns (B, K)."""
    B = thetas.shape[0]
    K, L = model.n_instruments, model.n_treatments
    out = np.full((B, K), -np.exp(-u))
    for k in range(K):
        for l in range(L):
            out[:, k] += model.sub_survival(thetas[:, l], l, k)
    return out


def _jacobian_batch(model, thetas: np.ndarray) -> np.ndarray:
    """Residual Jacobians for a (B, L) batch; returns (B, K, L) with entries
    dS/dt(theta_l, z_l | w_k), i.e. minus the smoothed sub-density."""
    B = thetas.shape[0]
    K, L = model.n_instruments, model.n_treatments
    out = np.empty((B, K, L))
    for k in range(K):
        for l in range(L):
            out[:, k, l] = model.sub_survival_deriv(thetas[:, l], l, k)
    return out


def residual(ctx: ResidualContext, theta) -> np.ndarray:
    """The K-vector sum_l S(theta_l, z_l | w_k) - exp(-u)."""
    theta = np.asarray(theta, dtype=float)
    return _residual_batch(ctx.model, ctx.u, theta[None, :])[0]


def jacobian(ctx: ResidualContext, theta) -> np.ndarray:
    """K x L matrix of first derivatives of the residual; every entry <= 0."""
    theta = np.asarray(theta, dtype=float)
    return _jacobian_batch(ctx.model, theta[None, :])[0]


class SolveResult(NamedTuple):
    theta: np.ndarray
    residual_norm: float  # squared weighted norm of the residual at theta
    status: str
    converged: bool


def _multistart_lattice(tbar: float, L: int, points_per_dim: int) -> np.ndarray:
    axis = np.linspace(0.0, tbar, points_per_dim)
    grids = np.meshgrid(*([axis] * L), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def solve_at_u(ctx: ResidualContext, config: SolverConfig = SolverConfig()) -> SolveResult:
    """Minimize the squared weighted residual norm over the box [0, tbar]^L.

    Every lattice start is iterated with projected Gauss-Newton steps under
    Levenberg damping; the best local solution is returned.  The reported
    ``residual_norm`` is the squared V-weighted norm of the residual.
    """
    model, u, V = ctx.model, ctx.u, ctx.weight
    tbar = float(model.tbar)
    L = model.n_treatments
    theta = _multistart_lattice(tbar, L, config.multistart_grid_points_per_dim)
    B = theta.shape[0]

    def objective(th):
        r = _residual_batch(model, u, th)
        return np.einsum("bk,kj,bj->b", r, V, r), r

    obj, r = objective(theta)
    lam = np.full(B, 1e-3)
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    eye = np.eye(L)

    for _ in range(config.max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        th_a = theta[idx]
        J = _jacobian_batch(model, th_a)  # (b, K, L)
        JtV = np.einsum("bkl,kj->blj", J, V)  # (b, L, K)
        g = np.einsum("blk,bk->bl", JtV, r[idx])  # gradient direction J'V r
        H = np.einsum("blk,bkm->blm", JtV, J)  # J'V J

        # coordinates pressed against a bound with the gradient pointing
        # outward are frozen; the same mask defines first-order optimality
        frozen = ((th_a <= 0.0) & (g > 0)) | ((th_a >= tbar) & (g < 0))
        pg = np.where(frozen, 0.0, g)
        done = np.linalg.norm(pg, axis=1) <= config.gradient_tolerance
        converged[idx[done]] = True
        active[idx[done]] = False
        if done.all():
            continue

        keep = ~done
        idx = idx[keep]
        th_a, g, H, free = th_a[keep], pg[keep], H[keep], ~frozen[keep]
        # reduce the step equation to the free block (unit rows elsewhere)
        H = H * free[:, :, None] * free[:, None, :]
        H[:, np.arange(L), np.arange(L)] += ~free
        scale = np.trace(H, axis1=1, axis2=2) / L
        damp = lam[idx] * (scale + 1e-12)
        M = H + damp[:, None, None] * eye
        try:
            p = -np.linalg.solve(M, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            p = -np.linalg.solve(M + 1e-8 * eye, g[..., None])[..., 0]
        trial = np.clip(th_a + p, 0.0, tbar)
        obj_t, r_t = objective(trial)
        improved = obj_t < obj[idx]
        acc = idx[improved]
        theta[acc] = trial[improved]
        obj[acc] = obj_t[improved]
        r[acc] = r_t[improved]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        rej = idx[~improved]
        lam[rej] *= 10.0
        # vanishing proposed steps mean a local solution, whether the trial
        # was accepted or rejected (rejections there are float-precision noise)
        step = np.linalg.norm(trial - th_a, axis=1)
        stalled = step <= config.step_tolerance
        converged[idx[stalled]] = True
        active[idx[stalled]] = False
        # hopelessly damped rows have stopped making progress
        exhausted = lam[idx] > 1e12
        active[idx[exhausted]] = False

    best = int(np.argmin(obj))
    theta_best = theta[best]
    obj_best = float(obj[best])

    status = STATUS_CONVERGED
    near_edge = (theta_best <= config.step_tolerance) | (
        theta_best >= tbar - config.step_tolerance
    )
    if near_edge.any():
        status = STATUS_BOUNDARY
    ties = np.flatnonzero(np.abs(obj - obj_best) < _OBJECTIVE_TIE)
    if ties.size > 1:
        spread = np.abs(theta[ties] - theta_best).max()
        if spread > _PARAM_TIE_REL * tbar:
            status = STATUS_DISAGREEMENT
    return SolveResult(theta_best, obj_best, status, bool(converged[best]))


@dataclass(frozen=True)
class PhiEstimate:
    """Estimated quantile curves on a u-grid with per-point diagnostics."""

    u_grid: np.ndarray
    theta: np.ndarray  # (M, L), each row in [0, tbar]^L
    residual_norm: np.ndarray  # squared weighted residual norm per point
    status: tuple
    z_levels: tuple = ()
    seed: int | None = None
    config: dict = field(default_factory=dict)
    converged: tuple = ()

    @property
    def n_treatments(self) -> int:
        return self.theta.shape[1]

    def curve(self, z: int) -> np.ndarray:
        """Estimated quantile function for treatment level z on the grid."""
        return self.theta[:, z]

    def nearest_index(self, u: float) -> int:
        return int(np.argmin(np.abs(self.u_grid - u)))

    def to_csv(self, path) -> None:
        L = self.theta.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["u"] + [f"theta_{l + 1}" for l in range(L)] + ["residual_norm", "status"]
            )
            for i, u in enumerate(self.u_grid):
                writer.writerow(
                    [repr(float(u))]
                    + [repr(float(v)) for v in self.theta[i]]
                    + [repr(float(self.residual_norm[i])), self.status[i]]
                )

    def to_json_dict(self) -> dict:
        return {
            "u_grid": [float(u) for u in self.u_grid],
            "theta": [[float(v) for v in row] for row in self.theta],
            "residual_norm": [float(v) for v in self.residual_norm],
            "status": list(self.status),
            "z_levels": list(self.z_levels),
            "seed": self.seed,
            "config": dict(self.config),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def identity_weight(model) -> np.ndarray:
    return np.eye(model.n_instruments)


def estimate_phi(
    model,
    u_grid,
    config: SolverConfig = SolverConfig(),
    weight_fn: Callable[[float], np.ndarray] | None = None,
    seed: int | None = None,
) -> PhiEstimate:
    """Solve the system independently at every grid point.

    With ``weighting="two-step"`` a first identity-weighted pass feeds the
    data-driven weight matrices of the second pass; an explicit ``weight_fn``
    overrides both policies.
    """
    u_grid = np.asarray(u_grid, dtype=float)
    if u_grid.ndim != 1 or u_grid.size == 0:
        raise ValueError("u_grid must be a nonempty 1-d array")
    if np.any(u_grid <= 0) or np.any(np.diff(u_grid) <= 0):
        raise ValueError("u_grid must be strictly increasing and positive")

    if weight_fn is None and config.weighting == "two-step":
        first = estimate_phi(
            model,
            u_grid,
            SolverConfig(
                config.multistart_grid_points_per_dim,
                config.max_iterations,
                config.gradient_tolerance,
                config.step_tolerance,
                weighting="identity",
            ),
            seed=seed,
        )
        weight_fn = two_step_weighting(model, first)

    identity = identity_weight(model)
    L = model.n_treatments
    M = u_grid.size
    theta = np.empty((M, L))
    norms = np.empty(M)
    statuses = []
    flags = []
    for i, u in enumerate(u_grid):
        V = identity if weight_fn is None else weight_fn(float(u))
        res = solve_at_u(ResidualContext(model, float(u), V), config)
        theta[i] = res.theta
        norms[i] = res.residual_norm
        statuses.append(res.status)
        flags.append(res.converged)
    return PhiEstimate(
        u_grid,
        theta,
        norms,
        tuple(statuses),
        z_levels=tuple(getattr(model, "z_levels", ())),
        seed=seed,
        config=config.to_dict(),
        converged=tuple(flags),
    )


def two_step_weighting(model, first_pass: PhiEstimate) -> Callable[[float], np.ndarray]:
    """Data-driven weighting from a first identity-weighted pass.

    For square systems the weight is the inverse of the symmetric product of
    the estimated Jacobian with itself, eigenvalue-floored so the weighting
    stays uniformly positive definite; the inverse-Jacobian optimality result
    only covers square invertible systems, so overidentified models (K > L)
    fall back to the identity with a logged notice.
    """
    K, L = model.n_instruments, model.n_treatments
    identity = np.eye(K)
    if K > L:
        logger.info(
            "two-step weighting: K=%d > L=%d not covered; using identity", K, L
        )
        return lambda u: identity

    weights = []
    for i in range(first_pass.u_grid.size):
        sigma = _jacobian_batch(model, first_pass.theta[i][None, :])[0]
        m = sigma.T @ sigma
        m = 0.5 * (m + m.T)
        eigvals, eigvecs = np.linalg.eigh(m)
        if eigvals[-1] <= 0 or eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
            logger.warning(
                "two-step weighting singular at u=%.6g; falling back to identity",
                first_pass.u_grid[i],
            )
            weights.append(identity)
            continue
        inv_eigs = np.maximum(1.0 / eigvals, 1e-8)
        weights.append((eigvecs * inv_eigs) @ eigvecs.T)
    grid = first_pass.u_grid

    def weight_fn(u: float) -> np.ndarray:
        return weights[int(np.argmin(np.abs(grid - u)))]

    return weight_fn
