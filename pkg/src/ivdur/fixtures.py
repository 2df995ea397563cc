"""Closed-form sub-survival fixtures with known quantile curves.

These expose the same evaluation surface as a fitted survival model
(``sub_survival``, ``sub_survival_deriv``, level counts, ``tbar``), so the
solver and the partial-identification machinery run on them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .estimator import _residual_batch


@dataclass(frozen=True)
class AnalyticFixture:
    """Analytic sub-survival surface S(t, z | w) with known true quantiles.

    ``survival[(z, w)]`` and ``derivative[(z, w)]`` are vectorized callables
    of t; ``phi`` maps (z, u) to the true quantile value.  ``c0`` is the
    censoring-support bound used by partial-identification fixtures.
    """

    z_levels: tuple
    w_levels: tuple
    survival: dict = field(repr=False)
    derivative: dict = field(repr=False)
    phi: object = None
    c0: float | None = None
    tbar: float = 10.0

    @property
    def n_treatments(self) -> int:
        return len(self.z_levels)

    @property
    def n_instruments(self) -> int:
        return len(self.w_levels)

    def sub_survival(self, t, z: int, w: int):
        return self.survival[(z, w)](np.asarray(t, dtype=float))

    def sub_survival_deriv(self, t, z: int, w: int):
        return self.derivative[(z, w)](np.asarray(t, dtype=float))

    def phi_true(self, z: int, u):
        return self.phi(z, np.asarray(u, dtype=float))

    def system_residual(self, u: float, theta) -> np.ndarray:
        """Residual of the unclipped system at theta (no censoring bound)."""
        theta = np.asarray(theta, dtype=float)
        return _residual_batch(self, float(u), theta[None, :])[0]


def _exp_term(coef: float, rate: float):
    def value(t):
        return coef * np.exp(-rate * t)

    def deriv(t):
        return -coef * rate * np.exp(-rate * t)

    return value, deriv


def exponential_fixture(
    coefficients, rates, c0=None, tbar=10.0, phi=None
) -> AnalyticFixture:
    """Fixture with S(t, z_l | w_k) = coefficients[k][l] * exp(-rates[l] * t).

    Coefficients are indexed instrument-major; a zero coefficient makes the
    corresponding cell identically zero (as in triangular designs).
    """
    a = np.asarray(coefficients, dtype=float)
    lam = np.asarray(rates, dtype=float)
    K, L = a.shape
    survival, derivative = {}, {}
    for k in range(K):
        for l in range(L):
            v, d = _exp_term(a[k, l], lam[l])
            survival[(l, k)] = v
            derivative[(l, k)] = d
    return AnalyticFixture(
        z_levels=tuple(str(l) for l in range(L)),
        w_levels=tuple(str(k) for k in range(K)),
        survival=survival,
        derivative=derivative,
        phi=phi,
        c0=c0,
        tbar=tbar,
    )


def counterexample_fixture(tbar: float = 5.0) -> AnalyticFixture:
    """Binary-treatment, binary-instrument fixture with a known unique root.

    True quantile curves are phi_0(u) = u and phi_1(u) = u / 2, and the
    assembled sub-survival solves the system exactly at (u, u/2) for every u.
    With the censoring bound c0 = 1, the point (0.01, 2) at u = 3/2 satisfies
    the clipped inequalities even though it is not attainable by any monotone
    solution, which is what makes this fixture a useful sharpness probe.
    """

    def phi(z, u):
        return u if z == 0 else u / 2.0

    return exponential_fixture(
        coefficients=[[0.5, 0.5], [0.125, 0.875]],
        rates=[1.0, 2.0],
        c0=1.0,
        tbar=tbar,
        phi=phi,
    )


_LAGUERRE_NODES, _LAGUERRE_WEIGHTS = np.polynomial.laguerre.laggauss(128)


def _dgp_selection_prob(u, intercept=-0.7, coef_w=1.0, coef_u=0.5):
    """P(treated | U = u, W = 1) under the latent-index selection rule."""
    return ndtr(intercept + coef_w + coef_u * u)


def dgp_analytic_fixture(tbar: float = 10.0) -> AnalyticFixture:
    """Exact sub-survival surface of the simulation design.

    The instrument-off arm is closed form; the instrument-on arm integrates
    the normal selection probability against the unit-exponential latent
    variable with 128-node Gauss-Laguerre quadrature (the Gaussian dimension
    is handled exactly through the normal CDF).  Quadrature weights sum to
    one, so the per-instrument normalization holds to machine precision.
    """
    x, wq = _LAGUERRE_NODES, _LAGUERRE_WEIGHTS
    scale0, scale1 = 10.0, 5.0

    def s_00(t):
        return np.exp(-np.asarray(t, dtype=float) / scale0)

    def d_00(t):
        return -np.exp(-np.asarray(t, dtype=float) / scale0) / scale0

    def zero(t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def s_01(t):
        a = np.asarray(t, dtype=float)[..., None] / scale0
        return np.exp(-a[..., 0]) * (
            (1.0 - _dgp_selection_prob(a + x)) @ wq
        )

    def d_01(t):
        t = np.asarray(t, dtype=float)
        return -(1.0 - _dgp_selection_prob(t / scale0)) * np.exp(-t / scale0) / scale0

    def s_11(t):
        a = np.asarray(t, dtype=float)[..., None] / scale1
        return np.exp(-a[..., 0]) * (_dgp_selection_prob(a + x) @ wq)

    def d_11(t):
        t = np.asarray(t, dtype=float)
        return -_dgp_selection_prob(t / scale1) * np.exp(-t / scale1) / scale1

    def phi(z, u):
        return scale0 * u if z == 0 else scale1 * u

    survival = {(0, 0): s_00, (1, 0): zero, (0, 1): s_01, (1, 1): s_11}
    derivative = {(0, 0): d_00, (1, 0): zero, (0, 1): d_01, (1, 1): d_11}
    return AnalyticFixture(
        z_levels=("0", "1"),
        w_levels=("0", "1"),
        survival=survival,
        derivative=derivative,
        phi=phi,
        c0=None,
        tbar=tbar,
    )
