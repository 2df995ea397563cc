import logging

import numpy as np
import pytest

from ivdur import (
    ResidualContext,
    SolverConfig,
    estimate_phi,
    exponential_fixture,
    jacobian,
    residual,
    solve_at_u,
    two_step_weighting,
)
from ivdur.estimator import _residual_batch


def ctx(model, u, weight=None):
    V = np.eye(model.n_instruments) if weight is None else weight
    return ResidualContext(model, u, V)


# ---------------------------------------------------------------------------
# Residual operator
# ---------------------------------------------------------------------------


def test_residual_zero_at_origin(counterexample):
    np.testing.assert_allclose(residual(ctx(counterexample, 0.0), [0.0, 0.0]), 0.0, atol=1e-15)


def test_residual_zero_at_truth_dgp(dgp_exact):
    for u in (0.1, 0.4, 0.8):
        r = residual(ctx(dgp_exact, u), [10 * u, 5 * u])
        np.testing.assert_allclose(r, 0.0, atol=1e-13)


def test_residual_componentwise_nonincreasing(counterexample, rng):
    base = rng.uniform(0, 3, size=(40, 2))
    for axis in (0, 1):
        bumped = base.copy()
        bumped[:, axis] += 0.3
        r0 = _residual_batch(counterexample, 0.7, base)
        r1 = _residual_batch(counterexample, 0.7, bumped)
        assert np.all(r1 <= r0 + 1e-15)


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------


def test_jacobian_closed_form(counterexample):
    theta = np.array([0.8, 0.3])
    J = jacobian(ctx(counterexample, 0.5), theta)
    coef = np.array([[0.5, 0.5], [0.125, 0.875]])
    rates = np.array([1.0, 2.0])
    expected = -coef * rates * np.exp(-rates * theta)
    np.testing.assert_allclose(J, expected, atol=1e-14)
    assert np.all(J <= 0)


def test_jacobian_matches_finite_differences(dgp_model_10k):
    c = ctx(dgp_model_10k, 0.5)
    theta = np.array([4.0, 2.0])
    J = jacobian(c, theta)
    h = 1e-6
    for l in range(2):
        e = np.zeros(2)
        e[l] = h
        fd = (residual(c, theta + e) - residual(c, theta - e)) / (2 * h)
        np.testing.assert_allclose(J[:, l], fd, atol=1e-4)


def test_jacobian_zero_on_empty_cell(dgp_model_10k):
    J = jacobian(ctx(dgp_model_10k, 0.5), np.array([4.0, 2.0]))
    assert J[0, 1] == 0.0  # instrument level 0 never sees treatment 1


# ---------------------------------------------------------------------------
# Pointwise solver
# ---------------------------------------------------------------------------


def test_solver_counterexample_unique_root(counterexample, solver_config):
    res = solve_at_u(ctx(counterexample, 0.5), solver_config)
    np.testing.assert_allclose(res.theta, [0.5, 0.25], atol=1e-8)
    assert res.status == "converged"
    assert res.converged


def test_solver_scalar_inversion(solver_config):
    model = exponential_fixture([[1.0]], [1.0], tbar=6.0)
    for u in (0.2, 1.0, 3.0):
        res = solve_at_u(ctx(model, u), solver_config)
        assert res.theta[0] == pytest.approx(u, abs=1e-8)


def test_solver_beats_brute_force_grid(counterexample, dgp_exact, solver_config):
    for model, u in ((counterexample, 0.9), (dgp_exact, 0.6), (dgp_exact, 1.05)):
        res = solve_at_u(ctx(model, u), solver_config)
        axis = np.linspace(0, model.tbar, 200)
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        nodes = np.stack([g1.ravel(), g2.ravel()], axis=1)
        r = _residual_batch(model, u, nodes)
        grid_best = np.einsum("bk,bk->b", r, r).min()
        assert res.residual_norm <= grid_best + 1e-12


def test_solver_first_order_condition(dgp_model_10k, solver_config):
    c = ctx(dgp_model_10k, 0.5)
    res = solve_at_u(c, solver_config)
    assert res.status == "converged"
    g = jacobian(c, res.theta).T @ c.weight @ residual(c, res.theta)
    assert np.linalg.norm(g) <= solver_config.gradient_tolerance


def test_solver_boundary_status(dgp_exact, solver_config):
    res = solve_at_u(ctx(dgp_exact, 1.15), solver_config)  # 10u > tbar
    assert res.status == "boundary"
    assert res.theta[0] == pytest.approx(dgp_exact.tbar)


def test_solver_flags_multistart_disagreement(solver_config):
    # constant-in-t survival: every theta is a minimizer, starts disagree
    flat = exponential_fixture([[0.6, 0.4], [0.3, 0.7]], [0.0, 0.0], tbar=4.0)
    res = solve_at_u(ctx(flat, 0.5), solver_config)
    assert res.status == "multistart-disagreement"


# ---------------------------------------------------------------------------
# Grid estimation
# ---------------------------------------------------------------------------


def test_estimate_matches_truth_on_exact_surface(dgp_exact, solver_config):
    grid = np.arange(0.1, 0.91, 0.1)
    est = estimate_phi(dgp_exact, grid, solver_config)
    np.testing.assert_allclose(est.theta[:, 0], 10 * grid, atol=1e-7)
    np.testing.assert_allclose(est.theta[:, 1], 5 * grid, atol=1e-7)


def test_estimate_pointwise_independence(dgp_model_10k, solver_config):
    grid = np.array([0.2, 0.5, 0.8])
    full = estimate_phi(dgp_model_10k, grid, solver_config)
    single = estimate_phi(dgp_model_10k, np.array([0.5]), solver_config)
    np.testing.assert_array_equal(full.theta[1], single.theta[0])


def test_estimate_rejects_bad_grids(dgp_exact):
    with pytest.raises(ValueError):
        estimate_phi(dgp_exact, np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        estimate_phi(dgp_exact, np.array([0.5, 0.2]))


def test_estimate_is_bit_deterministic(dgp_model_10k, solver_config):
    grid = np.arange(0.1, 1.01, 0.1)
    a = estimate_phi(dgp_model_10k, grid, solver_config, seed=7)
    b = estimate_phi(dgp_model_10k, grid, solver_config, seed=7)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.residual_norm, b.residual_norm)
    assert a.status == b.status


def test_estimate_csv_schema(tmp_path, dgp_exact, solver_config):
    est = estimate_phi(dgp_exact, np.array([0.3, 0.6]), solver_config)
    path = tmp_path / "phi.csv"
    est.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "u,theta_1,theta_2,residual_norm,status"


# ---------------------------------------------------------------------------
# Two-step weighting
# ---------------------------------------------------------------------------


def test_two_step_scalar_inverse_square():
    model = exponential_fixture([[1.0]], [1.0], tbar=6.0)
    grid = np.array([0.5, 1.0])
    first = estimate_phi(model, grid)
    weight_fn = two_step_weighting(model, first)
    # density at the solution theta = u is exp(-u); V = 1 / f^2
    for u in grid:
        f = np.exp(-u)
        assert weight_fn(u)[0, 0] == pytest.approx(1.0 / f**2, rel=1e-6)


def test_two_step_identity_fallback_when_singular(caplog):
    # second treatment level never occurs: Jacobian column is identically zero
    model = exponential_fixture([[1.0, 0.0], [1.0, 0.0]], [1.0, 1.0], tbar=4.0)
    first = estimate_phi(model, np.array([0.5]))
    with caplog.at_level(logging.WARNING, logger="ivdur.estimator"):
        weight_fn = two_step_weighting(model, first)
    np.testing.assert_array_equal(weight_fn(0.5), np.eye(2))
    assert any("identity" in rec.message for rec in caplog.records)


def test_two_step_overidentified_uses_identity(caplog):
    model = exponential_fixture([[1.0], [1.0]], [1.0], tbar=4.0)
    first = estimate_phi(model, np.array([0.5]))
    with caplog.at_level(logging.INFO, logger="ivdur.estimator"):
        weight_fn = two_step_weighting(model, first)
    np.testing.assert_array_equal(weight_fn(0.5), np.eye(2))
    assert any("K=2" in rec.message for rec in caplog.records)


def test_two_step_does_not_move_exactly_identified_solution(counterexample):
    grid = np.arange(0.2, 0.81, 0.2)
    identity_pass = estimate_phi(counterexample, grid)
    two_step_pass = estimate_phi(counterexample, grid, SolverConfig(weighting="two-step"))
    np.testing.assert_allclose(two_step_pass.theta, identity_pass.theta, atol=1e-7)


# ---------------------------------------------------------------------------
# Consistency trend
# ---------------------------------------------------------------------------


def test_error_shrinks_with_sample_size():
    from ivdur import DgpConfig, dgp_generate, fit_survival_model

    grid = np.arange(0.05, 0.901, 0.05)
    errors = []
    for n in (1000, 4000, 16000):
        sample = dgp_generate(DgpConfig(n=n, seed=2291))
        model = fit_survival_model(sample.dataset, tbar=10.0)
        est = estimate_phi(model, grid)
        truth = np.stack([10 * grid, 5 * grid], axis=1)
        errors.append(np.abs(est.theta - truth).max())
    inversions = sum(errors[i + 1] > errors[i] for i in range(len(errors) - 1))
    assert inversions <= 1
    assert errors[-1] < errors[0]


def test_phi_estimate_json_document(tmp_path, dgp_exact):
    import json

    est = estimate_phi(dgp_exact, np.array([0.3, 0.6]), SolverConfig(), seed=11)
    path = tmp_path / "phi.json"
    est.to_json(path)
    doc = json.loads(path.read_text())
    assert doc["seed"] == 11
    assert doc["config"]["weighting"] == "identity"
    assert len(doc["u_grid"]) == 2 and len(doc["theta"][0]) == 2
