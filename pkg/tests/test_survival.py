import numpy as np
import pytest
from scipy.integrate import simpson

from ivdur import (
    Dataset,
    DegenerateSample,
    EmptyCell,
    EmptyInstrumentLevel,
    InvalidBandwidth,
    bandwidth_rule_of_thumb,
    choose_tbar,
    fit_survival_model,
    kernel_smooth,
    km_estimate,
    localpoly_smooth,
    nelson_aalen_invert,
)
from ivdur.survival import StepSurvival, epanechnikov, km_from_arrays


def uncensored(y):
    y = np.asarray(y, dtype=float)
    return Dataset(y, np.zeros(y.size, int), np.zeros(y.size, int), np.ones(y.size, int), ("0",), ("0",))


# ---------------------------------------------------------------------------
# Product-limit estimator
# ---------------------------------------------------------------------------


def test_km_no_censoring_is_empirical_survival():
    km = km_estimate(uncensored([1.0, 2.0, 3.0]), 0, 0)
    assert km(2.5) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert km(0.0) == 1.0


def test_km_hand_computed_censored_value():
    data = Dataset([1, 2, 3, 4], [0] * 4, [0] * 4, [1, 0, 1, 1], ("0",), ("0",))
    km = km_estimate(data, 0, 0)
    assert km(3.0) == pytest.approx(0.375, abs=1e-15)


def test_km_equals_empirical_survival_on_random_uncensored_data(rng):
    for _ in range(20):
        n = int(rng.integers(3, 120))
        y = np.round(rng.exponential(5.0, size=n), 2)  # rounding forces ties
        km = km_from_arrays(y, np.ones(n, int))
        grid = np.concatenate((y, y - 1e-9, y + 1e-9, rng.uniform(0, 12, 25)))
        np.testing.assert_allclose(km(grid), (y[None, :] > grid[:, None]).mean(axis=1), atol=1e-12)


def test_km_step_properties(rng):
    y = rng.exponential(4.0, size=200)
    delta = (rng.random(200) < 0.7).astype(int)
    km = km_from_arrays(y, delta)
    values = km(np.sort(np.concatenate((km.jump_times, np.linspace(0, 20, 100)))))
    assert np.all(np.diff(values) <= 1e-15)
    assert np.all((values >= 0) & (values <= 1))
    # right-continuity: evaluating at a jump returns the post-jump level
    j = km.jump_times[0]
    assert km(j) == km.values[0]
    assert km(j - 1e-12) == 1.0


def test_km_empty_cell_error(toy_data):
    sub = toy_data.subset(toy_data.w == 0)
    data = Dataset(sub.y, sub.z, sub.w, sub.delta, sub.z_levels, ("u", "v"))
    with pytest.raises(EmptyCell) as err:
        km_estimate(data, 0, 1)
    assert "'a'" in str(err.value) and "'v'" in str(err.value)


# ---------------------------------------------------------------------------
# Bandwidth rule of thumb
# ---------------------------------------------------------------------------


def test_bandwidth_degenerate_sample():
    with pytest.raises(DegenerateSample):
        bandwidth_rule_of_thumb([3.0, 3.0, 3.0])


def test_bandwidth_formula_oracle(rng):
    x = rng.exponential(1.0, size=100)
    # independent re-derivation of the rule
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    expected = 1.06 * min(sd, iqr / 1.349) * 100 ** (-0.2)
    assert bandwidth_rule_of_thumb(x) == pytest.approx(expected, rel=1e-12)


def test_bandwidth_rate_in_n(rng):
    x = rng.standard_normal(200_000)
    small, large = bandwidth_rule_of_thumb(x[:200]), bandwidth_rule_of_thumb(x)
    assert large < small
    assert large == pytest.approx(small * (200 / 200_000) ** 0.2, rel=0.1)


# ---------------------------------------------------------------------------
# Kernel smoothing
# ---------------------------------------------------------------------------


def simpson_convolution(step, eps, t_values, n=10_001):
    s = np.linspace(-1.0, 1.0, n)
    weights = epanechnikov(s)
    return np.array([simpson(step(t - s * eps) * weights, x=s) for t in t_values])


def test_kernel_smooth_constant_curve():
    flat = StepSurvival(np.empty(0), np.empty(0))
    sm = kernel_smooth(flat, 0.5)
    t = np.linspace(0.5, 10.0, 40)
    np.testing.assert_allclose(sm.value(t), 1.0, atol=1e-15)
    np.testing.assert_allclose(sm.derivative(t), 0.0, atol=1e-15)


def test_kernel_smooth_matches_quadrature_oracle(rng):
    for _ in range(3):
        y = rng.exponential(6.0, size=3000)
        delta = (rng.random(3000) < 0.75).astype(int)
        step = km_from_arrays(y, delta)
        eps = 1.1
        sm = kernel_smooth(step, eps)
        t = np.linspace(eps, 10.0, 41)
        np.testing.assert_allclose(sm.value(t), simpson_convolution(step, eps, t), atol=1e-6)


def test_kernel_smooth_derivative_matches_finite_differences(rng):
    y = rng.exponential(6.0, size=2000)
    step = km_from_arrays(y, (rng.random(2000) < 0.8).astype(int))
    sm = kernel_smooth(step, 0.9)
    t = np.linspace(1.0, 9.0, 100)
    h = 1e-5
    fd = (sm.value(t + h) - sm.value(t - h)) / (2 * h)
    assert np.abs(sm.derivative(t) - fd).max() < 1e-4


def test_kernel_smooth_monotone_and_bounded(rng):
    y = rng.exponential(6.0, size=1500)
    sm = kernel_smooth(km_from_arrays(y, np.ones(1500, int)), 0.8)
    t = np.linspace(0.0, 15.0, 4000)
    v = sm.value(t)
    assert np.all(np.diff(v) <= 1e-10)
    assert np.all((v >= 0) & (v <= 1))
    assert sm.derivative(t).max() <= 1e-10


def test_kernel_smooth_rejects_bad_bandwidth():
    step = StepSurvival(np.array([1.0]), np.array([0.5]))
    with pytest.raises(InvalidBandwidth):
        kernel_smooth(step, 0.0)


# ---------------------------------------------------------------------------
# Local polynomial smoothing
# ---------------------------------------------------------------------------


def dense_linear_step(slope=0.1, upper=10.0, n=2000):
    t = np.linspace(upper / n, upper, n)
    return StepSurvival(t, 1.0 - slope * t)


def test_localpoly_reproduces_linear_curve():
    step = dense_linear_step()
    sm = localpoly_smooth(step, 0.8)
    t = np.linspace(0.8, 9.2, 60)
    assert np.abs(sm.value(t) - (1.0 - 0.1 * t)).max() < 1e-2
    assert np.abs(sm.derivative(t) + 0.1).max() < 1e-2


def test_localpoly_beats_kernel_at_the_left_boundary():
    step = dense_linear_step()
    lp = localpoly_smooth(step, 0.8)
    kn = kernel_smooth(step, 0.8)
    truth = step(0.0)
    assert abs(lp.value(0.0) - truth) < abs(kn.value(0.0) - truth)


def test_localpoly_values_clipped(rng):
    y = rng.exponential(2.0, size=50)
    sm = localpoly_smooth(km_from_arrays(y, np.ones(50, int)), 0.3)
    v = sm.value(np.linspace(0, 12, 300))
    assert np.all((v >= 0) & (v <= 1))


def test_localpoly_widens_sparse_windows():
    step = StepSurvival(np.array([1.0, 5.0, 9.0]), np.array([0.7, 0.4, 0.1]))
    sm = localpoly_smooth(step, 0.5)
    sm.value(3.0)  # no jump within half a unit of t=3
    assert sm.boundary_flagged


# ---------------------------------------------------------------------------
# Full model fit
# ---------------------------------------------------------------------------


def test_fit_cell_probabilities_normalize(dgp_model_10k):
    for w in range(dgp_model_10k.n_instruments):
        total = sum(dgp_model_10k.p_hat(z, w) for z in range(dgp_model_10k.n_treatments))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_fit_factorizes_under_independence(rng):
    n = 6000
    z = (rng.random(n) < 0.4).astype(int)
    y = rng.exponential(np.where(z == 1, 2.0, 4.0))
    data = Dataset(y, z, np.zeros(n, int), np.ones(n, int), ("0", "1"), ("0",))
    model = fit_survival_model(data, tbar=6.0)
    p1 = np.mean(z == 1)
    t = np.linspace(0.5, 5.0, 20)
    empirical = np.array([(y[z == 1] > ti).mean() for ti in t]) * p1
    np.testing.assert_allclose(model.sub_survival(t, 1, 0), empirical, atol=0.02)


def test_fit_flags_empty_cells_and_zero_survival(dgp_model_10k):
    assert (1, 0) in dgp_model_10k.empty_cells()
    t = np.linspace(0, 10, 7)
    np.testing.assert_array_equal(dgp_model_10k.sub_survival(t, 1, 0), 0.0)
    np.testing.assert_array_equal(dgp_model_10k.sub_survival_deriv(t, 1, 0), 0.0)


def test_fit_requires_nonempty_instrument_levels():
    data = Dataset([1.0, 2.0], [0, 1], [0, 0], [1, 1], ("0", "1"), ("0", "1"))
    with pytest.raises(EmptyInstrumentLevel):
        fit_survival_model(data, tbar=3.0)


def test_fit_raises_on_degenerate_cell_without_override():
    data = Dataset([2.0, 2.0, 2.0], [0, 0, 0], [0, 0, 0], [1, 1, 1], ("0",), ("0",))
    with pytest.raises(DegenerateSample):
        fit_survival_model(data, tbar=3.0)
    fit_survival_model(data, tbar=3.0, bandwidth=0.5)  # override unblocks


def test_fit_is_deterministic(dgp_sample_10k):
    a = fit_survival_model(dgp_sample_10k.dataset, tbar=10.0)
    b = fit_survival_model(dgp_sample_10k.dataset, tbar=10.0)
    t = np.linspace(0, 10, 101)
    for z in range(2):
        for w in range(2):
            np.testing.assert_array_equal(a.sub_survival(t, z, w), b.sub_survival(t, z, w))


def test_sub_survival_within_unit_interval(dgp_model_10k):
    t = np.linspace(0, 10, 301)
    for z in range(2):
        for w in range(2):
            v = dgp_model_10k.sub_survival(t, z, w)
            assert np.all((v >= 0) & (v <= 1))


# ---------------------------------------------------------------------------
# Evaluation bound
# ---------------------------------------------------------------------------


def test_choose_tbar_prefers_supplied_bound(toy_data):
    assert choose_tbar(toy_data, c0=10.0) == 10.0


def test_choose_tbar_empirical_quantile():
    data = uncensored(np.arange(1.0, 101.0))
    assert choose_tbar(data, alpha=0.95) == 95.0


def test_choose_tbar_minimum_over_cells():
    y = np.concatenate((np.arange(1.0, 8.0), np.arange(1.0, 10.0)))
    z = np.concatenate((np.zeros(7, int), np.ones(9, int)))
    data = Dataset(y, z, np.zeros(16, int), np.ones(16, int), ("0", "1"), ("0",))
    assert choose_tbar(data, alpha=1.0) == 7.0


# ---------------------------------------------------------------------------
# Naive comparator
# ---------------------------------------------------------------------------


def test_nelson_aalen_invert_exogenous_design(rng):
    n = 60_000
    z = (rng.random(n) < 0.5).astype(int)  # assignment independent of u
    u = rng.exponential(size=n)
    t = np.where(z == 0, 10 * u, 5 * u)
    c = np.maximum(15 * rng.exponential(size=n), 10.0)
    data = Dataset(
        np.minimum(t, c), z, np.zeros(n, int), (t <= c).astype(int), ("0", "1"), ("0",)
    )
    grid = np.arange(0.1, 0.91, 0.1)
    naive = nelson_aalen_invert(data, 0, grid)
    assert np.abs(naive - 10 * grid).max() < 0.3


def test_nelson_aalen_invert_origin_and_unreached():
    data = uncensored([1.0, 2.0, 3.0])
    assert nelson_aalen_invert(data, 0, np.array([0.0]))[0] == 0.0
    assert np.isinf(nelson_aalen_invert(data, 0, np.array([50.0]))[0])


def test_nelson_aalen_biased_under_endogeneity(dgp_sample_10k):
    grid = np.arange(0.2, 0.81, 0.1)
    naive = nelson_aalen_invert(dgp_sample_10k.dataset, 0, grid)
    assert np.abs(naive - 10 * grid).max() > 0.5


def test_fit_treatment_share_matches_design(dgp_model_10k):
    assert abs(dgp_model_10k.p_hat(1, 1) - 0.76) < 0.02


def test_localpoly_end_to_end_estimation():
    from ivdur import DgpConfig, dgp_generate, fit_survival_model
    from ivdur.estimator import estimate_phi

    sample = dgp_generate(DgpConfig(n=4000, seed=3))
    model = fit_survival_model(sample.dataset, tbar=10.0, method="localpoly")
    grid = np.arange(0.2, 0.81, 0.2)
    est = estimate_phi(model, grid)
    assert np.abs(est.theta[:, 0] - 10 * grid).max() < 0.6
    assert np.abs(est.theta[:, 1] - 5 * grid).max() < 0.6


def test_localpoly_monotone_on_realistic_curve(rng):
    from ivdur.survival import localpoly_smooth

    y = rng.exponential(6.0, 3000)
    delta = (rng.random(3000) < 0.8).astype(int)
    sm = localpoly_smooth(km_from_arrays(y, delta), 1.2)
    t = np.linspace(0.0, 10.0, 1500)
    assert np.all(np.diff(sm.value(t)) <= 1e-10)
    assert sm.derivative(t).max() <= 1e-10
