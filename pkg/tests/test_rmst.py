import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import tian_fixed
from trmst.core import Dataset, build_dataset, restrict
from trmst.cox import fit_cox, subject_cumhaz
from trmst.errors import DimensionMismatch, EmptyGrid, NotConverged
from trmst.rmst import (
    WeightModel,
    build_grid,
    censoring_weights,
    fit_rmst,
    fit_rmst_model,
    predict_rmst,
    rmst_r2,
)


def fixed_data(times, status, x):
    x = np.asarray(x, float)
    x = x[:, None] if x.ndim == 1 else x
    n = len(times)
    return Dataset(np.arange(n), np.zeros(n), np.asarray(times, float), status, x)


def censored_sample(seed, n=80, p=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    t = rng.exponential(np.exp(-0.3 * x[:, 0]))
    c = rng.exponential(2.0 * np.exp(0.4 * x[:, -1]))
    return fixed_data(np.minimum(t, c), (t <= c).astype(int), x)


def grid_with_weights(data, tau, w):
    """Grid whose weights are given per subject (followup-end policy)."""
    w = np.asarray(w, float)
    return build_grid(data, restrict(data, tau), lambda d, t, left_limit=False: w)


# -- estimating equation ------------------------------------------------------------

def test_no_censoring_is_ordinary_least_squares():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 2))
    t = rng.exponential(size=50) + 0.01
    d = fixed_data(t, np.ones(50, int), x)
    tau = 1.5
    fit, grid = fit_rmst_model(d, tau)
    assert np.all(grid.weight == 1.0)
    S = np.column_stack([np.ones(50), x])
    ols, *_ = np.linalg.lstsq(S, np.minimum(t, tau), rcond=None)
    np.testing.assert_allclose(fit.eta, ols, atol=1e-10)
    assert fit.residual_max < 1e-8


def test_intercept_only_is_mean():
    t = np.array([0.5, 1.0, 2.0, 3.5, 4.0])
    d = Dataset(np.arange(5), np.zeros(5), t, np.ones(5, int))
    fit, _ = fit_rmst_model(d, 3.0)
    assert fit.eta[0] == pytest.approx(np.mean(np.minimum(t, 3.0)), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_fixed_path_matches_independent_implementation(seed):
    d = censored_sample(seed)
    tau = 1.2
    fit, _ = fit_rmst_model(d, tau, time_dependent=False)
    ref = tian_fixed(d.time, d.delta, d.subject_fixed, tau)
    np.testing.assert_allclose(fit.eta, ref, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_coefficients_invariant_to_weight_scale(seed, c):
    d = censored_sample(seed, n=30)
    w = np.random.default_rng(seed).uniform(1, 3, size=30)
    a = fit_rmst(grid_with_weights(d, 1.0, w))
    b = fit_rmst(grid_with_weights(d, 1.0, c * w))
    np.testing.assert_allclose(a.eta, b.eta, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("link", ["identity", "log"])
def test_solution_solves_equation(link):
    d = censored_sample(4, n=200)
    fit, grid = fit_rmst_model(d, 1.0, link=link)
    w = grid.effective_weight
    u = grid.S.T @ (w * (grid.y - fit.predict(grid.S))) / grid.n_subjects
    assert np.max(np.abs(u)) < 1e-8
    assert fit.converged


def test_log_link_predictions_positive():
    d = censored_sample(5, n=150)
    fit, _ = fit_rmst_model(d, 1.0, link="log")
    mu, lo, hi = predict_rmst(fit, [0.0, 0.0])
    assert 0 < lo <= mu <= hi <= 1.0


# -- weights -----------------------------------------------------------------------------

def test_weights_are_at_least_one():
    d = censored_sample(1)
    wm = censoring_weights(d)
    assert np.all(wm(d, d.time) >= 1.0)
    assert np.all(wm(d, d.time, left_limit=True) >= 1.0)


def test_weights_without_censoring_are_one():
    d = fixed_data([1, 2, 3], [1, 1, 1], [0, 1, 0])
    wm = censoring_weights(d)
    np.testing.assert_array_equal(wm(d, d.time), 1.0)


def test_single_model_weight_is_inverse_censoring_survival():
    d = censored_sample(2)
    wm = censoring_weights(d, weighting="joint")
    fit = wm.fixed_fit
    for k in (0, 7, 19):
        h = subject_cumhaz(fit, d.subject_records(k), d.time[k])
        assert wm(d, d.time)[k] == pytest.approx(1 / np.exp(-h), rel=1e-12)


def test_double_weight_with_null_coefficients_is_squared_nelson_aalen():
    # with both censoring coefficients forced to zero each factor is exp(NA)
    d = build_dataset([(1, 0, 1, 1, (0.0,), (0.0,)), (2, 0, 2, 0, (1.0,), (0.0,)),
                       (3, 0, 1, 0, (0.0,), (1.0,)), (3, 1, 3, 0, (0.0,), (0.0,)),
                       (4, 0, 4, 1, (1.0,), (1.0,))], ["x"], ["z"])
    fx = fit_cox(d, "fixed", "censoring", max_iter=0)
    fz = fit_cox(d, "td", "censoring", max_iter=0)
    w = WeightModel(fx, fz)(d, np.full(4, 3.5))
    # censorings at 2 (3 at risk) and 3 (2 at risk); each subject accrues
    # hazard only over its own follow-up
    na = np.array([0.0, 1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2])
    np.testing.assert_allclose(w, np.exp(2 * na), rtol=1e-12)


def test_max_weight_caps():
    d = censored_sample(3)
    wm = censoring_weights(d, max_weight=1.5)
    assert np.max(wm(d, d.time)) <= 1.5
    with pytest.raises(ValueError):
        censoring_weights(d, max_weight=0.5)


def test_joint_weighting_is_consistent():
    # binary x, exponential event and censoring times: the saturated
    # identity-link model recovers the two true restricted means
    rng = np.random.default_rng(7)
    n, tau = 20_000, 1.5
    x = rng.integers(0, 2, n).astype(float)
    rate = np.where(x == 1, 2.0, 1.0)
    t = rng.exponential(1 / rate)
    c = rng.exponential(1 / np.where(x == 1, 0.8, 0.3))
    d = fixed_data(np.minimum(t, c), (t <= c).astype(int), x)
    fit, _ = fit_rmst_model(d, tau, weighting="joint")
    truth = (1 - np.exp(-rate * tau)) / rate
    assert fit.eta[0] == pytest.approx(truth[x == 0][0], abs=0.02)
    assert fit.eta[0] + fit.eta[1] == pytest.approx(truth[x == 1][0], abs=0.02)


# -- grids -----------------------------------------------------------------------------------

TRANSPLANTED = [(1, 0, 1, 0, (0.0,), (0.0,)), (1, 1, 3, 1, (0.0,), (1.0,)),
                (2, 0, 2, 1, (1.0,), (0.0,))]


def test_interval_start_grid_rows():
    d = build_dataset(TRANSPLANTED, ["x"], ["z"])
    g = build_grid(d, restrict(d, 5), censoring_weights(d), policy="interval-starts")
    np.testing.assert_array_equal(g.subject, [0, 0, 1])
    np.testing.assert_array_equal(g.t, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(g.S[:, 2], [0.0, 1.0, 0.0])


def test_interval_start_grid_respects_tau():
    d = build_dataset(TRANSPLANTED, ["x"], ["z"])
    g = build_grid(d, restrict(d, 0.5), censoring_weights(d), policy="interval-starts")
    np.testing.assert_array_equal(g.t, [0.0, 0.0])


def test_followup_end_uses_left_continuous_covariate():
    d = build_dataset(TRANSPLANTED, ["x"], ["z"])
    g = build_grid(d, restrict(d, 5), censoring_weights(d))
    np.testing.assert_array_equal(g.t, [3.0, 2.0])
    np.testing.assert_array_equal(g.S[:, 2], [1.0, 0.0])


def test_event_time_grid_rows():
    d = build_dataset(TRANSPLANTED, ["x"], ["z"])
    g = build_grid(d, restrict(d, 5), censoring_weights(d), policy="event-times")
    # event times 2 and 3: subject 1 gets rows at 0 and 2, subject 2 only at 0
    np.testing.assert_array_equal(g.subject, [0, 0, 1])
    np.testing.assert_array_equal(g.t, [0.0, 2.0, 0.0])
    np.testing.assert_array_equal(g.S[:, 2], [0.0, 1.0, 0.0])


def test_no_complete_subject():
    d = fixed_data([1.0, 2.0], [1, 0], [0.0, 1.0])
    v = restrict(d, 3.0)
    v = type(v)(**{**v.__dict__, "delta_tilde": np.zeros(2, int)})
    with pytest.raises(EmptyGrid):
        build_grid(d, v, censoring_weights(d))


@pytest.mark.parametrize("policy", ["followup-end", "interval-starts"])
def test_one_row_policies_agree_without_censoring(policy):
    # single-interval subjects, no censoring: one row each with weight 1
    d = fixed_data([1, 2, 3, 4, 5, 6], [1, 1, 1, 1, 1, 1], [0, 1, 0, 1, 0, 1])
    fit, _ = fit_rmst_model(d, 10.0, policy=policy)
    np.testing.assert_allclose(fit.eta, [3.0, 1.0], atol=1e-12)


# -- prediction and R^2 ---------------------------------------------------------------------

def test_prediction_interval_and_dimensions():
    d = censored_sample(8, n=200)
    fit, _ = fit_rmst_model(d, 1.0)
    mu, lo, hi = predict_rmst(fit, [0.2, -0.1])
    assert lo <= mu <= hi
    assert predict_rmst(fit, [1.0, 0.2, -0.1])[0] == mu
    with pytest.raises(DimensionMismatch):
        predict_rmst(fit, [1.0])
    zero = type(fit)(**{**fit.__dict__, "covariance": np.zeros_like(fit.covariance)})
    assert predict_rmst(zero, [0.2, -0.1]) == (mu, mu, mu)
    bad = type(fit)(**{**fit.__dict__, "converged": False})
    with pytest.raises(NotConverged):
        predict_rmst(bad, [0.2, -0.1])


@pytest.mark.parametrize("link", ["identity", "log"])
def test_prediction_monotone_in_coefficient(link):
    d = censored_sample(9, n=200)
    fit, _ = fit_rmst_model(d, 1.0, link=link)
    s = np.array([1.0, 0.5, 0.5])
    base = predict_rmst(fit, s)[0]
    up = type(fit)(**{**fit.__dict__, "eta": fit.eta + np.array([0.0, 0.1, 0.0])})
    assert predict_rmst(up, s)[0] > base


def test_r2_bounds():
    d = fixed_data([1, 2, 3, 4], [1, 1, 1, 1], [1, 2, 3, 4])
    fit, grid = fit_rmst_model(d, 10.0)
    assert rmst_r2(fit, grid) == pytest.approx(1.0)
    d = Dataset(np.arange(4), np.zeros(4), [1.0, 2.0, 3.0, 4.0], np.ones(4, int))
    fit, grid = fit_rmst_model(d, 10.0)
    assert rmst_r2(fit, grid) == pytest.approx(0.0, abs=1e-12)


def test_stanford_transplant_model(stanford):
    fit, grid = fit_rmst_model(stanford, 4.93)
    coef = dict(zip(fit.names, fit.eta))
    assert coef["transplant"] == pytest.approx(0.868, abs=0.05)
    assert coef["age_60plus"] == pytest.approx(-0.766, abs=0.05)
    assert 0 < rmst_r2(fit, grid) < 1
