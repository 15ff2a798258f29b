import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magime.errors import InvalidArgumentError
from magime.pk import bateman_auc, bateman_concentration, summarize, trapezoid_weights
from magime.uncertainty import z_value

from oracles import bateman, bateman_auc as oracle_auc


def test_constant_trajectory():
    t = np.linspace(0, 12, 25)
    s = summarize(t, np.full(25, 2.0), np.full(25, 0.1))
    assert s.cmax.estimate == 2.0 and s.cmin.estimate == 2.0
    assert s.auc.estimate == pytest.approx(24.0)
    assert s.tmax == 0.0


def test_auc_of_bateman_curve_on_fine_grid():
    t = np.arange(0, 1201) * 0.01
    c = bateman(t, 0.3, 1.0, 22.45, 400.0, 0.3)
    s = summarize(t, c, np.zeros_like(t))
    exact = oracle_auc(12.0, 0.3, 1.0, 22.45, 400.0, 0.3)
    assert abs(s.auc.estimate - exact) / exact < 1e-3


def test_closed_forms_agree_with_oracles():
    t = np.linspace(0, 12, 13)
    np.testing.assert_allclose(bateman_concentration(t, 0.27, 0.71, 18.02, 600.0, 0.2),
                               bateman(t, 0.27, 0.71, 18.02, 600.0, 0.2), rtol=1e-12)
    assert bateman_auc(12.0, 0.27, 0.71, 18.02, 600.0, 0.2) == pytest.approx(
        oracle_auc(12.0, 0.27, 0.71, 18.02, 600.0, 0.2), rel=1e-12)


def test_equal_rate_limit_is_continuous():
    near = bateman_concentration(3.0, 0.3, 0.3 + 1e-7, 20.0, 400.0)
    assert bateman_concentration(3.0, 0.3, 0.3, 20.0, 400.0) == pytest.approx(float(near), rel=1e-5)
    assert bateman_auc(12.0, 0.3, 0.3, 20.0, 400.0) == pytest.approx(bateman_auc(12.0, 0.3, 0.3 + 1e-7, 20.0, 400.0),
                                                                     rel=1e-5)


def test_summary_row_formatting():
    se = (3.23 - 2.25) / 2 / z_value(0.95)
    t = np.array([0.0, 1.0, 2.0])
    s = summarize(t, np.array([1.0, 2.74, 1.5]), np.array([0.1, se, 0.1]))
    assert f"{s.cmax.estimate:.2f} ({s.cmax.lo:.2f}, {s.cmax.hi:.2f})" == "2.74 (2.25, 3.23)"
    assert s.tmax == 1.0


def test_window_restricts_extrema_and_cmin_interval_is_floored():
    t = np.linspace(0, 18, 37)
    c = bateman(t, 0.3, 1.0, 22.45, 400.0)
    s = summarize(t, c, np.full_like(t, 0.6), window=(12.0, 18.0))
    assert s.tmin == 18.0 and s.tmax == 12.0
    assert s.cmin.lo == 0.0
    assert s.prob_cmin_below(0.1) == pytest.approx(
        __import__("scipy").stats.norm.cdf((0.1 - s.cmin.estimate) / 0.6))


def test_auc_se_uses_covariance_when_given():
    t = np.linspace(0, 2, 5)
    w = trapezoid_weights(t)
    S = 0.01 * (np.eye(5) + 0.5)
    s = summarize(t, np.ones(5), np.sqrt(np.diag(S)), cov_provider=lambda idx: S[np.ix_(idx, idx)])
    assert s.auc.se == pytest.approx(np.sqrt(w @ S @ w))
    indep = summarize(t, np.ones(5), np.sqrt(np.diag(S)))
    assert indep.auc.se < s.auc.se


@pytest.mark.parametrize("window", [(-1.0, 2.0), (1.0, 3.0), (1.5, 1.0)])
def test_window_outside_grid_rejected(window):
    t = np.linspace(0, 2, 5)
    with pytest.raises(InvalidArgumentError):
        summarize(t, np.ones(5), np.ones(5), window=window)


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgumentError):
        summarize(np.arange(3.0), np.ones(4), np.ones(3))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_trapezoid_weights_integrate_linear_functions_exactly(n, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 10, n))
    t = np.unique(t)
    w = trapezoid_weights(t)
    a, b = rng.normal(size=2)
    exact = a * (t[-1] - t[0]) + 0.5 * b * (t[-1] ** 2 - t[0] ** 2)
    assert w @ (a + b * t) == pytest.approx(exact, rel=1e-9, abs=1e-9)
    assert np.all(w >= 0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_measures_are_ordered(seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 5, 11)
    x = rng.uniform(0, 3, 11)
    s = summarize(t, x, rng.uniform(0, 0.5, 11))
    assert s.cmin.estimate <= s.cmax.estimate
    for m in (s.cmax, s.cmin, s.auc):
        assert m.lo <= m.estimate <= m.hi
    assert 0.0 <= s.prob_cmin_below(1.0) <= 1.0
