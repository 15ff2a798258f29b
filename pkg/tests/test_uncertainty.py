import math

import numpy as np
import pytest
from scipy import stats

from magime.errors import InvalidArgumentError
from magime.optimizer import outer_optimize
from magime.posterior import neg_log_posterior
from magime.uncertainty import (credible_interval, delta_method_variance, log_scale_interval,
                                threshold_probability, z_value)

from helpers import LINEAR, make_problem, random_point
from oracles import quadratic_form


def gaussian_toy(random_effects):
    """Linear ODE, frozen noise, flat prior on eta; only eta is estimated.

    (u, eta) is then jointly Gaussian, so the delta method is exact.
    """
    prob = make_problem(LINEAR.name, n_subjects=2, n_grid=6, random_idx=[0] if random_effects else [],
                        noise_mode="frozen", seed=3)
    lay = prob.layout
    free = np.zeros(lay.size, dtype=bool)
    free[lay.eta_slice] = True
    lay.free = free
    _, omega0 = random_point(prob, eta=[0.0])
    return prob, omega0


def joint_precision(prob, omega0):
    lay = prob.layout
    k = lay.eta_slice.start

    def joint(v):
        w = omega0.copy()
        w[k] = v[-1]
        return neg_log_posterior(v[:-1], w, prob)

    return quadratic_form(joint, prob.size + 1)


@pytest.mark.parametrize("random_effects", [False, True])
def test_delta_method_matches_exact_gaussian_posterior(random_effects):
    prob, omega0 = gaussian_toy(random_effects)
    fit = outer_optimize(omega0, prob, np.zeros(prob.size))
    rep = delta_method_variance(fit, prob)
    _, _, A = joint_precision(prob, omega0)
    cov = np.linalg.inv(A)
    k = prob.layout.eta_slice.start
    assert rep.omega_cov[k, k] == pytest.approx(cov[-1, -1], rel=1e-4)
    for j in range(prob.n_subjects):
        sl = rep.subject_slice(j)
        exact = cov[sl, sl]
        got = rep.subject_cov(j)
        assert np.linalg.norm(got - exact) / np.linalg.norm(exact) < 1e-4
    np.testing.assert_allclose(rep.u_se, np.sqrt(np.diag(cov)[:-1]), rtol=1e-4)


def test_implicit_function_jacobian_on_gaussian_toy():
    prob, omega0 = gaussian_toy(True)
    fit = outer_optimize(omega0, prob, np.zeros(prob.size))
    rep = delta_method_variance(fit, prob)
    _, _, A = joint_precision(prob, omega0)
    implicit = -np.linalg.solve(A[:-1, :-1], A[:-1, -1])
    k = prob.layout.eta_slice.start
    np.testing.assert_allclose(rep.jacobian[:, k], implicit, rtol=1e-4, atol=1e-8)
    others = np.delete(np.arange(prob.layout.size), k)
    assert np.all(rep.jacobian[:, others] == 0.0)


def test_known_omega_reduces_to_conditional_covariance():
    prob = make_problem("population_growth", n_subjects=2)
    u, omega = random_point(prob)
    fit = outer_optimize(omega, prob, u)
    rep = delta_method_variance(fit, prob, omega_known=True)
    for j in range(prob.n_subjects):
        Hinv = np.linalg.inv(fit.inner.hessian_blocks[j])
        np.testing.assert_allclose(rep.subject_cov(j), Hinv, rtol=1e-8, atol=1e-14)
    assert np.all(rep.omega_se == 0)


def test_functional_variance_is_quadratic_form_of_subject_cov():
    prob = make_problem("population_growth", n_subjects=2)
    u, omega = random_point(prob)
    fit = outer_optimize(omega, prob, u)
    rep = delta_method_variance(fit, prob)
    a = np.linspace(-1, 1, prob.block_sizes[1])
    assert rep.functional_variance(1, a_u=a) == pytest.approx(a @ rep.subject_cov(1) @ a, rel=1e-10)


def test_interval_for_reported_ke_row():
    se = 0.04 / z_value(0.95)
    assert se == pytest.approx(0.0204, abs=1e-4)
    lo, hi = credible_interval(0.30, se)
    assert (round(lo, 2), round(hi, 2)) == (0.26, 0.34)


def test_reported_cmax_row_renders():
    se = (3.23 - 2.25) / 2 / z_value(0.95)
    lo, hi = credible_interval(2.74, se)
    assert f"{2.74:.2f} ({lo:.2f}, {hi:.2f})" == "2.74 (2.25, 3.23)"


def test_zero_se_interval_is_degenerate():
    assert credible_interval(1.5, 0.0) == (1.5, 1.5)


def test_floor_truncates_lower_bound():
    lo, hi = credible_interval(0.09, 0.24, floor_at_zero=True)
    assert lo == 0.0 and hi == pytest.approx(0.09 + 1.959964 * 0.24, rel=1e-6)


def test_log_scale_interval_is_positive_and_multiplicative():
    lo, hi = log_scale_interval(2.0, 0.1)
    assert lo > 0 and lo * hi == pytest.approx(4.0)


def test_threshold_probability_symmetry_and_limits():
    assert threshold_probability(0.1, 0.3, 0.1) == 0.5
    assert threshold_probability(0.05, 1e-12, 0.1) == pytest.approx(1.0)
    assert threshold_probability(0.05, 0.0, 0.1) == 1.0
    assert threshold_probability(0.2, 0.1, 0.1, "above") == pytest.approx(stats.norm.cdf(1.0))


def test_threshold_probability_reported_trough_consistency():
    # a trough estimate of 0.04 with P(below 0.1) = 0.54 implies se ~ 0.60
    se = (0.1 - 0.04) / stats.norm.ppf(0.54)
    assert se == pytest.approx(0.60, abs=0.01)
    assert threshold_probability(0.04, se, 0.1) == pytest.approx(0.54, abs=1e-12)
    lo, hi = credible_interval(0.04, se, floor_at_zero=True)
    assert lo == 0.0 and hi == pytest.approx(0.04 + z_value(0.95) * se)


@pytest.mark.parametrize("call", [lambda: credible_interval(1.0, -1.0), lambda: z_value(1.0),
                                  lambda: log_scale_interval(0.0, 0.1),
                                  lambda: threshold_probability(0.0, 1.0, 0.1, "sideways")])
def test_invalid_arguments(call):
    with pytest.raises(InvalidArgumentError):
        call()


def test_z_value_at_95():
    assert z_value(0.95) == pytest.approx(1.959963985, rel=1e-9)
    assert math.isclose(z_value(0.5), stats.norm.ppf(0.75))
