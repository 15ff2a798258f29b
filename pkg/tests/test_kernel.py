import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magime.errors import InvalidArgumentError, UnsupportedSmoothnessError
from magime.kernel import (KernelConfig, build_gp_matrices, kernel_block, matern,
                           matern_profile_derivatives)

from oracles import conditional_derivative, matern_lag_derivative, matern_mp


@pytest.mark.parametrize("nu", [2.01, 2.5, 3.3, 5.0])
@pytest.mark.parametrize("d", [1e-3, 0.1, 0.7, 2.0, 9.0])
def test_matern_matches_multiprecision(nu, d):
    cfg = KernelConfig(1.7, 0.8, nu)
    expected = float(matern_mp(d, 1.7, 0.8, nu))
    assert matern(d, cfg) == pytest.approx(expected, rel=1e-10, abs=1e-300)


def test_matern_zero_lag_is_variance_scale():
    cfg = KernelConfig(2.3, 0.5, 2.01)
    assert matern(0.0, cfg) == 2.3
    assert matern(np.zeros(3), cfg).tolist() == [2.3] * 3


def test_matern_large_lag_underflows_to_zero_without_nan():
    cfg = KernelConfig(1.0, 0.01, 2.01)
    v = matern(np.array([50.0, 1e4]), cfg)
    assert np.all(np.isfinite(v)) and np.all(v >= 0) and np.all(v < 1e-300)


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("nu", [2.01, 2.5, 4.0])
def test_profile_derivatives_match_multiprecision(order, nu):
    cfg = KernelConfig(1.3, 1.1, nu)
    d = np.array([0.05, 0.4, 1.5])
    got = matern_profile_derivatives(d, cfg)[order]
    want = [matern_lag_derivative(v, 1.3, 1.1, nu, order) for v in d]
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_closed_form_five_halves_agrees_with_bessel_path():
    cfg = KernelConfig(0.9, 1.7, 2.5)
    d = np.linspace(0.0, 6.0, 25)
    a = matern_profile_derivatives(d, cfg, closed_form=True)
    b = matern_profile_derivatives(d, cfg, closed_form=False)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)


def test_second_derivative_at_zero_lag_is_the_limit():
    cfg = KernelConfig(1.0, 0.7, 3.0)
    k2_zero = matern_profile_derivatives(np.array([0.0]), cfg)[2][0]
    k2_near = matern_profile_derivatives(np.array([1e-7]), cfg)[2][0]
    assert k2_zero == pytest.approx(-3.0 / (2.0 * 0.49))
    assert k2_near == pytest.approx(k2_zero, rel=1e-6)


@pytest.mark.parametrize("nu", [2.0, 1.5, 0.5])
def test_second_derivative_needs_smoothness_above_two(nu):
    cfg = KernelConfig(1.0, 1.0, nu)
    with pytest.raises(UnsupportedSmoothnessError):
        kernel_block([0.0, 1.0], [0.0, 1.0], cfg)


@pytest.mark.parametrize("bad", [dict(variance_scale=0.0), dict(bandwidth=-1.0), dict(smoothness=np.nan)])
def test_kernel_config_rejects_nonpositive(bad):
    kw = dict(variance_scale=1.0, bandwidth=1.0, smoothness=2.5) | bad
    with pytest.raises(InvalidArgumentError):
        KernelConfig(**kw)


@settings(max_examples=200, deadline=None)
@given(phi1=st.floats(0.1, 10.0), phi2=st.floats(0.1, 10.0), nu=st.floats(2.01, 6.0),
       s=st.floats(-3.0, 3.0), rel_lag=st.floats(0.05, 3.0), sign=st.sampled_from([-1.0, 1.0]))
def test_kernel_derivatives_match_central_differences(phi1, phi2, nu, s, rel_lag, sign):
    cfg = KernelConfig(phi1, phi2, nu)
    t = s + sign * rel_lag * phi2
    h = 1e-5 * phi2
    K, dK_ds, dK_dt, d2K = (M[0, 0] for M in kernel_block([s], [t], cfg))

    def k(a, b):
        return kernel_block([a], [b], cfg)[0][0, 0]

    def ds(a, b):
        return kernel_block([a], [b], cfg)[1][0, 0]

    fd_s = (k(s + h, t) - k(s - h, t)) / (2 * h)
    fd_t = (k(s, t + h) - k(s, t - h)) / (2 * h)
    fd_st = (ds(s, t + h) - ds(s, t - h)) / (2 * h)
    floor = 1e-9 * phi1
    assert abs(fd_s - dK_ds) <= 1e-5 * (abs(dK_ds) + floor / phi2)
    assert abs(fd_t - dK_dt) <= 1e-5 * (abs(dK_dt) + floor / phi2)
    assert abs(fd_st - d2K) <= 1e-5 * (abs(d2K) + floor / phi2 ** 2)


GRIDS = [
    (np.linspace(0.0, 1.0, 5), 1.0, 0.6, 2.01),
    (np.array([0.0, 0.3, 0.5, 1.1, 1.2, 2.0, 2.6, 3.0]), 2.0, 1.0, 2.5),
    (np.linspace(0.0, 20.0, 12), 0.5, 4.0, 2.01),
    (np.array([0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0]), 3.0, 2.5, 3.2),
]


@pytest.mark.parametrize("grid,phi1,phi2,nu", GRIDS)
def test_gp_conditional_matches_brute_force_conditioning(grid, phi1, phi2, nu):
    gm = build_gp_matrices(grid, KernelConfig(phi1, phi2, nu), jitter=0.0)
    assert gm.jitter_C == 0.0 and gm.jitter_zeta == 0.0
    m_ref, zeta_ref = conditional_derivative(grid, phi1, phi2, nu)
    assert np.linalg.norm(gm.m - m_ref) / np.linalg.norm(m_ref) < 1e-8
    assert np.linalg.norm(gm.zeta - zeta_ref) / np.linalg.norm(zeta_ref) < 1e-8


def test_gp_matrices_inverse_and_logdet_consistent():
    gm = build_gp_matrices(np.linspace(0, 2, 9), KernelConfig(1.0, 0.8, 2.01))
    n = gm.n
    np.testing.assert_allclose(gm.C_inv @ gm.C, np.eye(n), atol=1e-8)
    np.testing.assert_allclose(gm.zeta_inv @ gm.zeta, np.eye(n), atol=1e-8)
    assert gm.logdet_C == pytest.approx(np.linalg.slogdet(gm.C)[1], rel=1e-10)
    assert gm.logdet_zeta == pytest.approx(np.linalg.slogdet(gm.zeta)[1], rel=1e-10)


def test_jitter_ladder_escalates_on_near_singular_grid():
    grid = np.linspace(0.0, 1.0, 40)
    gm = build_gp_matrices(grid, KernelConfig(1.0, 50.0, 5.0), jitter=0.0)
    assert 0.0 < gm.jitter_C <= 1e-6
    np.testing.assert_allclose(gm.C_chol @ gm.C_chol.T, gm.C, atol=1e-12)


@pytest.mark.parametrize("grid", [[0.0], [0.0, 0.0, 1.0], [1.0, 0.5]])
def test_gp_matrices_reject_bad_grids(grid):
    with pytest.raises(InvalidArgumentError):
        build_gp_matrices(grid, KernelConfig(1.0, 1.0, 2.5))


def test_kernel_block_is_symmetric_in_arguments():
    cfg = KernelConfig(1.2, 0.9, 2.01)
    s, t = np.array([0.0, 0.4, 1.3]), np.array([0.1, 0.2, 2.0, 3.0])
    K, ds, dt, d2 = kernel_block(s, t, cfg)
    Kt, dst, dtt, d2t = kernel_block(t, s, cfg)
    np.testing.assert_allclose(K, Kt.T)
    np.testing.assert_allclose(ds, dtt.T)
    np.testing.assert_allclose(d2, d2t.T)
    assert math.isclose(K[0, 0], float(matern(0.1, cfg)))
