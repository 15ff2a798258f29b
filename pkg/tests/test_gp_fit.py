import math

import numpy as np
import pytest

from magime.errors import InsufficientDataError
from magime.gp_fit import HyperFit, _MarginalLikelihood, fit_hyperparameters, gp_posterior, gp_sample
from magime.kernel import KernelConfig
from magime.protocols import builtin_protocol
from magime.simulate import generate_dataset


def test_recovers_gp_hyperparameters_in_most_seeds():
    truth = np.log([4.0, 2.0, 0.1])
    t = np.linspace(0.0, 40.0, 200)
    hits = 0
    seeds = range(10)
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        y = gp_sample(t, KernelConfig(4.0, 2.0, 2.01), 0.1, rng)
        fit = fit_hyperparameters(t, y, 2.01)
        est = np.log([fit.variance_scale, fit.bandwidth, fit.noise_sd])
        hits += bool(np.all(np.abs(est - truth) <= 0.5))
    assert hits >= 0.9 * len(seeds)


def test_constant_series_with_known_noise_is_finite_and_capped():
    t = np.linspace(0.0, 5.0, 11)
    fit = fit_hyperparameters(t, np.full(11, 2.0), known_noise=0.05)
    assert math.isfinite(fit.log_marginal)
    assert fit.noise_sd == 0.05 and fit.noise_fixed
    assert fit.bandwidth <= 5.0 * (1 + 1e-9)
    assert fit.bandwidth == pytest.approx(5.0, rel=1e-6)


def test_population_growth_subject_bandwidth_on_decay_scale():
    proto, _ = builtin_protocol("population_growth")
    ds, _ = generate_dataset(proto, seed=7)
    s = ds.subjects[0]
    fit = fit_hyperparameters(s.times("x"), s.values("x"), known_noise=0.03)
    assert 0.1 <= fit.bandwidth <= 3.0


def test_marginal_likelihood_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 4, 15))
    y = np.sin(t) + 0.1 * rng.standard_normal(15)
    obj = _MarginalLikelihood(t, y, 2.01, None)
    p = np.log([0.8, 0.9, 0.2])
    _, g = obj(p)
    h = 1e-6
    fd = [(obj(p + h * e)[0] - obj(p - h * e)[0]) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_too_few_points_raise():
    with pytest.raises(InsufficientDataError):
        fit_hyperparameters([0.0, 1.0], [1.0, 2.0])


def test_duplicate_times_are_averaged():
    t = [0.0, 0.5, 0.5, 1.0, 1.5, 2.0]
    y = [0.0, 0.4, 0.6, 1.0, 1.4, 2.1]
    fit = fit_hyperparameters(t, y)
    mean, _ = gp_posterior(fit, t, y, [0.5])
    assert abs(mean[0] - 0.5) < 0.2


def test_posterior_interpolates_low_noise_data():
    t = np.linspace(0, 3, 16)
    y = np.exp(-t)
    fit = HyperFit(1.0, 1.0, 1e-4, True, 0.0)
    mean, sd = gp_posterior(fit, t, y, t)
    np.testing.assert_allclose(mean, y, atol=1e-3)
    assert np.all(sd < 1e-3)


def test_hyperfit_roundtrip():
    fit = HyperFit(1.5, 0.3, 0.02, True, -4.0, 2.01, False)
    assert HyperFit.from_dict(fit.to_dict()) == fit
