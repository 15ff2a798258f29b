"""Stage-one GP hyperparameter fits to raw observations.

Each subject-component series gets its own zero-mean Matérn GP whose variance
scale, bandwidth and (unless known) noise SD maximize the Gaussian marginal
likelihood ``N(y; 0, K + sigma^2 I)``.  The fitted values are frozen for all
later stages.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .errors import InsufficientDataError, NonConvergenceError
from .kernel import KernelConfig, _profile, matern

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class HyperFit:
    variance_scale: float
    bandwidth: float
    noise_sd: float
    converged: bool
    log_marginal: float
    smoothness: float = 2.01
    noise_fixed: bool = False

    def kernel(self):
        return KernelConfig(self.variance_scale, self.bandwidth, self.smoothness)

    def to_dict(self):
        return {
            "variance_scale": self.variance_scale,
            "bandwidth": self.bandwidth,
            "noise_sd": self.noise_sd,
            "smoothness": self.smoothness,
            "converged": self.converged,
            "log_marginal": self.log_marginal,
            "noise_fixed": self.noise_fixed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _dedupe(times, values):
    t = np.asarray(times, dtype=float).reshape(-1)
    y = np.asarray(values, dtype=float).reshape(-1)
    ut, inv = np.unique(t, return_inverse=True)
    if ut.size == t.size:
        order = np.argsort(t)
        return t[order], y[order]
    sums = np.bincount(inv, weights=y)
    counts = np.bincount(inv)
    return ut, sums / counts


class _MarginalLikelihood:
    """Negative log marginal likelihood in log-parameters, with gradient."""

    def __init__(self, t, y, nu, known_noise):
        self.t, self.y, self.nu = t, y, nu
        self.known_noise = known_noise
        self.lag = np.abs(t[:, None] - t[None, :])

    def unpack(self, p):
        phi1, phi2 = math.exp(p[0]), math.exp(p[1])
        sigma = self.known_noise if self.known_noise is not None else math.exp(p[2])
        return phi1, phi2, sigma

    def __call__(self, p):
        phi1, phi2, sigma = self.unpack(p)
        cfg = KernelConfig(phi1, phi2, self.nu)
        k, k1 = _profile(self.lag, cfg, 1)
        n = self.t.size
        A = k + (sigma * sigma) * np.eye(n)
        try:
            L = linalg.cholesky(A, lower=True)
        except linalg.LinAlgError:
            return np.inf, np.zeros_like(p)
        alpha = linalg.cho_solve((L, True), self.y)
        nll = 0.5 * self.y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG_2PI
        W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
        grads = [k, -self.lag * k1]
        if self.known_noise is None:
            grads.append(2.0 * sigma * sigma * np.eye(n))
        g = np.array([-0.5 * np.sum(W * dA) for dA in grads])
        return float(nll), g


def fit_hyperparameters(times, values, smoothness: float = 2.01, known_noise=None,
                        bandwidth_bounds=None) -> HyperFit:
    """Maximize the GP marginal likelihood of one observed series.

    Multi-start over bandwidths ``{1/4, 1/2, 1, 2} * 5 * range / n`` and two
    variance levels (sample variance and mean square).  The bandwidth is capped
    at the observed time range.
    """
    t, y = _dedupe(times, values)
    if t.size < 3:
        raise InsufficientDataError(f"need at least 3 observations to fit a GP, got {t.size}")
    span = float(t[-1] - t[0])
    min_gap = float(np.min(np.diff(t)))
    if bandwidth_bounds is None:
        bandwidth_bounds = (0.25 * min_gap, span)
    ms = float(np.mean(y * y))
    var = float(np.var(y))
    scale = max(ms, var, 1e-12)
    sd = math.sqrt(scale)

    objective = _MarginalLikelihood(t, y, smoothness, known_noise)
    bounds = [(math.log(scale * 1e-8), math.log(scale * 1e3)),
              (math.log(bandwidth_bounds[0]), math.log(bandwidth_bounds[1]))]
    if known_noise is None:
        bounds.append((math.log(sd * 1e-6), math.log(sd)))

    base_bw = 5.0 * span / t.size
    bw_starts = [f * base_bw for f in (0.25, 0.5, 1.0, 2.0)]
    var_starts = [max(var, scale * 1e-6), scale]
    starts = []
    for v0, b0 in itertools.product(var_starts, bw_starts):
        p = [math.log(v0), math.log(b0)]
        if known_noise is None:
            p.append(math.log(0.1 * max(math.sqrt(var), 1e-3 * sd)))
        starts.append(np.clip(p, [b[0] for b in bounds], [b[1] for b in bounds]))

    best = None
    for p0 in starts:
        f0, _ = objective(p0)
        try:
            res = optimize.minimize(objective, p0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-9})
        except (ValueError, linalg.LinAlgError):
            continue
        if not np.isfinite(res.fun):
            continue
        if res.fun > f0:  # never return something worse than a start
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        finite = [(objective(p)[0], p) for p in starts]
        finite = [fp for fp in finite if np.isfinite(fp[0])]
        incumbent = None
        if finite:
            f, p = min(finite, key=lambda fp: fp[0])
            phi1, phi2, sigma = objective.unpack(p)
            incumbent = HyperFit(phi1, phi2, sigma, False, -f, smoothness, known_noise is not None)
        raise NonConvergenceError("all GP hyperparameter starts diverged", incumbent)

    phi1, phi2, sigma = objective.unpack(best.x)
    _, g = objective(best.x)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    # projected gradient: components pushing against an active bound do not count
    pg = np.where((best.x <= lo + 1e-10) & (g > 0) | (best.x >= hi - 1e-10) & (g < 0), 0.0, g)
    converged = bool(np.max(np.abs(pg)) / max(1.0, abs(best.fun)) < 1e-5)
    return HyperFit(phi1, phi2, sigma, converged, -float(best.fun), smoothness, known_noise is not None)


def gp_posterior(fit: HyperFit, times, values, new_times):
    """Posterior mean and SD of the noise-free process at ``new_times``."""
    t, y = _dedupe(times, values)
    cfg = fit.kernel()
    K = matern(np.abs(t[:, None] - t[None, :]), cfg) + fit.noise_sd ** 2 * np.eye(t.size)
    Ks = matern(np.abs(np.asarray(new_times, float)[:, None] - t[None, :]), cfg)
    L = linalg.cholesky(K, lower=True)
    mean = Ks @ linalg.cho_solve((L, True), y)
    v = linalg.solve_triangular(L, Ks.T, lower=True)
    var = np.maximum(cfg.variance_scale - np.sum(v * v, axis=0), 0.0)
    return mean, np.sqrt(var)


def gp_sample(times, cfg: KernelConfig, noise_sd: float, rng: np.random.Generator):
    """Draw one noisy realization of the zero-mean GP at ``times``."""
    t = np.asarray(times, dtype=float)
    K = matern(np.abs(t[:, None] - t[None, :]), cfg)
    L = linalg.cholesky(K + 1e-10 * cfg.variance_scale * np.eye(t.size), lower=True)
    return L @ rng.standard_normal(t.size) + noise_sd * rng.standard_normal(t.size)
