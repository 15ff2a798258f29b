"""Pharmacokinetic summaries (Cmax, Cmin, AUC) of inferred concentration curves."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .uncertainty import credible_interval, threshold_probability

WINDOW_TOL = 1e-9


@dataclass
class Measure:
    estimate: float
    se: float
    lo: float
    hi: float

    def to_dict(self):
        return {"estimate": self.estimate, "se": self.se, "lo": self.lo, "hi": self.hi}


@dataclass
class PkSummary:
    cmax: Measure
    cmin: Measure
    auc: Measure
    tmax: float
    tmin: float
    window: tuple

    def to_dict(self):
        return {"cmax": self.cmax.to_dict(), "cmin": self.cmin.to_dict(), "auc": self.auc.to_dict(),
                "tmax": self.tmax, "tmin": self.tmin, "window": list(self.window)}

    def prob_cmin_below(self, threshold):
        return threshold_probability(self.cmin.estimate, self.cmin.se, threshold, "below")


def trapezoid_weights(t):
    """Weights w with ``w . y`` equal to the trapezoid integral of y over t."""
    t = np.asarray(t, dtype=float)
    w = np.zeros(t.size)
    if t.size > 1:
        dt = np.diff(t)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def summarize(times, traj, pointwise_se, cov_provider=None, window=None, level: float = 0.95) -> PkSummary:
    """Grid-extremum Cmax/Cmin and trapezoid AUC over ``window``.

    Parameters
    ----------
    times, traj, pointwise_se : 1-d arrays on the subject's grid
    cov_provider : callable, optional
        ``cov_provider(idx)`` returns the covariance sub-block of the trajectory
        at grid indices ``idx``; used for the AUC standard error.  Without it
        the grid values are treated as uncorrelated.
    window : (t_start, t_end), optional
        Defaults to the whole grid.  Must lie inside the grid.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(traj, dtype=float)
    se = np.asarray(pointwise_se, dtype=float)
    if not (t.shape == x.shape == se.shape):
        raise InvalidArgumentError("times, traj and pointwise_se must have the same shape")
    if window is None:
        window = (float(t[0]), float(t[-1]))
    t0, t1 = float(window[0]), float(window[1])
    if t0 > t1 or t0 < t[0] - WINDOW_TOL or t1 > t[-1] + WINDOW_TOL:
        raise InvalidArgumentError(f"window ({t0}, {t1}) lies outside the grid [{t[0]}, {t[-1]}]")
    idx = np.flatnonzero((t >= t0 - WINDOW_TOL) & (t <= t1 + WINDOW_TOL))
    if idx.size == 0:
        raise InvalidArgumentError("window contains no grid points")
    xs = x[idx]
    imax = idx[int(np.argmax(xs))]
    imin = idx[int(np.argmin(xs))]
    cmax = Measure(float(x[imax]), float(se[imax]), *credible_interval(float(x[imax]), float(se[imax]), level))
    cmin = Measure(float(x[imin]), float(se[imin]),
                   *credible_interval(float(x[imin]), float(se[imin]), level, floor_at_zero=True))
    w = trapezoid_weights(t[idx])
    auc = float(w @ xs)
    if cov_provider is not None:
        Sig = np.asarray(cov_provider(idx), dtype=float)
        auc_var = float(w @ Sig @ w)
    else:
        auc_var = float(np.sum((w * se[idx]) ** 2))
    auc_se = math.sqrt(max(auc_var, 0.0))
    return PkSummary(cmax=cmax, cmin=cmin,
                     auc=Measure(auc, auc_se, *credible_interval(auc, auc_se, level)),
                     tmax=float(t[imax]), tmin=float(t[imin]), window=(t0, t1))


def bateman_concentration(t, ke, ka, cl, dose, c0=0.0):
    """Closed-form solution of ``C' = -Ke C + D Ke Ka / Cl exp(-Ka t)``."""
    t = np.asarray(t, dtype=float)
    a = dose * ke * ka / cl
    if abs(ka - ke) < 1e-12:
        return (c0 + a * t) * np.exp(-ke * t)
    return c0 * np.exp(-ke * t) + a / (ka - ke) * (np.exp(-ke * t) - np.exp(-ka * t))


def bateman_auc(t_end, ke, ka, cl, dose, c0=0.0):
    """Integral of :func:`bateman_concentration` over ``[0, t_end]``."""
    a = dose * ke * ka / cl
    first = c0 * (1.0 - math.exp(-ke * t_end)) / ke
    if abs(ka - ke) < 1e-12:
        # integral of a t e^{-ke t}
        second = a * (1.0 - math.exp(-ke * t_end) * (1.0 + ke * t_end)) / (ke * ke)
    else:
        second = a / (ka - ke) * ((1.0 - math.exp(-ke * t_end)) / ke - (1.0 - math.exp(-ka * t_end)) / ka)
    return first + second
