"""Delta-method covariance of the latent vector, credible intervals, threshold probabilities.

By the law of total variance, the covariance of u is approximated by

    Var(u) ~ J Sigma_omega J^T + H(omega_hat)^{-1},

with ``J = d u_hat / d omega`` obtained column by column from warm-started
inner re-solves at ``omega_hat +/- h e_k``.  Subjects are conditionally
independent, so ``H^{-1}`` is block diagonal and only per-subject blocks are
ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import ConditioningError, InvalidArgumentError
from .optimizer import OptimizerOptions, OuterSolution, inner_optimize


@dataclass
class UncertaintyReport:
    u_se: np.ndarray
    omega_se: np.ndarray
    omega_cov: np.ndarray
    jacobian: np.ndarray  # (|u|, |omega|), zero columns for frozen coordinates
    cond_blocks: list  # per-subject H_j^{-1}
    offsets: np.ndarray
    block_sizes: np.ndarray

    def subject_slice(self, j):
        o = int(self.offsets[j])
        return slice(o, o + int(self.block_sizes[j]))

    def subject_cov(self, j):
        """Full delta-method covariance of subject block ``z_j``."""
        Jj = self.jacobian[self.subject_slice(j)]
        return Jj @ self.omega_cov @ Jj.T + self.cond_blocks[j]

    def functional_variance(self, j, a_u=None, a_omega=None):
        """Variance of ``a_u . z_j + a_omega . omega`` (either part may be omitted)."""
        n_j = int(self.block_sizes[j])
        a_u = np.zeros(n_j) if a_u is None else np.asarray(a_u, float)
        a_omega = np.zeros(self.omega_cov.shape[0]) if a_omega is None else np.asarray(a_omega, float)
        g = a_u @ self.jacobian[self.subject_slice(j)] + a_omega
        return float(g @ self.omega_cov @ g + a_u @ self.cond_blocks[j] @ a_u)


def delta_method_variance(fit: OuterSolution, problem, options: OptimizerOptions | None = None,
                          step: float = 1e-4, omega_known: bool = False) -> UncertaintyReport:
    """Delta-method standard errors for u and omega at the outer optimum.

    ``omega_known`` drops the first variance term (omega treated as fixed).
    """
    opts = options or OptimizerOptions()
    omega = np.asarray(fit.omega_hat, float)
    u_hat = fit.inner.u_hat
    free = problem.layout.free
    J = np.zeros((u_hat.size, omega.size))
    cov = np.zeros_like(fit.omega_cov) if omega_known else fit.omega_cov
    if not omega_known:
        for k in np.flatnonzero(free):
            h = step * max(1.0, abs(omega[k]))
            e = np.zeros(omega.size)
            e[k] = h
            up = inner_optimize(omega + e, u_hat, problem, opts).u_hat
            um = inner_optimize(omega - e, u_hat, problem, opts).u_hat
            J[:, k] = (up - um) / (2.0 * h)
    cond = []
    var = np.empty(u_hat.size)
    for j, L in enumerate(fit.inner.hessian_chols):
        if L is None or not np.all(np.diag(L) > 0):
            raise ConditioningError(f"Hessian block of subject {problem.subjects[j].id} is singular",
                                    subject=problem.subjects[j].id)
        Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        Hinv = Linv.T @ Linv
        cond.append(0.5 * (Hinv + Hinv.T))
        o = problem.offsets[j]
        sl = slice(o, o + L.shape[0])
        Jj = J[sl]
        var[sl] = np.einsum("ik,kl,il->i", Jj, cov, Jj) + np.diag(cond[-1])
    return UncertaintyReport(
        u_se=np.sqrt(np.maximum(var, 0.0)),
        omega_se=np.sqrt(np.maximum(np.diag(cov), 0.0)),
        omega_cov=cov, jacobian=J, cond_blocks=cond,
        offsets=problem.offsets.copy(), block_sizes=problem.block_sizes.copy(),
    )


def z_value(level):
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError(f"level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + 0.5 * level))


def credible_interval(estimate, se, level: float = 0.95, floor_at_zero: bool = False):
    """Normal-approximation interval ``estimate +/- z * se``.

    With ``floor_at_zero`` the lower bound is truncated at zero, for
    quantities that cannot be negative.
    """
    if se < 0:
        raise InvalidArgumentError("se must be non-negative")
    half = z_value(level) * se
    lo, hi = estimate - half, estimate + half
    if floor_at_zero:
        lo = max(lo, 0.0)
    return lo, hi


def log_scale_interval(estimate, se_log, level: float = 0.95):
    """Interval for a positive quantity built on the log scale and mapped back."""
    if estimate <= 0:
        raise InvalidArgumentError("log-scale intervals need a positive estimate")
    half = z_value(level) * se_log
    return estimate * math.exp(-half), estimate * math.exp(half)


def threshold_probability(estimate, se, threshold, direction: str = "below"):
    """P(quantity < threshold) (or ``>`` for direction "above") under N(estimate, se^2)."""
    if direction not in ("below", "above"):
        raise InvalidArgumentError("direction must be 'below' or 'above'")
    if se < 0:
        raise InvalidArgumentError("se must be non-negative")
    if se == 0:
        p = 1.0 if estimate < threshold else (0.5 if estimate == threshold else 0.0)
    else:
        p = float(stats.norm.cdf((threshold - estimate) / se))
    return p if direction == "below" else 1.0 - p
