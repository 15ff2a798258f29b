"""Matérn covariance kernel, its derivatives, and GP conditional matrices.

The kernel is stationary in the lag ``d = |s - t|``::

    k(d) = phi1 * 2**(1 - nu) / Gamma(nu) * z**nu * K_nu(z),   z = sqrt(2 nu) d / phi2

with ``K_nu`` the modified Bessel function of the second kind.  Writing the
kernel through the radial profile ``k`` gives the cross-derivatives

    dK/ds      =  k'(d) sign(s - t)
    dK/dt      = -k'(d) sign(s - t)
    d2K/dsdt   = -k''(d)

which exist at ``d = 0`` only for ``nu > 1`` (first) and ``nu > 2`` (second).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .errors import ConditioningError, InvalidArgumentError, UnsupportedSmoothnessError

JITTER_LADDER_MAX = 1e-6


@dataclass(frozen=True)
class KernelConfig:
    variance_scale: float
    bandwidth: float
    smoothness: float = 2.01

    def __post_init__(self):
        for name in ("variance_scale", "bandwidth", "smoothness"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidArgumentError(f"{name} must be finite and positive, got {v!r}")


def _require_twice_differentiable(cfg):
    if cfg.smoothness <= 2:
        raise UnsupportedSmoothnessError(
            f"smoothness {cfg.smoothness} <= 2: second derivative of the kernel is undefined"
        )


def _profile(d, cfg, order, closed_form=True):
    """Radial profile k(d) and, up to ``order``, its derivatives in d."""
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InvalidArgumentError("lags must be finite")
    if np.any(d < 0):
        raise InvalidArgumentError("lags must be non-negative")
    phi1, phi2, nu = cfg.variance_scale, cfg.bandwidth, cfg.smoothness
    out = [np.empty_like(d) for _ in range(order + 1)]
    zero = d == 0
    pos = ~zero

    if nu == 2.5 and closed_form:
        a = math.sqrt(5.0) / phi2
        ad = a * d
        e = np.exp(-ad)
        out[0][...] = phi1 * (1.0 + ad + ad * ad / 3.0) * e
        if order >= 1:
            out[1][...] = -phi1 * a * a * d * (1.0 + ad) / 3.0 * e
        if order >= 2:
            out[2][...] = -phi1 * a * a / 3.0 * (1.0 + ad - ad * ad) * e
        return out

    r = math.sqrt(2.0 * nu) / phi2
    z = r * d[pos]
    logz = np.log(z)
    base = math.log(phi1) + (1.0 - nu) * math.log(2.0) - special.gammaln(nu)
    # scaled Bessel kve(v, z) = K_v(z) e^z keeps the products finite for large z
    out[0][pos] = np.exp(base + nu * logz - z) * special.kve(nu, z)
    out[0][zero] = phi1
    if order >= 1:
        out[1][pos] = -r * np.exp(base + nu * logz - z) * special.kve(nu - 1.0, z)
        out[1][zero] = 0.0
    if order >= 2:
        ez = np.exp(base - z)
        t1 = np.exp((nu - 1.0) * logz) * special.kve(nu - 1.0, z)
        t2 = np.exp(nu * logz) * special.kve(nu - 2.0, z)
        out[2][pos] = -r * r * ez * (t1 - t2)
        out[2][zero] = -phi1 * nu / ((nu - 1.0) * phi2 * phi2)
    return out


def matern(d, cfg: KernelConfig):
    """Matérn covariance at lag(s) ``d``; equals ``variance_scale`` at zero lag."""
    value = _profile(d, cfg, 0)[0]
    return value if value.ndim else float(value)


def matern_profile_derivatives(d, cfg: KernelConfig, closed_form: bool = True):
    """Return ``(k, k', k'')`` of the radial profile at lags ``d``.

    ``closed_form=False`` forces the Bessel path even for ``nu = 2.5``.
    """
    _require_twice_differentiable(cfg)
    return tuple(_profile(d, cfg, 2, closed_form))


def kernel_block(s_grid, t_grid, cfg: KernelConfig):
    """Kernel matrix and its cross-derivatives between two time grids.

    Returns ``(K, dK_ds, dK_dt, d2K_dsdt)``, each of shape
    ``(len(s_grid), len(t_grid))``.  ``dK_ds`` is the derivative in the first
    argument, ``dK_dt`` in the second.
    """
    _require_twice_differentiable(cfg)
    s = np.asarray(s_grid, dtype=float).reshape(-1)
    t = np.asarray(t_grid, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise InvalidArgumentError("grids must be finite")
    diff = s[:, None] - t[None, :]
    k0, k1, k2 = _profile(np.abs(diff), cfg, 2)
    sgn = np.sign(diff)
    dK_ds = k1 * sgn
    return k0, dK_ds, -dK_ds, -k2


@dataclass
class GpMatrices:
    """Prior and conditional-derivative matrices of one GP on one grid.

    ``C`` and ``zeta`` are stored with the jitter actually used for their
    factorizations, so ``C_chol @ C_chol.T == C``.
    """

    C: np.ndarray
    C_chol: np.ndarray
    m: np.ndarray
    zeta: np.ndarray
    zeta_chol: np.ndarray
    mean: np.ndarray
    mean_deriv: np.ndarray
    C_inv: np.ndarray = field(repr=False)
    zeta_inv: np.ndarray = field(repr=False)
    logdet_C: float = 0.0
    logdet_zeta: float = 0.0
    jitter_C: float = 0.0
    jitter_zeta: float = 0.0

    @property
    def n(self):
        return self.C.shape[0]


def _chol_with_ladder(A, scale, jitter, label):
    j = jitter
    eye = np.eye(A.shape[0])
    while True:
        M = A + (j * scale) * eye
        try:
            L = linalg.cholesky(M, lower=True, check_finite=True)
            if np.all(np.diag(L) > 0):
                return M, L, j
        except linalg.LinAlgError:
            pass
        if j >= JITTER_LADDER_MAX:
            raise ConditioningError(
                f"{label} is not positive definite after jitter {j:g}"
            )
        j = min(j * 10.0, JITTER_LADDER_MAX) if j > 0 else 1e-10


def build_gp_matrices(grid, cfg: KernelConfig, jitter: float = 1e-10, mean_const: float = 0.0,
                      subject=None, component=None) -> GpMatrices:
    """Assemble ``C``, ``m = 'K C^-1`` and ``zeta = K'' - 'K C^-1 K'`` on ``grid``.

    Jitter is relative to the diagonal scale of each matrix and escalates by
    factors of ten up to 1e-6 before a :class:`ConditioningError` is raised.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size < 2:
        raise InvalidArgumentError("a GP grid needs at least two points")
    if np.any(np.diff(grid) <= 0):
        raise InvalidArgumentError("grid must be strictly increasing")
    if jitter < 0:
        raise InvalidArgumentError("jitter must be non-negative")
    K, dK_ds, dK_dt, d2K = kernel_block(grid, grid, cfg)
    where = f" (subject {subject}, component {component})" if subject is not None else ""
    try:
        C, C_chol, jC = _chol_with_ladder(0.5 * (K + K.T), cfg.variance_scale, jitter, "C" + where)
    except ConditioningError as exc:
        raise ConditioningError(str(exc), subject, component) from None
    m = linalg.cho_solve((C_chol, True), dK_dt).T
    zeta = d2K - m @ dK_dt
    zeta = 0.5 * (zeta + zeta.T)
    try:
        zeta, zeta_chol, jz = _chol_with_ladder(zeta, d2K[0, 0], jitter, "zeta" + where)
    except ConditioningError as exc:
        raise ConditioningError(str(exc), subject, component) from None
    n = grid.size
    eye = np.eye(n)
    C_inv = linalg.cho_solve((C_chol, True), eye)
    zeta_inv = linalg.cho_solve((zeta_chol, True), eye)
    return GpMatrices(
        C=C, C_chol=C_chol, m=m, zeta=zeta, zeta_chol=zeta_chol,
        mean=np.full(n, float(mean_const)), mean_deriv=np.zeros(n),
        C_inv=0.5 * (C_inv + C_inv.T), zeta_inv=0.5 * (zeta_inv + zeta_inv.T),
        logdet_C=2.0 * float(np.sum(np.log(np.diag(C_chol)))),
        logdet_zeta=2.0 * float(np.sum(np.log(np.diag(zeta_chol)))),
        jitter_C=jC, jitter_zeta=jz,
    )
