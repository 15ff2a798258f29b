"""Negative log joint posterior ``Q(u, omega)`` with its gradient and Hessian in u.

The latent vector ``u`` is the concatenation over subjects of blocks
``z_j = (b_j, x_j)``, where ``b_j`` holds the random effects (one entry per
parameter that carries a random effect) and ``x_j`` the trajectory on the
subject's grid, stored component-major (all grid values of component 0, then
component 1, ...).

``Q`` is the sum of six terms:

1. prior on the fixed effects eta;
2. prior on Sigma_b;
3. random effects ``b_j ~ N(0, Sigma_b)``;
4. GP prior ``x_ij ~ N(mu, C)``, divided by the tempering factor;
5. Gaussian observation likelihood;
6. manifold term ``f(x, theta_j, t) - mu' - m (x - mu) ~ N(0, zeta)``, divided
   by the tempering factor.

Subjects are conditionally independent given omega, so evaluation is organized
in *buckets* of subjects sharing a grid length; each bucket is processed with
batched linear algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .errors import InvalidArgumentError, PosteriorEvaluationError

LOG_2PI = math.log(2.0 * math.pi)
NOISE_MODES = ("shared", "per_subject", "frozen")


# ---------------------------------------------------------------------------
# omega layout


@dataclass
class Params:
    """omega unpacked into natural quantities."""

    B: np.ndarray
    sigma_b: np.ndarray
    sigma_b_inv: np.ndarray
    logdet_sigma_b: float
    eta: np.ndarray
    eta_raw: np.ndarray
    noise_sd: np.ndarray  # (s, m)


def tril_indices(r, diag_only=False):
    """Row-major lower-triangle positions used to pack B into beta."""
    if diag_only:
        return [(i, i) for i in range(r)]
    return [(i, j) for i in range(r) for j in range(i + 1)]


def beta_to_B(beta, r, diag_only=False):
    B = np.zeros((r, r))
    for v, (i, j) in zip(beta, tril_indices(r, diag_only)):
        B[i, j] = math.exp(v) if i == j else v
    return B


def sigma_to_beta(sigma_b, diag_only=False, floor=1e-6):
    """Inverse of ``beta -> B B^T`` after flooring eigenvalues at ``floor``."""
    S = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    r = S.shape[0]
    if r == 0:
        return np.zeros(0)
    S = 0.5 * (S + S.T)
    if diag_only:
        S = np.diag(np.diag(S))
    w, V = np.linalg.eigh(S)
    S = (V * np.maximum(w, floor)) @ V.T
    L = np.linalg.cholesky(0.5 * (S + S.T))
    return np.array([math.log(L[i, j]) if i == j else L[i, j] for i, j in tril_indices(r, diag_only)])


@dataclass
class OmegaLayout:
    """Coordinates of omega = (beta, eta_raw, log_noise).

    Parameters
    ----------
    n_params : int
        Number of ODE parameters ``l``.
    random_idx : sequence of int
        Parameters that carry random effects (``r`` of them).
    positivity_mask : sequence of bool
        Parameters whose fixed effect lives on the log scale in omega.
    n_components, n_subjects : int
    noise_mode : {"shared", "per_subject", "frozen"}
    diag_only : bool
        Restrict Sigma_b to be diagonal.
    frozen_noise : (s, m) array, optional
        Noise SDs used in ``frozen`` mode.
    """

    n_params: int
    random_idx: tuple
    positivity_mask: tuple
    n_components: int
    n_subjects: int
    noise_mode: str = "shared"
    diag_only: bool = False
    frozen_noise: np.ndarray | None = None
    free: np.ndarray | None = None
    param_names: tuple = ()
    component_names: tuple = ()

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise InvalidArgumentError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        self.random_idx = tuple(int(i) for i in self.random_idx)
        self.positivity_mask = tuple(bool(v) for v in self.positivity_mask)
        if len(self.positivity_mask) != self.n_params:
            raise InvalidArgumentError("positivity_mask length must equal n_params")
        if self.noise_mode == "frozen":
            if self.frozen_noise is None:
                raise InvalidArgumentError("frozen noise mode needs frozen_noise values")
            self.frozen_noise = np.broadcast_to(
                np.asarray(self.frozen_noise, float), (self.n_subjects, self.n_components)).copy()
        if not self.param_names:
            self.param_names = tuple(f"theta{i + 1}" for i in range(self.n_params))
        if not self.component_names:
            self.component_names = tuple(str(i) for i in range(self.n_components))
        if self.free is None:
            self.free = np.ones(self.size, dtype=bool)
        self.free = np.asarray(self.free, dtype=bool)
        if self.free.size != self.size:
            raise InvalidArgumentError("free mask length must equal the omega size")

    @property
    def r(self):
        return len(self.random_idx)

    @property
    def n_beta(self):
        r = self.r
        return r if self.diag_only else r * (r + 1) // 2

    @property
    def n_noise(self):
        if self.noise_mode == "shared":
            return self.n_components
        if self.noise_mode == "per_subject":
            return self.n_subjects * self.n_components
        return 0

    @property
    def size(self):
        return self.n_beta + self.n_params + self.n_noise

    @property
    def beta_slice(self):
        return slice(0, self.n_beta)

    @property
    def eta_slice(self):
        return slice(self.n_beta, self.n_beta + self.n_params)

    @property
    def noise_slice(self):
        return slice(self.n_beta + self.n_params, self.size)

    def selection(self):
        """``l x r`` matrix P with ``theta_j = eta + P b_j``."""
        P = np.zeros((self.n_params, self.r))
        for c, i in enumerate(self.random_idx):
            P[i, c] = 1.0
        return P

    def names(self):
        rn = [self.param_names[i] for i in self.random_idx]
        out = []
        for i, j in tril_indices(self.r, self.diag_only):
            out.append(f"beta[{rn[i]},{rn[j]}]")
        out += [f"{'log_' if pos else ''}eta[{p}]" for p, pos in zip(self.param_names, self.positivity_mask)]
        if self.noise_mode == "shared":
            out += [f"log_sigma[{c}]" for c in self.component_names]
        elif self.noise_mode == "per_subject":
            out += [f"log_sigma[{j},{c}]" for j in range(self.n_subjects) for c in self.component_names]
        return out

    def eta_to_raw(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.array([math.log(v) if pos else v for v, pos in zip(eta, self.positivity_mask)])

    def raw_to_eta(self, raw):
        mask = np.array(self.positivity_mask, dtype=bool)
        with np.errstate(over="ignore"):  # overflow surfaces as a non-finite objective
            return np.where(mask, np.exp(np.where(mask, raw, 0.0)), raw)

    def pack(self, eta, sigma_b, noise_sd=None):
        omega = np.zeros(self.size)
        omega[self.beta_slice] = sigma_to_beta(sigma_b, self.diag_only) if self.r else []
        omega[self.eta_slice] = self.eta_to_raw(eta)
        if self.n_noise:
            sd = np.broadcast_to(np.asarray(noise_sd, float), (self.n_subjects, self.n_components))
            omega[self.noise_slice] = np.log(sd[0] if self.noise_mode == "shared" else sd.reshape(-1))
        return omega

    def unpack(self, omega) -> Params:
        omega = np.asarray(omega, dtype=float)
        if omega.size != self.size:
            raise InvalidArgumentError(f"omega has {omega.size} entries, layout expects {self.size}")
        r = self.r
        B = beta_to_B(omega[self.beta_slice], r, self.diag_only)
        S = B @ B.T
        if r:
            diag = np.diag(B)
            Binv = linalg.solve_triangular(B, np.eye(r), lower=True)
            S_inv = Binv.T @ Binv
            logdet = 2.0 * float(np.sum(np.log(diag)))
        else:
            S_inv = np.zeros((0, 0))
            logdet = 0.0
        raw = omega[self.eta_slice].copy()
        if self.noise_mode == "shared":
            sd = np.tile(np.exp(omega[self.noise_slice]), (self.n_subjects, 1))
        elif self.noise_mode == "per_subject":
            sd = np.exp(omega[self.noise_slice]).reshape(self.n_subjects, self.n_components)
        else:
            sd = self.frozen_noise
        return Params(B=B, sigma_b=S, sigma_b_inv=S_inv, logdet_sigma_b=logdet,
                      eta=self.raw_to_eta(raw), eta_raw=raw, noise_sd=sd)


# ---------------------------------------------------------------------------
# priors


@dataclass
class PriorSpec:
    """Priors on omega.

    ``eta_mean``/``eta_sd`` describe independent normals on ``eta_raw`` (the log
    scale for positive parameters); ``None`` means flat.  ``sigma_b_df`` and
    ``sigma_b_scale`` describe an inverse-Wishart prior on Sigma_b; ``None``
    means flat in beta.  ``noise_ig_shape``/``noise_ig_scale`` put an
    inverse-gamma prior on every estimated noise variance; ``None`` means flat
    on the log scale.
    """

    eta_mean: np.ndarray | None = None
    eta_sd: np.ndarray | None = None
    sigma_b_df: float | None = None
    sigma_b_scale: np.ndarray | None = None
    noise_ig_shape: float | None = None
    noise_ig_scale: float | None = None

    def validate(self, layout: OmegaLayout):
        if (self.eta_mean is None) != (self.eta_sd is None):
            raise InvalidArgumentError("eta_mean and eta_sd must be given together")
        if self.eta_mean is not None:
            try:
                self.eta_mean = np.broadcast_to(np.asarray(self.eta_mean, float), (layout.n_params,)).copy()
                self.eta_sd = np.broadcast_to(np.asarray(self.eta_sd, float), (layout.n_params,)).copy()
            except ValueError:
                raise InvalidArgumentError(f"eta prior needs {layout.n_params} means and SDs") from None
            if np.any(self.eta_sd <= 0):
                raise InvalidArgumentError("eta prior SDs must be positive")
        if self.sigma_b_df is not None:
            r = layout.r
            if self.sigma_b_df <= r - 1:
                raise InvalidArgumentError(f"inverse-Wishart df must exceed {r - 1}, got {self.sigma_b_df}")
            self.sigma_b_scale = np.atleast_2d(np.asarray(self.sigma_b_scale, float))
            if self.sigma_b_scale.shape != (r, r):
                raise InvalidArgumentError(f"inverse-Wishart scale must be {r}x{r}")
        if (self.noise_ig_shape is None) != (self.noise_ig_scale is None):
            raise InvalidArgumentError("noise_ig_shape and noise_ig_scale must be given together")
        if self.noise_ig_shape is not None and (self.noise_ig_shape <= 0 or self.noise_ig_scale <= 0):
            raise InvalidArgumentError("inverse-gamma shape and scale must be positive")
        return self

    def to_dict(self):
        def lst(a):
            return None if a is None else np.asarray(a).tolist()
        return {"eta_mean": lst(self.eta_mean), "eta_sd": lst(self.eta_sd),
                "sigma_b_df": self.sigma_b_df, "sigma_b_scale": lst(self.sigma_b_scale),
                "noise_ig_shape": self.noise_ig_shape, "noise_ig_scale": self.noise_ig_scale}


def prior_terms(params: Params, priors: PriorSpec, noise_sd=None):
    """Terms 1 and 2 of Q (negative log prior densities, normalized).

    The optional inverse-gamma noise prior is added to term 1; ``noise_sd``
    lists the estimated noise SDs it applies to.
    """
    t1 = 0.0
    if priors.eta_mean is not None:
        z = (params.eta_raw - priors.eta_mean) / priors.eta_sd
        t1 = float(0.5 * np.sum(LOG_2PI + 2.0 * np.log(priors.eta_sd) + z * z))
    if priors.noise_ig_shape is not None and noise_sd is not None and len(noise_sd):
        a, b = float(priors.noise_ig_shape), float(priors.noise_ig_scale)
        v = np.asarray(noise_sd, float) ** 2
        t1 += float(np.sum((a + 1.0) * np.log(v) + b / v - a * math.log(b) + special.gammaln(a)))
    t2 = 0.0
    if priors.sigma_b_df is not None and params.B.size:
        nu = float(priors.sigma_b_df)
        psi = priors.sigma_b_scale
        r = psi.shape[0]
        logdet_psi = float(np.linalg.slogdet(psi)[1])
        t2 = (0.5 * (nu + r + 1) * params.logdet_sigma_b
              + 0.5 * float(np.sum(psi * params.sigma_b_inv))
              - 0.5 * nu * logdet_psi + 0.5 * nu * r * math.log(2.0)
              + float(special.multigammaln(0.5 * nu, r)))
    return t1, t2


# ---------------------------------------------------------------------------
# subject data and problem


@dataclass
class SubjectData:
    """Everything about one subject that Q needs, on its grid."""

    id: str
    times: np.ndarray
    gp: list  # GpMatrices per component
    obs_index: list  # per component: grid indices of observations
    obs_values: list  # per component: observed values
    covariates: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.times.size

    def n_obs(self):
        return sum(len(i) for i in self.obs_index)


class _Bucket:
    """Subjects with a common grid length, stacked for batched evaluation."""

    def __init__(self, members, subjects, m, r, offsets, lam):
        self.members = np.asarray(members, dtype=int)
        subs = [subjects[j] for j in members]
        n = subs[0].n
        self.n, self.m, self.r = n, m, r
        self.N = r + m * n
        S = len(subs)
        self.times = np.stack([s.times for s in subs])
        self.covs = [s.covariates for s in subs]
        self.ids = [s.id for s in subs]
        self.C_inv = np.stack([[g.C_inv for g in s.gp] for s in subs])
        self.logdet_C = np.array([[g.logdet_C for g in s.gp] for s in subs])
        self.M = np.stack([[g.m for g in s.gp] for s in subs])
        self.MT = np.ascontiguousarray(np.swapaxes(self.M, -1, -2))
        self.Z_inv = np.stack([[g.zeta_inv for g in s.gp] for s in subs])
        self.logdet_Z = np.array([[g.logdet_zeta for g in s.gp] for s in subs])
        self.mu = np.stack([[g.mean for g in s.gp] for s in subs])
        self.mu_d = np.stack([[g.mean_deriv for g in s.gp] for s in subs])
        self.mask = np.zeros((S, m, n))
        self.y = np.zeros((S, m, n))
        for a, s in enumerate(subs):
            for i in range(m):
                idx = np.asarray(s.obs_index[i], dtype=int)
                self.mask[a, i, idx] = 1.0
                self.y[a, i, idx] = s.obs_values[i]
        self.n_obs = self.mask.sum(axis=2)
        self.lam = np.asarray(lam, dtype=float)[self.members]
        self.gather = offsets[self.members][:, None] + np.arange(self.N)[None, :]

    # -- model evaluations ------------------------------------------------

    def _rhs(self, model, x, theta, sel):
        F = np.empty_like(x)
        for a, j in enumerate(sel):
            F[a] = model.rhs(x[a].T, theta[a], self.times[j], self.covs[j]).T
        return F

    def _jacobians(self, model, x, theta, sel):
        S, m, n = x.shape
        l = theta.shape[1]
        Jx = np.empty((S, n, m, m))
        Jt = np.empty((S, n, m, l))
        for a, j in enumerate(sel):
            xa = x[a].T
            Jx[a] = model.jac_state(xa, theta[a], self.times[j], self.covs[j])
            Jt[a] = model.jac_theta(xa, theta[a], self.times[j], self.covs[j])
        return Jx, Jt

    # -- Q pieces ------------------------------------------------------------

    def evaluate(self, model, z, params, P, sel=None, order=0, exact=False):
        """Per-subject Q contributions (terms 3-6), optionally gradient and Hessian.

        ``sel`` restricts to a subset of bucket rows; ``z`` has one row per
        selected subject.  ``order`` is 0 (value), 1 (+gradient) or 2
        (+Gauss-Newton Hessian, plus second-order model terms if ``exact``).
        """
        if sel is None:
            sel = np.arange(len(self.members))
        S = len(sel)
        n, m, r = self.n, self.m, self.r
        b = z[:, :r]
        x = z[:, r:].reshape(S, m, n)
        theta = params.eta[None, :] + b @ P.T
        lam = self.lam[sel]
        sd = params.noise_sd[self.members[sel]]  # (S, m)
        Cinv, Zinv, M, mask, y = self.C_inv[sel], self.Z_inv[sel], self.M[sel], self.mask[sel], self.y[sel]

        with np.errstate(all="ignore"):  # non-finite terms are reported below
            F = self._rhs(model, x, theta, sel)
            dx = x - self.mu[sel]
            Cdx = np.einsum("simn,sin->sim", Cinv, dx)
            R = F - self.mu_d[sel] - np.einsum("simn,sin->sim", M, dx)
            ZR = np.einsum("simn,sin->sim", Zinv, R)
            e = (x - y) * mask
            var = sd * sd

            Sb_inv = params.sigma_b_inv
            t3 = 0.5 * (r * LOG_2PI + params.logdet_sigma_b + np.einsum("sa,ab,sb->s", b, Sb_inv, b))
            t4 = 0.5 * (n * m * LOG_2PI + self.logdet_C[sel].sum(1) + np.sum(dx * Cdx, axis=(1, 2))) / lam
            t5 = 0.5 * (np.sum(self.n_obs[sel] * np.log(2.0 * math.pi * var), axis=1)
                        + np.sum(np.sum(e * e, axis=2) / var, axis=1))
            t6 = 0.5 * (n * m * LOG_2PI + self.logdet_Z[sel].sum(1) + np.sum(R * ZR, axis=(1, 2))) / lam
        for term, vals in ((3, t3), (4, t4), (5, t5), (6, t6)):
            bad = ~np.isfinite(vals)
            if np.any(bad):
                a = int(np.argmax(bad))
                raise PosteriorEvaluationError(
                    f"term {term} is not finite for subject {self.ids[sel[a]]}", term, self.ids[sel[a]])
        q = t3 + t4 + t5 + t6
        if order == 0:
            return q, None, None

        Jx, Jt = self._jacobians(model, x, theta, sel)
        w = ZR / lam[:, None, None]
        gx = (Cdx / lam[:, None, None] + e / var[:, :, None]
              + np.einsum("snik,sin->skn", Jx, w)
              - np.einsum("sknp,skn->skp", M, w))
        gb = b @ Sb_inv + np.einsum("snil,sin->sl", Jt, w) @ P
        g = np.concatenate([gb, gx.reshape(S, m * n)], axis=1)
        if not np.all(np.isfinite(g)):
            a = int(np.argmax(~np.all(np.isfinite(g), axis=1)))
            raise PosteriorEvaluationError(f"gradient is not finite for subject {self.ids[sel[a]]}",
                                           6, self.ids[sel[a]])
        if order == 1:
            return q, g, None

        N = self.N
        A = np.zeros((S, m, n, N))
        A[:, :, :, :r] = np.einsum("snil,lr->sinr", Jt, P)
        ar = np.arange(n)
        for i in range(m):
            for k in range(m):
                blk = slice(r + k * n, r + (k + 1) * n)
                if i == k:
                    A[:, i, :, blk] = -M[:, i]
                A[:, i, ar, r + k * n + ar] += Jx[:, :, i, k]
        ZA = Zinv @ A
        H = np.einsum("s,sij->sij", 1.0 / lam, np.sum(np.swapaxes(A, -1, -2) @ ZA, axis=1))
        H[:, :r, :r] += Sb_inv
        for k in range(m):
            blk = slice(r + k * n, r + (k + 1) * n)
            H[:, blk, blk] += Cinv[:, k] / lam[:, None, None]
            idx = r + k * n + ar
            H[:, idx, idx] += mask[:, k, :] / var[:, k, None]
        if exact:
            H = H + self._second_order(model, x, theta, w, P, sel)
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
        return q, g, H

    def _second_order(self, model, x, theta, w, P, sel):
        """``sum_i sum_t w_i(t) d2 f_i(t)`` mapped to (b, x) coordinates.

        Second derivatives of f come from central differences of the analytic
        Jacobians, one perturbed coordinate of ``(x(t), theta)`` at a time.
        """
        S, m, n = x.shape
        l = theta.shape[1]
        r = self.r
        N = self.N
        T_xx = np.zeros((S, n, m, m))
        T_xt = np.zeros((S, n, m, l))
        T_tt = np.zeros((S, l, l))
        for c in range(m):
            h = 1e-6 * np.maximum(1.0, np.abs(x[:, c, :]))
            xp = x.copy()
            xm = x.copy()
            xp[:, c, :] += h
            xm[:, c, :] -= h
            Jxp, Jtp = self._jacobians(model, xp, theta, sel)
            Jxm, Jtm = self._jacobians(model, xm, theta, sel)
            dJx = (Jxp - Jxm) / (2.0 * h[:, :, None, None])
            dJt = (Jtp - Jtm) / (2.0 * h[:, :, None, None])
            T_xx[:, :, c, :] = np.einsum("sin,snik->snk", w, dJx)
            T_xt[:, :, c, :] = np.einsum("sin,snil->snl", w, dJt)
        for p in range(l):
            h = 1e-6 * np.maximum(1.0, np.abs(theta[:, p]))
            tp = theta.copy()
            tm = theta.copy()
            tp[:, p] += h
            tm[:, p] -= h
            _, Jtp = self._jacobians(model, x, tp, sel)
            _, Jtm = self._jacobians(model, x, tm, sel)
            dJt = (Jtp - Jtm) / (2.0 * h[:, None, None, None])
            T_tt[:, p, :] = np.einsum("sin,snil->sl", w, dJt)
        T_tt = 0.5 * (T_tt + np.swapaxes(T_tt, -1, -2))
        E = np.zeros((S, N, N))
        E[:, :r, :r] = P.T @ T_tt @ P
        ar = np.arange(n)
        for c in range(m):
            for k in range(m):
                E[:, r + c * n + ar, r + k * n + ar] += T_xx[:, :, c, k]
            xb = T_xt[:, :, c, :] @ P  # (S, n, r)
            E[:, r + c * n: r + (c + 1) * n, :r] += xb
            E[:, :r, r + c * n: r + (c + 1) * n] += np.swapaxes(xb, 1, 2)
        return E


class Problem:
    """A fully specified posterior: model, subjects on grids, omega layout, priors.

    Parameters
    ----------
    model : OdeModel
    subjects : list of SubjectData
    layout : OmegaLayout
    priors : PriorSpec, optional
    temper : float or "auto" or array
        Tempering factor lambda (per subject).  ``"auto"`` uses
        ``m * n_j / (number of observations of subject j)``.
    """

    def __init__(self, model, subjects, layout: OmegaLayout, priors: PriorSpec | None = None,
                 temper=1.0):
        self.model = model
        self.subjects = list(subjects)
        self.layout = layout
        self.priors = (priors or PriorSpec()).validate(layout)
        self.m = model.n_components
        self.r = layout.r
        self.P = layout.selection()
        if layout.n_subjects != len(self.subjects):
            raise InvalidArgumentError("layout.n_subjects does not match the number of subjects")
        for s in self.subjects:
            if len(s.gp) != self.m or len(s.obs_index) != self.m:
                raise InvalidArgumentError(f"subject {s.id}: need one GP and one series per component")
        if isinstance(temper, str):
            if temper != "auto":
                raise InvalidArgumentError(f"temper must be a number or 'auto', got {temper!r}")
            lam = np.array([self.m * s.n / max(s.n_obs(), 1) for s in self.subjects])
        else:
            lam = np.broadcast_to(np.asarray(temper, float), (len(self.subjects),)).copy()
        if np.any(lam < 1.0 - 1e-12):
            raise InvalidArgumentError("tempering factors must be >= 1")
        self.lam = lam
        sizes = np.array([self.r + self.m * s.n for s in self.subjects])
        self.block_sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        self.size = int(sizes.sum())
        by_n = {}
        for j, s in enumerate(self.subjects):
            by_n.setdefault(s.n, []).append(j)
        self.buckets = [_Bucket(members, self.subjects, self.m, self.r, self.offsets, lam)
                        for _, members in sorted(by_n.items())]

    @property
    def n_subjects(self):
        return len(self.subjects)

    def estimated_noise(self, params: Params):
        """Noise SDs that are coordinates of omega (none in frozen mode)."""
        mode = self.layout.noise_mode
        if mode == "shared":
            return params.noise_sd[0]
        if mode == "per_subject":
            return params.noise_sd.reshape(-1)
        return np.zeros(0)

    def block(self, u, j):
        o = self.offsets[j]
        return u[o:o + self.block_sizes[j]]

    def split(self, u, j):
        """Return ``(b_j, x_j)`` with ``x_j`` shaped ``(m, n_j)``."""
        z = self.block(u, j)
        return z[:self.r], z[self.r:].reshape(self.m, -1)

    def assemble(self, b, xs):
        """Build u from per-subject random effects and ``(m, n_j)`` trajectories."""
        parts = []
        for j in range(self.n_subjects):
            parts.append(np.asarray(b[j], float).reshape(self.r))
            parts.append(np.asarray(xs[j], float).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def subject_values(self, u, params, order=0, exact=False):
        """Per-subject Q pieces: values (s,), gradient blocks, Hessian blocks."""
        s = self.n_subjects
        q = np.empty(s)
        grads = [None] * s
        hess = [None] * s
        for bk in self.buckets:
            qv, g, H = bk.evaluate(self.model, u[bk.gather], params, self.P, order=order, exact=exact)
            q[bk.members] = qv
            for a, j in enumerate(bk.members):
                if g is not None:
                    grads[j] = g[a]
                if H is not None:
                    hess[j] = H[a]
        return q, grads, hess


# ---------------------------------------------------------------------------
# public operations


def _params(problem, omega):
    return omega if isinstance(omega, Params) else problem.layout.unpack(omega)


def neg_log_posterior(u, omega, problem: Problem) -> float:
    """Q(u, omega): the normalized negative log joint density."""
    params = _params(problem, omega)
    t1, t2 = prior_terms(params, problem.priors, problem.estimated_noise(params))
    for term, v in ((1, t1), (2, t2)):
        if not math.isfinite(v):
            raise PosteriorEvaluationError(f"term {term} is not finite", term)
    q, _, _ = problem.subject_values(np.asarray(u, float), params)
    return float(t1 + t2 + np.sum(q))


def grad_u(u, omega, problem: Problem) -> np.ndarray:
    """Exact gradient of Q in u."""
    params = _params(problem, omega)
    _, grads, _ = problem.subject_values(np.asarray(u, float), params, order=1)
    return np.concatenate(grads) if grads else np.zeros(0)


def hessian_u_blocks(u, omega, problem: Problem, exact: bool = False):
    """Per-subject Hessian blocks of Q in u (Gauss-Newton unless ``exact``)."""
    params = _params(problem, omega)
    _, _, hess = problem.subject_values(np.asarray(u, float), params, order=2, exact=exact)
    return hess
