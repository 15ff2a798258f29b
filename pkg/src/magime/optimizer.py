"""Nested optimization: inner MAP over u, Laplace objective and outer BFGS over omega.

The inner level minimizes Q(u, omega) for fixed omega with a damped Newton
method applied independently to every subject block.  The outer level
minimizes the Laplace-approximated negative log marginal

    L(omega) = Q(u_hat, omega) + 1/2 log det H(omega) - |u|/2 log(2 pi)

by BFGS with central finite-difference gradients.  Every objective evaluation
warm-starts the inner solve from the latent vector of the current outer
iterate, so evaluations are deterministic functions of omega.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import (ConditioningError, InitializationError, InnerFailureError, MagiError,
                     PosteriorEvaluationError)
from .posterior import (LOG_2PI, OmegaLayout, Params, PriorSpec, Problem, SubjectData,
                        prior_terms)

log = logging.getLogger(__name__)


@dataclass
class OptimizerOptions:
    inner_tol: float = 1e-8
    inner_max_iter: int = 500
    exact_newton: bool = True
    outer_tol: float = 1e-6
    outer_ftol: float = 1e-10
    outer_max_iter: int = 300
    fd_step: float = 1e-5
    hess_step: float = 1e-3
    max_step: float = 2.0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class InnerSolution:
    u_hat: np.ndarray
    q_value: float
    logdet_H: float
    hessian_blocks: list
    hessian_chols: list
    subject_q: np.ndarray
    converged: bool
    iterations: int

    def laplace_value(self):
        return self.q_value + 0.5 * self.logdet_H - 0.5 * self.u_hat.size * LOG_2PI


@dataclass
class OuterSolution:
    omega_hat: np.ndarray
    neg_log_marginal: float
    omega_cov: np.ndarray
    inner: InnerSolution
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    hessian_indefinite: bool = False
    message: str = ""


# ---------------------------------------------------------------------------
# inner level


def _batched_chol(H):
    """Cholesky of a stack; returns (L, ok) with ok False where it failed."""
    try:
        return np.linalg.cholesky(H), np.ones(H.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(H)
        ok = np.zeros(H.shape[0], dtype=bool)
        for a in range(H.shape[0]):
            try:
                L[a] = np.linalg.cholesky(H[a])
                ok[a] = True
            except np.linalg.LinAlgError:
                pass
        return L, ok


def _chol_solve(L, g):
    y = np.linalg.solve(L, g[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def _safe_values(bk, model, z, params, P, sel):
    try:
        q, _, _ = bk.evaluate(model, z, params, P, sel=sel)
        return q
    except PosteriorEvaluationError:
        q = np.full(len(sel), np.inf)
        for a, s in enumerate(sel):
            try:
                q[a] = bk.evaluate(model, z[a:a + 1], params, P, sel=np.array([s]))[0][0]
            except PosteriorEvaluationError:
                pass
        return q


def _lbfgs_block(bk, model, z0, params, P, s, tol):
    """Quasi-Newton fallback for one subject block."""
    sel = np.array([s])

    def fun(v):
        try:
            q, g, _ = bk.evaluate(model, v[None, :], params, P, sel=sel, order=1)
        except PosteriorEvaluationError:
            return np.inf, np.zeros_like(v)
        return float(q[0]), g[0]

    res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 5000, "ftol": 1e-15, "gtol": tol})
    return res.x, float(res.fun)


def _newton_bucket(bk, model, z, params, P, opts: OptimizerOptions):
    """Damped Newton on every subject of one bucket; returns (z, iterations, converged)."""
    S = z.shape[0]
    done = np.zeros(S, dtype=bool)
    ok_all = True
    it = 0
    while it < opts.inner_max_iter and not np.all(done):
        it += 1
        act = np.flatnonzero(~done)
        q, g, H = bk.evaluate(model, z[act], params, P, sel=act, order=2, exact=opts.exact_newton)
        scale = np.maximum(1.0, np.abs(q))
        gconv = np.max(np.abs(g), axis=1) / scale < opts.inner_tol
        L, ok = _batched_chol(H)
        if not np.all(ok):
            bad = np.flatnonzero(~ok)
            _, _, Hgn = bk.evaluate(model, z[act[bad]], params, P, sel=act[bad], order=2, exact=False)
            Lgn, okgn = _batched_chol(Hgn)
            if not np.all(okgn):
                j = bk.ids[act[bad][int(np.argmin(okgn))]]
                raise ConditioningError(f"Gauss-Newton Hessian block is not positive definite for subject {j}",
                                        subject=j)
            L[bad] = Lgn
        d = -_chol_solve(L, g)
        dec = -np.sum(g * d, axis=1)
        tiny = dec <= 1e-10 * scale
        # near the optimum the Newton step is trusted without a line search
        finished = gconv | tiny
        z[act[tiny & ~gconv]] += d[tiny & ~gconv]
        done[act[finished]] = True
        search = np.flatnonzero(~finished)
        if search.size == 0:
            continue
        rows = act[search]
        alpha = np.ones(search.size)
        pending = np.ones(search.size, dtype=bool)
        for _ in range(60):
            idx = np.flatnonzero(pending)
            zt = z[rows[idx]] + alpha[idx, None] * d[search[idx]]
            qt = _safe_values(bk, model, zt, params, P, rows[idx])
            accept = qt <= q[search[idx]] - 1e-4 * alpha[idx] * dec[search[idx]]
            z[rows[idx[accept]]] = zt[accept]
            pending[idx[accept]] = False
            alpha[idx[~accept]] *= 0.5
            if not np.any(pending) or np.max(alpha[pending]) < 1e-14:
                break
        for a in np.flatnonzero(pending):
            s = rows[a]
            znew, qnew = _lbfgs_block(bk, model, z[s].copy(), params, P, s, opts.inner_tol)
            if qnew < q[search[a]]:
                z[s] = znew
                continue
            gs = np.max(np.abs(g[search[a]])) / scale[search[a]]
            if gs < 1e-5:
                done[s] = True
                ok_all = False
                continue
            raise InnerFailureError(f"inner line search failed for subject {bk.ids[s]}", incumbent=z)
    return z, it, ok_all and bool(np.all(done))


def _inner(problem: Problem, params: Params, u_start, opts: OptimizerOptions) -> InnerSolution:
    u = np.array(u_start, dtype=float, copy=True)
    if u.size != problem.size or not np.all(np.isfinite(u)):
        raise InnerFailureError("u_start must be finite with the problem's latent size", incumbent=u_start)
    t1, t2 = prior_terms(params, problem.priors, problem.estimated_noise(params))
    iters = 0
    converged = True
    s = problem.n_subjects
    subject_q = np.empty(s)
    blocks = [None] * s
    chols = [None] * s
    for bk in problem.buckets:
        z = u[bk.gather].copy()
        z, it, conv = _newton_bucket(bk, problem.model, z, params, problem.P, opts)
        iters = max(iters, it)
        converged &= conv
        u[bk.gather] = z
        q, _, H = bk.evaluate(problem.model, z, params, problem.P, order=2, exact=False)
        L, ok = _batched_chol(H)
        if not np.all(ok):
            j = bk.ids[int(np.argmin(ok))]
            raise ConditioningError(f"Hessian block for subject {j} is not positive definite", subject=j)
        subject_q[bk.members] = q
        for a, j in enumerate(bk.members):
            blocks[j] = H[a]
            chols[j] = L[a]
    logdet = float(sum(2.0 * np.sum(np.log(np.diag(L))) for L in chols))
    q_total = float(t1 + t2 + np.sum(subject_q))
    return InnerSolution(u_hat=u, q_value=q_total, logdet_H=logdet, hessian_blocks=blocks,
                         hessian_chols=chols, subject_q=subject_q, converged=converged, iterations=iters)


def inner_optimize(omega, u_start, problem: Problem, options: OptimizerOptions | None = None) -> InnerSolution:
    """Minimize Q over u for fixed omega (per-subject damped Newton)."""
    opts = options or OptimizerOptions()
    params = omega if isinstance(omega, Params) else problem.layout.unpack(omega)
    return _inner(problem, params, u_start, opts)


def laplace_objective(omega, problem: Problem, warm, options: OptimizerOptions | None = None):
    """Return ``(-log L~(omega), InnerSolution)``."""
    inner = inner_optimize(omega, warm, problem, options)
    return inner.laplace_value(), inner


# ---------------------------------------------------------------------------
# outer level


class _Objective:
    """Laplace objective restricted to the free coordinates of omega."""

    def __init__(self, problem, omega_full, opts):
        self.problem = problem
        self.base = np.array(omega_full, dtype=float)
        self.free = problem.layout.free
        self.opts = opts
        self.evaluations = 0

    def full(self, v):
        w = self.base.copy()
        w[self.free] = v
        return w

    def __call__(self, v, warm):
        self.evaluations += 1
        try:
            val, inner = laplace_objective(self.full(v), self.problem, warm, self.opts)
        except (MagiError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("objective evaluation failed: %s", exc)
            return np.inf, None
        if not math.isfinite(val):
            return np.inf, None
        return val, inner


def _steps(v, rel):
    return rel * np.maximum(1.0, np.abs(v))


def _fd_gradient(obj, v, warm, rel, f0):
    h = _steps(v, rel)
    g = np.empty(v.size)
    for k in range(v.size):
        e = np.zeros(v.size)
        e[k] = h[k]
        fp, _ = obj(v + e, warm)
        fm, _ = obj(v - e, warm)
        if math.isfinite(fp) and math.isfinite(fm):
            g[k] = (fp - fm) / (2.0 * h[k])
        elif math.isfinite(fp):
            g[k] = (fp - f0) / h[k]
        elif math.isfinite(fm):
            g[k] = (f0 - fm) / h[k]
        else:
            raise InnerFailureError(f"objective undefined on both sides of coordinate {k}", incumbent=v)
    return g


def fd_hessian(obj, v, warm, rel, f0):
    """Symmetric central-difference Hessian of ``obj`` (2 d^2 evaluations)."""
    d = v.size
    h = _steps(v, rel)
    H = np.zeros((d, d))

    def f(delta):
        val, _ = obj(v + delta, warm)
        if not math.isfinite(val):
            raise InnerFailureError("objective undefined near the optimum", incumbent=v)
        return val

    for i in range(d):
        e = np.zeros(d)
        e[i] = h[i]
        H[i, i] = (f(e) - 2.0 * f0 + f(-e)) / (h[i] * h[i])
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(e + ej) - f(e - ej) - f(-e + ej) + f(-e - ej)) / (4.0 * h[i] * h[j])
    return H


def covariance_from_hessian(H):
    """Inverse of a symmetrized Hessian; returns (cov, indefinite_flag).

    Non-positive curvature directions are inverted with the absolute value of
    their eigenvalue so the result stays positive semidefinite.
    """
    H = 0.5 * (H + H.T)
    if H.size == 0:
        return H.copy(), False
    w, V = np.linalg.eigh(H)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(w))))
    indefinite = bool(np.any(w <= floor))
    w = np.maximum(np.abs(w), floor)
    cov = (V / w) @ V.T
    return 0.5 * (cov + cov.T), indefinite


def outer_optimize(omega_start, problem: Problem, u_start, options: OptimizerOptions | None = None,
                   compute_cov: bool = True) -> OuterSolution:
    """Minimize the Laplace objective over the free coordinates of omega by BFGS."""
    opts = options or OptimizerOptions()
    obj = _Objective(problem, omega_start, opts)
    v = np.asarray(omega_start, dtype=float)[obj.free].copy()
    f, inner = obj(v, u_start)
    if inner is None:
        raise InitializationError("Laplace objective is not finite at the starting values")
    d = v.size
    Hinv = np.eye(d)
    trace = []
    converged = d == 0
    message = "no free parameters" if d == 0 else ""
    it = 0
    g = _fd_gradient(obj, v, inner.u_hat, opts.fd_step, f) if d else np.zeros(0)
    first = True
    while not converged and it < opts.outer_max_iter:
        it += 1
        gscaled = float(np.max(np.abs(g) * np.maximum(1.0, np.abs(v))) / max(1.0, abs(f)))
        trace.append({"iteration": it, "objective": f, "grad_scaled": gscaled})
        if gscaled < opts.outer_tol:
            converged = True
            message = "gradient tolerance reached"
            break
        p = -Hinv @ g
        if g @ p >= 0:
            Hinv = np.eye(d)
            p = -g
        big = np.max(np.abs(p))
        if big > opts.max_step:
            p *= opts.max_step / big
        slope = float(g @ p)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            vt = v + alpha * p
            ft, it_inner = obj(vt, inner.u_hat)
            if math.isfinite(ft) and ft <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if not np.allclose(Hinv, np.eye(d)):
                Hinv = np.eye(d)
                continue
            message = "line search failed"
            break
        gt = _fd_gradient(obj, vt, it_inner.u_hat, opts.fd_step, ft)
        s = vt - v
        y = gt - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                Hinv = np.eye(d) * (sy / float(y @ y))
                first = False
            rho = 1.0 / sy
            I = np.eye(d)
            Hinv = (I - rho * np.outer(s, y)) @ Hinv @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        decrease = f - ft
        v, f, g, inner = vt, ft, gt, it_inner
        if decrease < opts.outer_ftol * max(1.0, abs(f)):
            converged = True
            message = "objective decrease below tolerance"
    if not converged and not message:
        message = "iteration limit reached"
    trace.append({"iteration": it + 1, "objective": f,
                  "grad_scaled": float(np.max(np.abs(g) * np.maximum(1.0, np.abs(v))) / max(1.0, abs(f)))
                  if d else 0.0})
    omega_hat = obj.full(v)
    size = problem.layout.size
    cov = np.zeros((size, size))
    indefinite = False
    if compute_cov and d:
        Hs = fd_hessian(obj, v, inner.u_hat, opts.hess_step, f)
        cov_free, indefinite = covariance_from_hessian(Hs)
        cov[np.ix_(obj.free, obj.free)] = cov_free
    return OuterSolution(omega_hat=omega_hat, neg_log_marginal=float(f), omega_cov=cov, inner=inner,
                         converged=converged, iterations=it, trace=trace,
                         hessian_indefinite=indefinite, message=message)


# ---------------------------------------------------------------------------
# starting values


def _theta_to_phi(theta, mask):
    return np.where(mask, np.log(np.where(mask, np.maximum(theta, 1e-300), 1.0)), theta)


def _phi_to_theta(phi, mask):
    return np.where(mask, np.exp(np.where(mask, np.clip(phi, -700, 700), 0.0)), phi)


def _theta_only_fit(model, subject: SubjectData, x, lam):
    """Fit theta with the trajectory held fixed by whitened manifold residuals."""
    mask = np.array(model.positivity_mask, dtype=bool)
    Ls = [g.zeta_chol for g in subject.gp]
    t = subject.times
    dx = x - np.stack([g.mean for g in subject.gp])
    base = np.stack([g.mean_deriv + g.m @ dx[i] for i, g in enumerate(subject.gp)])

    def resid(phi):
        theta = _phi_to_theta(phi, mask)
        with np.errstate(all="ignore"):
            F = model.rhs(x.T, theta, t, subject.covariates).T
        R = F - base
        out = np.concatenate([linalg.solve_triangular(L, R[i], lower=True) for i, L in enumerate(Ls)])
        out = out / math.sqrt(lam)
        return np.where(np.isfinite(out), out, 1e10)

    def jac(phi):
        theta = _phi_to_theta(phi, mask)
        with np.errstate(all="ignore"):
            Jt = model.jac_theta(x.T, theta, t, subject.covariates)
        Jt = Jt * np.where(mask, theta, 1.0)[None, None, :]
        out = np.concatenate([linalg.solve_triangular(L, Jt[:, i, :], lower=True) for i, L in enumerate(Ls)])
        out = out / math.sqrt(lam)
        return np.where(np.isfinite(out), out, 0.0)

    guess = np.array(model.theta_guess if model.theta_guess else np.ones(model.n_params), dtype=float)
    best = None
    for f in (1.0, 0.3, 3.0, 0.1, 10.0):
        phi0 = _theta_to_phi(guess * f, mask)
        try:
            res = optimize.least_squares(resid, phi0, jac=jac, method="trf", x_scale="jac",
                                         xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=500)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.cost) and (best is None or res.cost < best.cost):
            best = res
    if best is None:
        raise InitializationError(f"theta pre-fit failed for subject {subject.id}")
    return _phi_to_theta(best.x, mask)


def _joint_subject_fit(model, subject: SubjectData, x, theta, noise_sd, lam, opts):
    """Joint MAP over (x_j, theta_j) for one subject with a flat theta prior."""
    l = model.n_params
    layout = OmegaLayout(l, tuple(range(l)), (False,) * l, model.n_components, 1,
                         noise_mode="frozen", frozen_noise=np.asarray(noise_sd)[None, :])
    prob = Problem(model, [subject], layout, PriorSpec(), temper=lam)
    ridge = 1e-8
    params = Params(B=np.zeros((l, l)), sigma_b=np.zeros((l, l)), sigma_b_inv=ridge * np.eye(l),
                    logdet_sigma_b=0.0, eta=np.zeros(l), eta_raw=np.zeros(l), noise_sd=layout.frozen_noise)
    u0 = np.concatenate([theta, x.reshape(-1)])
    sol = _inner(prob, params, u0, opts)
    return sol.u_hat[:l]


def initial_trajectory(subject: SubjectData, gp_posterior_means):
    """Observed values at observation indices, GP posterior mean elsewhere."""
    x = np.array(gp_posterior_means, dtype=float, copy=True)
    for i, (idx, y) in enumerate(zip(subject.obs_index, subject.obs_values)):
        x[i, np.asarray(idx, dtype=int)] = y
    return x


def starting_values(problem: Problem, x_init, noise_init, options: OptimizerOptions | None = None,
                    eigen_floor: float = 1e-6):
    """Starting ``(u0, omega0, theta_hat)`` from independent per-subject pre-fits.

    Parameters
    ----------
    problem : Problem
    x_init : list of (m, n_j) arrays
        Initial trajectories (see :func:`initial_trajectory`).
    noise_init : (s, m) array
        Stage-one noise SDs.
    """
    opts = options or OptimizerOptions(exact_newton=True)
    model = problem.model
    layout = problem.layout
    mask = np.array(model.positivity_mask, dtype=bool)
    noise_init = np.broadcast_to(np.asarray(noise_init, float), (problem.n_subjects, problem.m))
    thetas = []
    for j, subj in enumerate(problem.subjects):
        lam = problem.lam[j]
        try:
            th = _theta_only_fit(model, subj, x_init[j], lam)
        except InitializationError as exc:
            log.warning("%s", exc)
            thetas.append(None)
            continue
        try:
            joint = _joint_subject_fit(model, subj, x_init[j], th, noise_init[j], lam, opts)
            if np.all(np.isfinite(joint)) and not np.any(joint[mask] <= 0):
                th = joint
        except MagiError as exc:
            log.debug("joint pre-fit for subject %s fell back to theta-only: %s", subj.id, exc)
        thetas.append(th)
    good = [t for t in thetas if t is not None]
    if not good:
        raise InitializationError("per-subject pre-fits failed for every subject")
    theta_hat = np.array([t if t is not None else np.full(model.n_params, np.nan) for t in thetas])
    eta0 = np.mean(np.array(good), axis=0)
    if np.any(eta0[mask] <= 0):
        raise InitializationError("mean pre-fit estimate violates a positivity constraint")
    ridx = list(layout.random_idx)
    b0 = np.zeros((problem.n_subjects, layout.r))
    for j, t in enumerate(thetas):
        if t is not None:
            b0[j] = (t - eta0)[ridx]
    if layout.r:
        if len(good) > 1:
            cov = np.atleast_2d(np.cov(np.array(good)[:, ridx], rowvar=False, bias=False))
        else:
            cov = np.zeros((layout.r, layout.r))
        if layout.diag_only:
            cov = np.diag(np.diag(cov))
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        sigma0 = (V * np.maximum(w, eigen_floor)) @ V.T
    else:
        sigma0 = np.zeros((0, 0))
    if layout.noise_mode == "shared":
        noise0 = np.exp(np.mean(np.log(noise_init), axis=0))
    else:
        noise0 = noise_init
    omega0 = layout.pack(eta0, sigma0, noise0)
    u0 = problem.assemble(b0, x_init)
    return u0, omega0, theta_hat
