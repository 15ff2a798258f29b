"""End-to-end fitting pipeline: GP stage, starting values, nested optimization, delta method."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .discretization import build_grid
from .errors import InsufficientDataError, InvalidArgumentError
from .gp_fit import fit_hyperparameters, gp_posterior
from .kernel import build_gp_matrices
from .models import builtin
from .optimizer import OptimizerOptions, initial_trajectory, outer_optimize, starting_values
from .pk import summarize
from .posterior import NOISE_MODES, OmegaLayout, PriorSpec, Problem, SubjectData
from .simulate import rk_solve
from .uncertainty import credible_interval, delta_method_variance, log_scale_interval, threshold_probability

log = logging.getLogger(__name__)
SCHEMA_VERSION = 1


@dataclass
class FitConfig:
    """Everything that determines a fit besides the data."""

    model: str
    random_effects: list | None = None
    diag_sigma_b: bool = False
    level: int = 0
    predict_to: float | None = None
    predict_step: float | None = None
    smoothness: float = 2.01
    priors: dict = field(default_factory=dict)
    temper: float | str = 1.0
    noise_mode: str = "shared"
    known_noise: list | None = None
    options: dict = field(default_factory=dict)
    ci_level: float = 0.95
    jitter: float = 1e-10
    seed: int = 0
    group_by: str | None = None
    pk_window: list | None = None
    thresholds: list = field(default_factory=lambda: [0.1])

    _KEYS = ("model", "random_effects", "diag_sigma_b", "level", "predict_to", "predict_step",
             "smoothness", "priors", "temper", "noise_mode", "known_noise", "options", "ci_level",
             "jitter", "seed", "group_by", "pk_window", "thresholds")

    def __post_init__(self):
        model = builtin(self.model)
        if self.random_effects is None:
            self.random_effects = list(model.default_random)
        self.random_effects = list(self.random_effects)
        model.param_index(self.random_effects)
        if self.noise_mode not in NOISE_MODES:
            raise InvalidArgumentError(f"noise_mode must be one of {NOISE_MODES}")
        if int(self.level) != self.level or self.level < 0:
            raise InvalidArgumentError("level must be a non-negative integer")
        self.level = int(self.level)
        if self.smoothness <= 2:
            raise InvalidArgumentError("smoothness must exceed 2")
        if not (isinstance(self.temper, str) and self.temper == "auto"):
            self.temper = float(self.temper)
            if self.temper < 1:
                raise InvalidArgumentError("temper must be >= 1 or 'auto'")
        unknown = set(self.priors) - {"eta_mean", "eta_sd", "sigma_b_df", "sigma_b_scale",
                                      "noise_ig_shape", "noise_ig_scale"}
        if unknown:
            raise InvalidArgumentError(f"unknown prior keys {sorted(unknown)}")
        valid = set(OptimizerOptions().__dict__)
        unknown = set(self.options) - valid
        if unknown:
            raise InvalidArgumentError(f"unknown optimizer options {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls._KEYS)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: getattr(self, k) for k in self._KEYS}

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def optimizer_options(self):
        return OptimizerOptions(**self.options)

    def prior_spec(self):
        scalars = ("sigma_b_df", "noise_ig_shape", "noise_ig_scale")
        return PriorSpec(**{k: (v if v is None or k in scalars else np.asarray(v, float))
                            for k, v in self.priors.items()})


@dataclass
class Setup:
    """A Problem together with the stage-one artifacts used to build it."""

    problem: Problem
    grid: object
    hyper: list  # per subject: list of HyperFit per component
    x_init: list
    noise_init: np.ndarray


def build_setup(dataset: Dataset, cfg: FitConfig, horizon=None) -> Setup:
    """Stage one: common grid, per subject-component GP fits and GP matrices."""
    model = builtin(cfg.model)
    if dataset.n_subjects == 0:
        raise InsufficientDataError("dataset has no subjects")
    comps = model.component_names
    missing = [c for c in dataset.component_names if c not in comps]
    if missing:
        raise InvalidArgumentError(f"components {missing} are not part of model {model.name} {comps}")
    times = dataset.design_times()
    if times.size < 2:
        raise InsufficientDataError("need at least two distinct observation times")
    grid = build_grid(times, cfg.level, horizon)
    known = cfg.known_noise
    if known is not None:
        known = np.broadcast_to(np.asarray(known, float), (model.n_components,))
    subjects, hyper, x_init = [], [], []
    noise = np.empty((dataset.n_subjects, model.n_components))
    for j, s in enumerate(dataset.subjects):
        for cov in model.covariate_names:
            if cov not in s.covariates:
                raise InvalidArgumentError(f"subject {s.id} lacks covariate {cov!r}")
        gps, idxs, vals, fits, means = [], [], [], [], []
        for i, c in enumerate(comps):
            t, y = s.times(c), s.values(c)
            if len(t) < 3:
                raise InsufficientDataError(f"subject {s.id} component {c}: need at least 3 observations")
            fit = fit_hyperparameters(t, y, cfg.smoothness, None if known is None else float(known[i]))
            if not fit.converged:
                log.warning("GP fit for subject %s component %s did not fully converge", s.id, c)
            fits.append(fit)
            gps.append(build_gp_matrices(grid.points, fit.kernel(), cfg.jitter, subject=s.id, component=c))
            idxs.append(grid.indices_of(t))
            vals.append(np.asarray(y, float))
            means.append(gp_posterior(fit, t, y, grid.points)[0])
            noise[j, i] = fit.noise_sd
        sd = SubjectData(s.id, grid.points.copy(), gps, idxs, vals, dict(s.covariates))
        subjects.append(sd)
        hyper.append(fits)
        x_init.append(initial_trajectory(sd, np.array(means)))
    s_count = dataset.n_subjects
    ridx = model.param_index(cfg.random_effects) if s_count > 1 else []
    layout = OmegaLayout(model.n_params, ridx, model.positivity_mask, model.n_components, s_count,
                         noise_mode=cfg.noise_mode, diag_only=cfg.diag_sigma_b,
                         frozen_noise=noise if cfg.noise_mode == "frozen" else None,
                         param_names=model.param_names, component_names=comps)
    priors = cfg.prior_spec()
    if s_count == 1 and priors.sigma_b_df is not None:
        priors.sigma_b_df = None
        priors.sigma_b_scale = None
    problem = Problem(model, subjects, layout, priors, temper=cfg.temper)
    return Setup(problem, grid, hyper, x_init, noise)


@dataclass
class FitResult:
    config: FitConfig
    setup: Setup
    outer: object
    report: object
    theta_prefit: np.ndarray
    omega_start: np.ndarray

    @property
    def problem(self):
        return self.setup.problem

    # -- derived quantities ---------------------------------------------------

    def eta(self):
        return self.problem.layout.unpack(self.outer.omega_hat).eta

    def sigma_b(self):
        return self.problem.layout.unpack(self.outer.omega_hat).sigma_b

    def trajectory(self, j):
        _, x = self.problem.split(self.outer.inner.u_hat, j)
        _, se = self.problem.split(self.report.u_se, j)
        return x, se

    def random_effects(self, j):
        b, _ = self.problem.split(self.outer.inner.u_hat, j)
        return b

    def theta(self, j):
        return self.eta() + self.problem.P @ self.random_effects(j)

    def theta_se(self, j):
        lay = self.problem.layout
        eta = self.eta()
        out = np.empty(lay.n_params)
        n_j = int(self.problem.block_sizes[j])
        for p in range(lay.n_params):
            a_u = np.zeros(n_j)
            a_u[:lay.r] = self.problem.P[p]
            a_w = np.zeros(lay.size)
            a_w[lay.eta_slice.start + p] = eta[p] if lay.positivity_mask[p] else 1.0
            out[p] = math.sqrt(max(self.report.functional_variance(j, a_u, a_w), 0.0))
        return out

    def trajectory_cov(self, j, component=0):
        """Delta-method covariance of one component's grid values for subject ``j``."""
        r = self.problem.r
        n = self.problem.subjects[j].n
        full = self.report.subject_cov(j)
        sl = slice(r + component * n, r + (component + 1) * n)
        return full[sl, sl]

    def sigma_b_table(self):
        """Sigma_b entries with delta-method SEs (finite differences in beta)."""
        lay = self.problem.layout
        r = lay.r
        if r == 0:
            return []
        w = self.outer.omega_hat
        cov = self.report.omega_cov
        base = lay.unpack(w).sigma_b
        D = np.zeros((r, r, lay.size))
        for k in range(lay.beta_slice.start, lay.beta_slice.stop):
            h = 1e-6 * max(1.0, abs(w[k]))
            e = np.zeros(lay.size)
            e[k] = h
            D[:, :, k] = (lay.unpack(w + e).sigma_b - lay.unpack(w - e).sigma_b) / (2 * h)
        names = [lay.param_names[i] for i in lay.random_idx]
        rows = []
        for a in range(r):
            for b in range(a + 1):
                if lay.diag_only and a != b:
                    continue
                g = D[a, b]
                se = math.sqrt(max(float(g @ cov @ g), 0.0))
                rows.append({"row": names[a], "col": names[b], "estimate": float(base[a, b]), "se": se})
        return rows

    def parameter_table(self):
        lay = self.problem.layout
        w = self.outer.omega_hat
        se = self.report.omega_se
        level = self.config.ci_level
        p = lay.unpack(w)
        rows = []
        for k, name in enumerate(lay.param_names):
            idx = lay.eta_slice.start + k
            if lay.positivity_mask[k]:
                est = float(p.eta[k])
                lo, hi = log_scale_interval(est, float(se[idx]), level)
                rows.append({"name": name, "kind": "eta", "estimate": est, "se": est * float(se[idx]),
                             "lo": lo, "hi": hi})
            else:
                est = float(p.eta[k])
                lo, hi = credible_interval(est, float(se[idx]), level)
                rows.append({"name": name, "kind": "eta", "estimate": est, "se": float(se[idx]),
                             "lo": lo, "hi": hi})
        for row in self.sigma_b_table():
            if row["row"] == row["col"]:
                var, var_se = row["estimate"], row["se"]
                sd = math.sqrt(max(var, 0.0))
                sd_se = var_se / (2.0 * sd) if sd > 0 else 0.0
                lo, hi = log_scale_interval(sd, sd_se / sd, level) if sd > 0 else (0.0, 0.0)
                rows.append({"name": f"sd_b[{row['row']}]", "kind": "sigma_b_sd", "estimate": sd, "se": sd_se,
                             "lo": lo, "hi": hi})
        if lay.noise_mode == "shared":
            for k, c in enumerate(lay.component_names):
                idx = lay.noise_slice.start + k
                est = float(math.exp(w[idx]))
                lo, hi = log_scale_interval(est, float(se[idx]), level)
                rows.append({"name": f"sigma[{c}]", "kind": "noise", "estimate": est, "se": est * float(se[idx]),
                             "lo": lo, "hi": hi})
        return rows

    def pk_summary(self, j, window=None):
        x, se = self.trajectory(j)
        t = self.problem.subjects[j].times
        if window is None:
            window = self.config.pk_window or (float(t[0]), float(self.setup.grid.points[
                self.setup.grid.horizon_start - 1] if self.setup.grid.horizon_start else t[-1]))
        cov = self.trajectory_cov(j, 0)
        return summarize(t, x[0], se[0], lambda idx: cov[np.ix_(idx, idx)], window, self.config.ci_level)

    # -- serialization ----------------------------------------------------------

    def to_dict(self, dataset: Dataset | None = None):
        prob = self.problem
        lay = prob.layout
        outer = self.outer
        subjects = []
        for j, s in enumerate(prob.subjects):
            x, se = self.trajectory(j)
            entry = {
                "id": s.id,
                "b": self.random_effects(j).tolist(),
                "theta": self.theta(j).tolist(),
                "theta_se": self.theta_se(j).tolist(),
                "times": s.times.tolist(),
                "trajectory": {c: x[i].tolist() for i, c in enumerate(lay.component_names)},
                "trajectory_se": {c: se[i].tolist() for i, c in enumerate(lay.component_names)},
                "gp": [h.to_dict() for h in self.setup.hyper[j]],
                "lambda": float(prob.lam[j]),
            }
            hs = self.setup.grid.horizon_start
            if hs is not None and prob.model.name == "pk_bateman":
                summ = self.pk_summary(j, window=(float(s.times[hs - 1]), float(s.times[-1])))
                entry["cmin_prediction"] = summ.cmin.to_dict()
            subjects.append(entry)
        out = {
            "omega": {"names": lay.names(), "estimate": outer.omega_hat.tolist(),
                      "se": self.report.omega_se.tolist(), "free": lay.free.tolist(),
                      "cov": self.report.omega_cov.tolist(), "start": self.omega_start.tolist()},
            "parameters": self.parameter_table(),
            "sigma_b": self.sigma_b_table(),
            "subjects": subjects,
            "grid": {"points": self.setup.grid.points.tolist(), "horizon_start": self.setup.grid.horizon_start},
            "diagnostics": {
                "converged": bool(outer.converged), "message": outer.message,
                "outer_iterations": int(outer.iterations), "inner_converged": bool(outer.inner.converged),
                "neg_log_marginal": float(outer.neg_log_marginal),
                "hessian_indefinite": bool(outer.hessian_indefinite), "trace": outer.trace,
                "theta_prefit": self.theta_prefit.tolist(),
            },
        }
        if prob.model.name == "pk_bateman":
            out["pk"] = self.pk_rows()
        return out

    def pk_rows(self, window=None, thresholds=None):
        thresholds = self.config.thresholds if thresholds is None else thresholds
        rows = []
        for j, s in enumerate(self.problem.subjects):
            summ = self.pk_summary(j, window)
            row = {"id": s.id, **summ.to_dict()}
            row["p_cmin_below"] = {repr(float(th)): summ.prob_cmin_below(th) for th in thresholds}
            rows.append(row)
        return rows


def fit_dataset(dataset: Dataset, cfg: FitConfig, horizon=None, warm=None) -> FitResult:
    """Run the full pipeline on one group of subjects.

    ``warm`` may hold ``(omega, u)`` from an earlier fit of the same subjects
    to start the outer optimization from (used by prediction refits).
    """
    opts = cfg.optimizer_options()
    setup = build_setup(dataset, cfg, horizon)
    problem = setup.problem
    if warm is None:
        u0, omega0, theta_hat = starting_values(problem, setup.x_init, setup.noise_init, opts)
    else:
        omega0, u0 = warm
        theta_hat = np.full((problem.n_subjects, problem.model.n_params), np.nan)
    outer = outer_optimize(omega0, problem, u0, opts)
    report = delta_method_variance(outer, problem, opts)
    return FitResult(cfg, setup, outer, report, theta_hat, omega0)


def extrapolated_warm_start(model, covariates, bs, xs, thetas, old_points, grid):
    """u blocks for a refit on ``grid``, which extends ``old_points``.

    Trajectories on the old grid are kept; new points are filled by solving
    the ODE forward from the last fitted state with each subject's theta.
    """
    old_n = len(old_points)
    new_pts = grid.points[old_n - 1:]
    out = []
    for b, x, th, cov in zip(bs, xs, thetas, covariates):
        x = np.asarray(x, float)
        ext = rk_solve(model, np.asarray(th, float), x[:, -1], new_pts, cov)
        out.append(np.concatenate([x, ext[1:].T], axis=1))
    return [np.asarray(b, float) for b in bs], out


def fit_state(result):
    """``(omega, b list, x list, theta list, grid points)`` of a fit or its artifact dict."""
    if isinstance(result, FitResult):
        prob = result.problem
        split = [prob.split(result.outer.inner.u_hat, j) for j in range(prob.n_subjects)]
        return (result.outer.omega_hat.copy(), [b for b, _ in split], [x for _, x in split],
                [result.theta(j) for j in range(prob.n_subjects)], result.setup.grid.points)
    comps = None
    bs, xs, ths = [], [], []
    for s in result["subjects"]:
        comps = comps or list(s["trajectory"])
        bs.append(np.asarray(s["b"], float))
        xs.append(np.array([s["trajectory"][c] for c in comps]))
        ths.append(np.asarray(s["theta"], float))
    return (np.asarray(result["omega"]["estimate"], float), bs, xs, ths,
            np.asarray(result["grid"]["points"], float))


def fit_horizon_end(result):
    """Last grid time covered by the observations of a fit (or artifact dict)."""
    if isinstance(result, FitResult):
        pts, hs = result.setup.grid.points, result.setup.grid.horizon_start
    else:
        pts, hs = result["grid"]["points"], result["grid"]["horizon_start"]
    return float(pts[-1] if hs is None else pts[hs - 1])


def predict(dataset: Dataset, cfg: FitConfig, prev, t_end, step=None):
    """Refit on a grid extended to ``t_end`` using only the original observations.

    ``prev`` is a :class:`FitResult` or its ``to_dict`` artifact.  With an
    empty prediction window ``prev`` is returned unchanged.
    """
    if t_end <= fit_horizon_end(prev):
        return prev
    omega, bs, xs, thetas, old_points = fit_state(prev)
    if step is None:
        step = float(old_points[1] - old_points[0]) if len(old_points) > 1 else 1.0
    horizon = (float(t_end), float(step))
    setup = build_setup(dataset, cfg, horizon)
    covs = [s.covariates for s in setup.problem.subjects]
    bs, xs = extrapolated_warm_start(setup.problem.model, covs, bs, xs, thetas, old_points, setup.grid)
    u0 = setup.problem.assemble(bs, xs)
    opts = cfg.optimizer_options()
    outer = outer_optimize(omega, setup.problem, u0, opts)
    report = delta_method_variance(outer, setup.problem, opts)
    prefit = prev.theta_prefit if isinstance(prev, FitResult) else np.asarray(
        prev["diagnostics"]["theta_prefit"], float)
    return FitResult(cfg, setup, outer, report, prefit, omega)


def prediction_rows(result: dict, thresholds, level=0.95):
    """Per-subject prediction report computed from a fit artifact dict.

    Bands are split at the last observed grid time; for PK fits the trough
    concentration over the prediction window and ``P(Cmin < threshold)`` are
    added.
    """
    hs = result["grid"]["horizon_start"]
    rows = []
    for s in result["subjects"]:
        t = np.asarray(s["times"], float)
        entry = {"id": s["id"], "times": t.tolist(), "horizon_start": hs, "bands": {}}
        for c, x in s["trajectory"].items():
            se = s["trajectory_se"][c]
            lo, hi = zip(*(credible_interval(float(v), float(e), level) for v, e in zip(x, se)))
            entry["bands"][c] = {"estimate": list(x), "se": list(se), "lo": list(lo), "hi": list(hi)}
        cmin = s.get("cmin_prediction")
        if cmin is not None:
            entry["cmin_prediction"] = cmin
            entry["p_cmin_below"] = {repr(float(th)): threshold_probability(cmin["estimate"], cmin["se"], th)
                                     for th in thresholds}
        rows.append(entry)
    return rows
