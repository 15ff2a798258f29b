"""Ground-truth generation: RK4 integration, mixed-effects datasets, trajectory MSE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Subject
from .errors import BlowUpError, InvalidArgumentError
from .models import builtin

DEFAULT_MAX_STEP = 0.01


def rk_solve(model, theta, x0, times, covariates=None, max_step: float = DEFAULT_MAX_STEP):
    """Classical fixed-step RK4 from ``times[0]`` (where the state is ``x0``).

    Each output interval is split into equal substeps no longer than
    ``min(max_step, smallest gap)``, so the solver lands exactly on every
    requested time.  Returns an array of shape ``(len(times), m)``.
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size == 0:
        raise InvalidArgumentError("times must be non-empty")
    if np.any(np.diff(t) <= 0):
        raise InvalidArgumentError("times must be strictly increasing")
    x = np.asarray(x0, dtype=float).reshape(1, -1).copy()
    if x.shape[1] != model.n_components:
        raise InvalidArgumentError(f"x0 needs {model.n_components} entries")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x0 must be finite")
    theta = np.asarray(theta, dtype=float)
    cov = covariates or {}
    gaps = np.diff(t)
    h_max = min(max_step, float(gaps.min())) if gaps.size else max_step

    def f(tt, xx):
        return model.rhs(xx, theta, np.array([tt]), cov)

    out = np.empty((t.size, x.shape[1]))
    out[0] = x[0]
    with np.errstate(all="ignore"):
        for k, gap in enumerate(gaps):
            nsub = max(1, math.ceil(gap / h_max - 1e-9))
            h = gap / nsub
            t0 = t[k]
            for i in range(nsub):
                tt = t0 + i * h
                k1 = f(tt, x)
                k2 = f(tt + 0.5 * h, x + 0.5 * h * k1)
                k3 = f(tt + 0.5 * h, x + 0.5 * h * k2)
                k4 = f(tt + h, x + h * k3)
                xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if not np.all(np.isfinite(xn)):
                    raise BlowUpError(f"state became non-finite after t={tt:g}", last_time=float(tt))
                x = xn
            out[k + 1] = x[0]
    return out


@dataclass
class SimProtocol:
    """Data-generating protocol for a mixed-effects benchmark.

    ``sigma_b_true`` is ``l x l`` over all parameters; rows/columns of
    parameters without random effects are zero.  ``covariates`` are attached
    to every subject.  With ``resample_nonpositive`` set, draws whose
    positivity-constrained parameters are not positive are redrawn.
    """

    model: str
    eta: np.ndarray
    sigma_b_true: np.ndarray
    x0_mean: np.ndarray
    x0_sd: np.ndarray
    noise_sd: np.ndarray
    obs_times: np.ndarray
    n_subjects: int
    seed: int = 0
    covariates: dict = field(default_factory=dict)
    resample_nonpositive: bool = False
    name: str = ""

    def __post_init__(self):
        mdl = builtin(self.model)
        l, m = mdl.n_params, mdl.n_components
        self.eta = np.asarray(self.eta, float).reshape(l)
        self.sigma_b_true = np.asarray(self.sigma_b_true, float).reshape(l, l)
        if not np.allclose(self.sigma_b_true, self.sigma_b_true.T):
            raise InvalidArgumentError("sigma_b_true must be symmetric")
        if np.min(np.linalg.eigvalsh(self.sigma_b_true)) < -1e-10 * max(1.0, np.abs(self.sigma_b_true).max()):
            raise InvalidArgumentError("sigma_b_true must be positive semidefinite")
        self.x0_mean = np.broadcast_to(np.asarray(self.x0_mean, float), (m,)).copy()
        self.x0_sd = np.broadcast_to(np.asarray(self.x0_sd, float), (m,)).copy()
        self.noise_sd = np.broadcast_to(np.asarray(self.noise_sd, float), (m,)).copy()
        self.obs_times = np.asarray(self.obs_times, float).reshape(-1)
        if self.n_subjects < 1:
            raise InvalidArgumentError("n_subjects must be at least 1")

    def to_dict(self):
        return {
            "name": self.name, "model": self.model, "eta": self.eta.tolist(),
            "sigma_b_true": self.sigma_b_true.tolist(), "x0_mean": self.x0_mean.tolist(),
            "x0_sd": self.x0_sd.tolist(), "noise_sd": self.noise_sd.tolist(),
            "obs_times": self.obs_times.tolist(), "n_subjects": int(self.n_subjects),
            "seed": int(self.seed), "covariates": dict(self.covariates),
            "resample_nonpositive": bool(self.resample_nonpositive),
        }

    @classmethod
    def from_dict(cls, d):
        keys = ("name", "model", "eta", "sigma_b_true", "x0_mean", "x0_sd", "noise_sd", "obs_times",
                "n_subjects", "seed", "covariates", "resample_nonpositive")
        unknown = set(d) - set(keys)
        if unknown:
            raise InvalidArgumentError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass
class Truth:
    ids: list
    theta: np.ndarray  # (s, l)
    x0: np.ndarray  # (s, m)
    trajectories: np.ndarray  # (s, n_obs, m), noise-free at obs_times
    obs_times: np.ndarray
    covariates: list

    def to_dict(self):
        return {"ids": list(self.ids), "theta": self.theta.tolist(), "x0": self.x0.tolist(),
                "obs_times": self.obs_times.tolist()}


def psd_sqrt(S):
    """Symmetric square root with negative eigenvalues clipped at zero."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def generate_dataset(protocol: SimProtocol, seed=None):
    """Draw one dataset; returns ``(Dataset, Truth)``.

    Every subject gets its own RNG stream spawned from the master seed, so the
    draws of subject ``j`` do not depend on how many subjects are generated.
    """
    model = builtin(protocol.model)
    master = np.random.SeedSequence(protocol.seed if seed is None else seed)
    streams = master.spawn(protocol.n_subjects)
    root = psd_sqrt(protocol.sigma_b_true)
    mask = np.array(model.positivity_mask, dtype=bool)
    l, m = model.n_params, model.n_components
    t = protocol.obs_times
    thetas, x0s, trajs, subjects, covs = [], [], [], [], []
    for j, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        for _ in range(1000):
            theta = protocol.eta + root @ rng.standard_normal(l)
            if not protocol.resample_nonpositive or np.all(theta[mask] > 0):
                break
        else:
            raise InvalidArgumentError("could not draw positive parameters in 1000 attempts")
        x0 = protocol.x0_mean + protocol.x0_sd * rng.standard_normal(m)
        cov = dict(protocol.covariates)
        traj = rk_solve(model, theta, x0, t, cov)
        y = traj + protocol.noise_sd[None, :] * rng.standard_normal(traj.shape)
        sid = f"s{j + 1:03d}"
        subjects.append(Subject(sid, {c: (t.copy(), y[:, i].copy()) for i, c in enumerate(model.component_names)},
                                cov))
        thetas.append(theta)
        x0s.append(x0)
        trajs.append(traj)
        covs.append(cov)
    ds = Dataset(subjects, tuple(model.component_names))
    truth = Truth([s.id for s in subjects], np.array(thetas), np.array(x0s), np.array(trajs), t.copy(), covs)
    return ds, truth


def trajectory_mse(theta_hat, x0_hat, truth: Truth, model, obs_times=None):
    """Mean over subjects of the per-time squared error between true and fitted ODE solutions.

    Returns ``(mse, flags)`` where ``flags[j]`` is True when the solve under
    the estimates blew up or overflowed; such replicates report an infinite MSE.
    """
    t = truth.obs_times if obs_times is None else np.asarray(obs_times, float)
    errs = []
    flags = []
    for j in range(len(truth.ids)):
        cov = truth.covariates[j] if truth.covariates else {}
        true = rk_solve(model, truth.theta[j], truth.x0[j], t, cov)
        try:
            est = rk_solve(model, theta_hat[j], x0_hat[j], t, cov)
        except BlowUpError:
            errs.append(np.inf)
            flags.append(True)
            continue
        with np.errstate(over="ignore"):
            err = float(np.sum((true - est) ** 2) / t.size)
        if not np.isfinite(err):
            err = np.inf
        errs.append(err)
        flags.append(not np.isfinite(err))
    return float(np.mean(errs)), flags
