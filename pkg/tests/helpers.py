"""Small problem builders shared by the posterior, optimizer and uncertainty tests."""

import numpy as np

from magime.kernel import KernelConfig, build_gp_matrices
from magime.models import OdeModel, builtin, register
from magime.posterior import OmegaLayout, PriorSpec, Problem, SubjectData

PARAMS = {"population_growth": [3.0], "forced_vdp": [0.6, 0.6], "fitzhugh_nagumo": [0.2, 0.2, 3.0],
          "pk_bateman": [0.3, 1.0, 22.45]}
COVARIATES = {"pk_bateman": {"dose": 400.0}}

# acceptance-criterion number -> one-line pass/fail report, printed by conftest
ACCEPTANCE = {}


def _linear_rhs(x, th, t, cov):
    # x' = theta - 0.7 x : linear in (x, theta) jointly
    return th[0] - 0.7 * x


def _linear_jx(x, th, t, cov):
    return np.full((len(t), 1, 1), -0.7)


def _linear_jt(x, th, t, cov):
    return np.ones((len(t), 1, 1))


LINEAR = register(OdeModel(
    name="test_linear_forced_decay", component_names=("x",), param_names=("a",),
    rhs=_linear_rhs, jac_state=_linear_jx, jac_theta=_linear_jt, positivity_mask=(False,),
    default_random=("a",), theta_guess=(1.0,), description="x' = a - 0.7 x",
), overwrite=True)


def subject_on_grid(sid, model, grid, obs_times, values, hyper=(1.0, 0.8, 2.01), covariates=None):
    grid = np.asarray(grid, float)
    gps, idxs, vals = [], [], []
    for i in range(model.n_components):
        gps.append(build_gp_matrices(grid, KernelConfig(*hyper)))
        idx = np.searchsorted(grid, obs_times[i])
        idxs.append(idx)
        vals.append(np.asarray(values[i], float))
    return SubjectData(sid, grid, gps, idxs, vals, covariates or {})


def make_problem(model_name, n_subjects=2, n_grid=7, random_idx=None, noise_mode="shared",
                 priors=None, temper=1.0, seed=0, span=2.0, hyper=(1.0, 0.8, 2.01)):
    """A small problem with random observations at every other grid point."""
    model = builtin(model_name)
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, span, n_grid)
    obs_t = grid[::2]
    subjects = []
    for j in range(n_subjects):
        values = [rng.uniform(0.3, 1.2, obs_t.size) for _ in range(model.n_components)]
        subjects.append(subject_on_grid(f"s{j}", model, grid, [obs_t] * model.n_components, values, hyper,
                                        COVARIATES.get(model_name)))
    if random_idx is None:
        random_idx = list(range(model.n_params)) if n_subjects > 1 else []
    layout = OmegaLayout(model.n_params, random_idx, model.positivity_mask, model.n_components, n_subjects,
                         noise_mode=noise_mode,
                         frozen_noise=np.full((n_subjects, model.n_components), 0.1)
                         if noise_mode == "frozen" else None,
                         param_names=model.param_names, component_names=model.component_names)
    return Problem(model, subjects, layout, priors or PriorSpec(), temper)


def random_point(problem, seed=1, eta=None):
    rng = np.random.default_rng(seed)
    lay = problem.layout
    eta = PARAMS.get(problem.model.name, [1.0] * lay.n_params) if eta is None else eta
    r = lay.r
    sigma_b = np.diag(np.full(r, 0.04)) + 0.01
    sigma_b = sigma_b if r else np.zeros((0, 0))
    omega = lay.pack(np.asarray(eta, float), sigma_b, np.full(lay.n_components, 0.2))
    u = np.empty(problem.size)
    for j in range(problem.n_subjects):
        o = problem.offsets[j]
        u[o:o + r] = 0.1 * rng.standard_normal(r) * np.abs(np.asarray(eta)[list(lay.random_idx)])
        u[o + r:o + problem.block_sizes[j]] = rng.uniform(0.3, 1.2, problem.block_sizes[j] - r)
    return u, omega
