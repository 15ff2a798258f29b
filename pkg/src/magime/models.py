"""Mixed-effects ODE right-hand sides with hand-coded Jacobians.

Every model is vectorized over a grid of time points: ``rhs(x, theta, t, cov)``
takes states ``x`` of shape ``(n, m)``, a parameter vector ``theta`` of length
``l``, times ``t`` of shape ``(n,)`` and a covariate mapping, and returns the
derivatives with shape ``(n, m)``.  ``jac_state`` returns ``(n, m, m)`` with
``[k, i, j] = d f_i / d x_j`` and ``jac_theta`` returns ``(n, m, l)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, ModelEvaluationError, ModelLookupError


@dataclass(frozen=True)
class OdeModel:
    name: str
    component_names: tuple
    param_names: tuple
    rhs: Callable
    jac_state: Callable
    jac_theta: Callable
    positivity_mask: tuple
    default_random: tuple = ()
    covariate_names: tuple = ()
    theta_guess: tuple = ()
    description: str = ""
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if len(self.positivity_mask) != len(self.param_names):
            raise InvalidArgumentError("positivity_mask must have one flag per parameter")
        unknown = set(self.default_random) - set(self.param_names)
        if unknown:
            raise InvalidArgumentError(f"default_random names unknown parameters {sorted(unknown)}")
        if self.theta_guess and len(self.theta_guess) != len(self.param_names):
            raise InvalidArgumentError("theta_guess must have one value per parameter")

    @property
    def n_components(self):
        return len(self.component_names)

    @property
    def n_params(self):
        return len(self.param_names)

    def param_index(self, names: Sequence[str]):
        try:
            return [self.param_names.index(n) for n in names]
        except ValueError:
            raise InvalidArgumentError(
                f"unknown parameter in {list(names)}; {self.name} has {list(self.param_names)}"
            ) from None

    def component_index(self, name):
        if isinstance(name, (int, np.integer)):
            if 0 <= int(name) < self.n_components:
                return int(name)
        elif name in self.component_names:
            return self.component_names.index(name)
        else:
            try:
                return self.component_index(int(name))
            except (TypeError, ValueError):
                pass
        raise InvalidArgumentError(f"unknown component {name!r} for model {self.name}")


# population growth: x' = -theta x

def _pg_rhs(x, th, t, cov):
    return -th[0] * x


def _pg_jx(x, th, t, cov):
    return np.full((x.shape[0], 1, 1), -th[0])


def _pg_jt(x, th, t, cov):
    return (-x)[:, :, None]


# forced van der Pol: x' = theta1 (1 - x^2) x - theta2 sin(t)

def _vdp_rhs(x, th, t, cov):
    return th[0] * (1.0 - x * x) * x - th[1] * np.sin(t)[:, None]


def _vdp_jx(x, th, t, cov):
    return (th[0] * (1.0 - 3.0 * x * x))[:, :, None]


def _vdp_jt(x, th, t, cov):
    out = np.empty((x.shape[0], 1, 2))
    out[:, 0, 0] = (1.0 - x[:, 0] ** 2) * x[:, 0]
    out[:, 0, 1] = -np.sin(t)
    return out


# FitzHugh-Nagumo: V' = c (V - V^3/3 + R), R' = -(V - a + b R) / c

def _fn_rhs(x, th, t, cov):
    a, b, c = th
    V, R = x[:, 0], x[:, 1]
    return np.column_stack([c * (V - V ** 3 / 3.0 + R), -(V - a + b * R) / c])


def _fn_jx(x, th, t, cov):
    a, b, c = th
    V = x[:, 0]
    out = np.empty((x.shape[0], 2, 2))
    out[:, 0, 0] = c * (1.0 - V * V)
    out[:, 0, 1] = c
    out[:, 1, 0] = -1.0 / c
    out[:, 1, 1] = -b / c
    return out


def _fn_jt(x, th, t, cov):
    a, b, c = th
    V, R = x[:, 0], x[:, 1]
    out = np.zeros((x.shape[0], 2, 3))
    out[:, 0, 2] = V - V ** 3 / 3.0 + R
    out[:, 1, 0] = 1.0 / c
    out[:, 1, 1] = -R / c
    out[:, 1, 2] = (V - a + b * R) / (c * c)
    return out


# one-compartment oral absorption: C' = -Ke C + D Ke Ka / Cl exp(-Ka t)

def _dose(cov):
    try:
        return float(cov["dose"])
    except (KeyError, TypeError):
        raise InvalidArgumentError("pk_bateman needs a 'dose' covariate") from None


def _pk_rhs(x, th, t, cov):
    ke, ka, cl = th
    D = _dose(cov)
    return -ke * x + (D * ke * ka / cl * np.exp(-ka * t))[:, None]


def _pk_jx(x, th, t, cov):
    return np.full((x.shape[0], 1, 1), -th[0])


def _pk_jt(x, th, t, cov):
    ke, ka, cl = th
    D = _dose(cov)
    e = np.exp(-ka * t)
    out = np.empty((x.shape[0], 1, 3))
    out[:, 0, 0] = -x[:, 0] + D * ka / cl * e
    out[:, 0, 1] = D * ke / cl * e * (1.0 - ka * t)
    out[:, 0, 2] = -D * ke * ka / (cl * cl) * e
    return out


_REGISTRY: dict = {}


def register(model: OdeModel, overwrite: bool = False) -> OdeModel:
    """Add a user-defined model to the registry used by :func:`builtin`."""
    if model.name in _REGISTRY and not overwrite:
        raise InvalidArgumentError(f"model {model.name!r} is already registered")
    _REGISTRY[model.name] = model
    return model


def available_models():
    return sorted(_REGISTRY)


def builtin(name: str) -> OdeModel:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ModelLookupError(
            f"unknown model {name!r}; available: {', '.join(available_models())}"
        ) from None


register(OdeModel(
    name="population_growth",
    component_names=("x",),
    param_names=("theta",),
    rhs=_pg_rhs, jac_state=_pg_jx, jac_theta=_pg_jt,
    positivity_mask=(True,),
    default_random=("theta",),
    theta_guess=(1.0,),
    description="x' = -theta x",
))

register(OdeModel(
    name="forced_vdp",
    component_names=("x",),
    param_names=("theta1", "theta2"),
    rhs=_vdp_rhs, jac_state=_vdp_jx, jac_theta=_vdp_jt,
    positivity_mask=(False, False),
    default_random=("theta1", "theta2"),
    theta_guess=(1.0, 1.0),
    description="x' = theta1 (1 - x^2) x - theta2 sin(t)",
))

register(OdeModel(
    name="fitzhugh_nagumo",
    component_names=("V", "R"),
    param_names=("theta1", "theta2", "theta3"),
    rhs=_fn_rhs, jac_state=_fn_jx, jac_theta=_fn_jt,
    positivity_mask=(True, True, True),
    default_random=("theta1", "theta2", "theta3"),
    theta_guess=(1.0, 1.0, 1.0),
    description="V' = theta3 (V - V^3/3 + R); R' = -(V - theta1 + theta2 R) / theta3",
))

register(OdeModel(
    name="pk_bateman",
    component_names=("C",),
    param_names=("Ke", "Ka", "Cl"),
    rhs=_pk_rhs, jac_state=_pk_jx, jac_theta=_pk_jt,
    positivity_mask=(True, True, True),
    default_random=("Ka", "Cl"),
    covariate_names=("dose",),
    theta_guess=(0.5, 1.0, 10.0),
    description="C' = -Ke C + D Ke Ka / Cl exp(-Ka t)",
))


def _as_grid(model, x_grid, times):
    x = np.asarray(x_grid, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, model.n_components) if model.n_components > 1 else x[:, None]
    t = np.asarray(times, dtype=float).reshape(-1)
    if x.shape != (t.size, model.n_components):
        raise InvalidArgumentError(
            f"x_grid shape {x.shape} inconsistent with {t.size} times and {model.n_components} components"
        )
    return x, t


def evaluate_rhs_grid(model: OdeModel, x_grid, theta, times, covariates=None):
    """Evaluate ``f`` row by row on a grid; raises on non-finite output."""
    x, t = _as_grid(model, x_grid, times)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != model.n_params:
        raise InvalidArgumentError(f"theta has {theta.size} entries, {model.name} needs {model.n_params}")
    with np.errstate(all="ignore"):  # non-finite rows are reported below
        out = np.asarray(model.rhs(x, theta, t, covariates or {}), dtype=float)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        row = int(np.argmax(bad))
        raise ModelEvaluationError(f"{model.name}: non-finite derivative at row {row} (t={t[row]})", row=row)
    return out
