"""Mixed-effects ODE inference with manifold-constrained Gaussian processes.

Latent trajectories and random effects are estimated jointly with a Laplace
approximation over a GP-regularized latent vector; population parameters are
found by nested optimization and their uncertainty by the delta method.
"""

from .data import Dataset, Subject, read_observations, write_dataset
from .errors import MagiError
from .fit import FitConfig, FitResult, fit_dataset, predict
from .models import builtin
from .protocols import builtin_protocol
from .simulate import SimProtocol, generate_dataset, rk_solve

__all__ = ["Dataset", "Subject", "read_observations", "write_dataset", "MagiError", "FitConfig",
           "FitResult", "fit_dataset", "predict", "builtin", "builtin_protocol", "SimProtocol",
           "generate_dataset", "rk_solve"]
__version__ = "0.1.0"
