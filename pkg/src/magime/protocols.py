"""Built-in benchmark protocols and their default fit configurations."""

from __future__ import annotations

import copy
import json
import os

import numpy as np

from .errors import DataParseError, InvalidArgumentError
from .simulate import SimProtocol

PK_OBS_TIMES = (0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0)

_PROTOCOLS = {
    "population_growth": {
        "protocol": {
            "name": "population_growth", "model": "population_growth", "eta": [3.0],
            "sigma_b_true": [[0.09]], "x0_mean": [1.0], "x0_sd": [0.1], "noise_sd": [0.03],
            "obs_times": np.linspace(0.0, 1.0, 21).round(10).tolist(), "n_subjects": 20, "seed": 2024,
        },
        "fit": {"model": "population_growth", "level": 1, "smoothness": 2.01, "temper": "auto"},
    },
    "forced_vdp": {
        "protocol": {
            "name": "forced_vdp", "model": "forced_vdp", "eta": [0.6, 0.6],
            "sigma_b_true": [[0.01, 0.01], [0.01, 0.01]], "x0_mean": [1.0], "x0_sd": [0.03],
            "noise_sd": [0.03], "obs_times": np.linspace(0.0, 20.0, 21).tolist(), "n_subjects": 25,
            "seed": 2024,
        },
        "fit": {"model": "forced_vdp", "level": 2, "smoothness": 2.01,
                "priors": {"eta_mean": [0.0, 0.0], "eta_sd": [1000.0 ** 0.5] * 2,
                           "sigma_b_df": 3, "sigma_b_scale": [[0.01, 0.0], [0.0, 0.01]],
                           "noise_ig_shape": 0.01, "noise_ig_scale": 0.01}},
    },
    "fitzhugh_nagumo": {
        "protocol": {
            "name": "fitzhugh_nagumo", "model": "fitzhugh_nagumo", "eta": [0.2, 0.2, 3.0],
            "sigma_b_true": [[0.0025, 0.0025, 0.03], [0.0025, 0.0025, 0.03], [0.03, 0.03, 0.36]],
            "x0_mean": [-1.0, 1.0], "x0_sd": [0.1, 0.1], "noise_sd": [0.1, 0.1],
            "obs_times": np.linspace(0.0, 20.0, 41).tolist(), "n_subjects": 25, "seed": 2024,
        },
        "fit": {"model": "fitzhugh_nagumo", "level": 1, "smoothness": 2.01,
                "priors": {"sigma_b_df": 4, "sigma_b_scale": (0.01 * np.eye(3)).tolist()}},
    },
}

_PK_FIT = {
    "model": "pk_bateman", "random_effects": ["Ka", "Cl"], "diag_sigma_b": True, "level": 2,
    "smoothness": 2.01,
    "priors": {"eta_mean": [-1.0, -0.30, -3.0], "eta_sd": [1000.0 ** 0.5] * 3},
}

for _name, _eta, _sds, _dose, _s in (("pk_group1", (0.30, 1.00, 22.45), (0.50, 5.84), 400.0, 16),
                                     ("pk_group2", (0.27, 0.71, 18.02), (0.31, 4.22), 600.0, 15)):
    _PROTOCOLS[_name] = {
        "protocol": {
            "name": _name, "model": "pk_bateman", "eta": list(_eta),
            "sigma_b_true": np.diag([0.0, _sds[0] ** 2, _sds[1] ** 2]).tolist(),
            "x0_mean": [0.3], "x0_sd": [0.1], "noise_sd": [0.1],
            "obs_times": list(PK_OBS_TIMES), "n_subjects": _s, "seed": 2024,
            "covariates": {"dose": _dose}, "resample_nonpositive": True,
        },
        "fit": copy.deepcopy(_PK_FIT),
    }


def available_protocols():
    return sorted(_PROTOCOLS)


def builtin_protocol(name):
    """Return ``(SimProtocol, fit-config dict)`` for a built-in protocol."""
    try:
        entry = _PROTOCOLS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown protocol {name!r}; available: {', '.join(available_protocols())}") from None
    return SimProtocol.from_dict(copy.deepcopy(entry["protocol"])), copy.deepcopy(entry["fit"])


def load_structured(path):
    """Parse a YAML or JSON file into a dict (JSON is tried first)."""
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    import yaml

    try:
        out = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        raise DataParseError(f"{path}: {exc}", None if line is None else line + 1) from None
    if not isinstance(out, dict):
        raise DataParseError(f"{path}: expected a mapping at top level", 1)
    return out


def load_protocol(source):
    """Load a protocol by built-in name or from a YAML/JSON file.

    A file either holds the protocol fields directly or ``{"protocol": ...,
    "fit": ...}``; a ``base`` key names a built-in protocol to override.
    """
    if not os.path.exists(source):
        return builtin_protocol(source)
    d = load_structured(source)
    if "base" in d:
        proto, fit = builtin_protocol(d.pop("base"))
        merged = proto.to_dict()
        merged.update(d.get("protocol", {k: v for k, v in d.items() if k != "fit"}))
        fit.update(d.get("fit", {}))
        return SimProtocol.from_dict(merged), fit
    if "protocol" in d:
        return SimProtocol.from_dict(d["protocol"]), dict(d.get("fit", {"model": d["protocol"]["model"]}))
    return SimProtocol.from_dict(d), {"model": d["model"]}
