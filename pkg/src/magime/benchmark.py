"""Simulate-and-fit benchmark loops with parameter RMSE, coverage and trajectory MSE."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import MagiError
from .fit import FitConfig, fit_dataset
from .models import builtin
from .simulate import SimProtocol, generate_dataset, trajectory_mse


def replicate_seeds(master_seed, n):
    """Independent per-replicate seeds derived from one master seed."""
    return [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(master_seed).spawn(n)]


def truth_parameters(protocol: SimProtocol, cfg: FitConfig):
    """True values matching the rows of :meth:`FitResult.parameter_table`."""
    model = builtin(protocol.model)
    out = {name: float(v) for name, v in zip(model.param_names, protocol.eta)}
    if protocol.n_subjects > 1:
        for name in cfg.random_effects:
            k = model.param_names.index(name)
            out[f"sd_b[{name}]"] = math.sqrt(protocol.sigma_b_true[k, k])
    if cfg.noise_mode == "shared":
        for c, sd in zip(model.component_names, protocol.noise_sd):
            out[f"sigma[{c}]"] = float(sd)
    return out


def run_replicate(protocol: SimProtocol, fit_config: dict, seed: int):
    """Simulate one dataset, fit it and score the fit against the truth."""
    cfg = FitConfig.from_dict(dict(fit_config))
    model = builtin(protocol.model)
    ds, truth = generate_dataset(protocol, seed=seed)
    t0 = time.perf_counter()
    try:
        res = fit_dataset(ds, cfg)
    except MagiError as exc:
        return {"seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "runtime": time.perf_counter() - t0}
    runtime = time.perf_counter() - t0
    params = {row["name"]: row for row in res.parameter_table()}
    sb = res.sigma_b()
    theta_hat, x0_hat, inferred = [], [], []
    for j in range(ds.n_subjects):
        x, _ = res.trajectory(j)
        grid_idx = res.problem.subjects[j].obs_index[0]
        theta_hat.append(res.theta(j))
        x0_hat.append(x[:, 0])
        inferred.append(float(np.sum((x[:, grid_idx].T - truth.trajectories[j]) ** 2) / truth.obs_times.size))
    ode_mse, blown = trajectory_mse(np.array(theta_hat), np.array(x0_hat), truth, model)
    return {
        "seed": seed, "ok": True, "converged": bool(res.outer.converged), "runtime": runtime,
        "estimates": {k: v["estimate"] for k, v in params.items()},
        "intervals": {k: [v["lo"], v["hi"]] for k, v in params.items()},
        "sigma_b": sb.tolist(),
        "inferred_mse": float(np.mean(inferred)),
        "trajectory_mse": ode_mse, "blown_up": any(blown),
    }


def _run(args):
    return run_replicate(*args)


def run_benchmark(protocol: SimProtocol, fit_config: dict, n_replicates: int, threads: int = 1,
                  master_seed=None):
    """Run ``n_replicates`` independent replicates; results are ordered by replicate."""
    seeds = replicate_seeds(protocol.seed if master_seed is None else master_seed, n_replicates)
    jobs = [(protocol, fit_config, s) for s in seeds]
    if threads > 1 and n_replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_run, jobs))
    return [_run(j) for j in jobs]


def summarize_replicates(results, protocol: SimProtocol, fit_config: dict):
    """Table-shaped summary: per-parameter mean, RMSE, coverage; trajectory MSEs; runtime."""
    cfg = FitConfig.from_dict(dict(fit_config))
    truth = truth_parameters(protocol, cfg)
    ok = [r for r in results if r["ok"]]
    rows = []
    for name, true in truth.items():
        est = np.array([r["estimates"][name] for r in ok if name in r["estimates"]])
        if est.size == 0:
            continue
        row = {"parameter": name, "truth": true, "mean": float(est.mean()),
               "rmse": float(np.sqrt(np.mean((est - true) ** 2)))}
        if len(ok) > 1:
            cover = [r["intervals"][name][0] <= true <= r["intervals"][name][1] for r in ok]
            row["coverage"] = float(np.mean(cover))
        rows.append(row)
    finite = [r["trajectory_mse"] for r in ok if math.isfinite(r["trajectory_mse"])]
    return {
        "n_replicates": len(results), "n_failed": len(results) - len(ok),
        "n_converged": sum(1 for r in ok if r["converged"]),
        "parameters": rows,
        "inferred_mse": float(np.mean([r["inferred_mse"] for r in ok])) if ok else float("nan"),
        "trajectory_mse": float(np.mean(finite)) if finite else float("inf"),
        "n_blown_up": sum(1 for r in ok if r["blown_up"]),
        "mean_runtime": float(np.mean([r["runtime"] for r in results])) if results else 0.0,
    }
