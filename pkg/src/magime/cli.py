"""Command-line interface: ``magime fit | simulate | predict | benchmark | pk-report``.

Every command writes a deterministic JSON artifact: identical inputs, config
and seed give byte-identical files.  Wall-clock runtimes are written to a
``<out>.runtime.json`` sidecar so they never break that contract.

Exit codes: 0 success, 2 input/parse error, 3 optimizer non-convergence,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

from .benchmark import run_benchmark, summarize_replicates
from .data import Dataset, read_observations, write_dataset
from .errors import (DataParseError, InsufficientDataError, InvalidArgumentError, MagiError,
                     ModelLookupError, NonConvergenceError)
from .fit import SCHEMA_VERSION, FitConfig, fit_dataset, fit_horizon_end, predict, prediction_rows
from .protocols import load_protocol, load_structured
from .simulate import generate_dataset
from .uncertainty import threshold_probability


log = logging.getLogger("magime")


EXIT_OK, EXIT_PARSE, EXIT_NONCONVERGENCE, EXIT_NUMERICAL = 0, 2, 3, 4


class _Failure(Exception):
    """Carries an exit code and an optional partial artifact out of a command."""

    def __init__(self, code, message, artifact=None):
        super().__init__(message)
        self.code = code
        self.artifact = artifact


def exit_code_for(exc):
    if isinstance(exc, (DataParseError, InvalidArgumentError, InsufficientDataError, ModelLookupError)):
        return EXIT_PARSE
    if isinstance(exc, NonConvergenceError):
        return EXIT_NONCONVERGENCE
    return EXIT_NUMERICAL


def dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def write_runtime(out, seconds, **extra):
    write_text(out + ".runtime.json", dumps({"seconds": seconds, **extra}))


def dataset_digest(ds: Dataset):
    return hashlib.sha256(json.dumps(ds.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# configuration

def build_config(args):
    """FitConfig from an optional YAML/JSON file overridden by command-line flags."""
    d = {}
    if getattr(args, "config", None):
        d = load_structured(args.config)
        d = d.get("fit", d)
    if args.model is not None:
        d["model"] = args.model
    if "model" not in d:
        raise InvalidArgumentError("a model is required (--model or 'model' in the config file)")
    if args.level is not None:
        d["level"] = args.level
    if args.predict_to is not None:
        d["predict_to"] = args.predict_to
    if args.predict_step is not None:
        d["predict_step"] = args.predict_step
    if args.temper is not None:
        d["temper"] = args.temper if args.temper == "auto" else float(args.temper)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.noise_mode is not None:
        d["noise_mode"] = args.noise_mode
    if args.freeze_sigma is not None:
        d["noise_mode"] = "frozen"
        if args.freeze_sigma != "gp":
            d["known_noise"] = [float(v) for v in args.freeze_sigma.split(",")]
    return FitConfig.from_dict(d)


def _groups(ds: Dataset, cfg: FitConfig):
    if cfg.group_by is None:
        return [(None, ds)]
    return sorted(ds.split_by(cfg.group_by).items())


def _artifact(command, ds, cfg, groups):
    return {
        "schema_version": SCHEMA_VERSION, "command": command,
        "dataset": {"digest": dataset_digest(ds), "data": ds.to_dict()},
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
        "groups": groups,
    }


def _run_fits(ds, cfg, fitter):
    """Fit every group; on failure raise _Failure holding the groups finished so far."""
    groups = []
    for key, sub in _groups(ds, cfg):
        try:
            res = fitter(key, sub)
        except MagiError as exc:
            failed = {"group": key, "error": f"{type(exc).__name__}: {exc}"}
            raise _Failure(exit_code_for(exc), str(exc), groups + [failed]) from exc
        groups.append(res)
    return groups


def _check_converged(groups):
    bad = [g["group"] for g in groups if not g["result"]["diagnostics"]["converged"]]
    if bad:
        return EXIT_NONCONVERGENCE, f"outer optimization did not converge for group(s) {bad}"
    return EXIT_OK, ""


# ---------------------------------------------------------------------------
# commands

def cmd_fit(args):
    ds = read_observations(args.data, args.covariates)
    cfg = build_config(args)

    def fitter(key, sub):
        res = fit_dataset(sub, cfg)
        if cfg.predict_to is not None:
            res = predict(sub, cfg, res, cfg.predict_to, cfg.predict_step)
        d = res.to_dict()
        entry = {"group": key, "result": d}
        if cfg.predict_to is not None:
            entry["prediction"] = prediction_rows(d, cfg.thresholds, cfg.ci_level)
        return entry

    try:
        groups = _run_fits(ds, cfg, fitter)
    except _Failure as f:
        f.artifact = _artifact("fit", ds, cfg, f.artifact)
        raise
    code, msg = _check_converged(groups)
    return _artifact("fit", ds, cfg, groups), code, msg


def cmd_predict(args):
    with open(args.fit_artifact) as fh:
        text = fh.read()
    art = json.loads(text)
    if art.get("schema_version") != SCHEMA_VERSION or art.get("command") != "fit":
        raise DataParseError(f"{args.fit_artifact} is not a fit artifact of schema {SCHEMA_VERSION}")
    ds = Dataset.from_dict(art["dataset"]["data"])
    cfg = FitConfig.from_dict(art["config"])
    t_end = args.predict_to
    step = args.predict_step if args.predict_step is not None else cfg.predict_step
    by_key = {g["group"]: g["result"] for g in art["groups"]}
    if all(t_end <= fit_horizon_end(r) for r in by_key.values()):
        # empty prediction window: the fit artifact is the prediction
        return text, EXIT_OK, ""
    cfg.predict_to = float(t_end)
    cfg.predict_step = step

    def fitter(key, sub):
        res = predict(sub, cfg, by_key[key], t_end, step)
        d = res if isinstance(res, dict) else res.to_dict()
        return {"group": key, "result": d, "prediction": prediction_rows(d, cfg.thresholds, cfg.ci_level)}

    try:
        groups = _run_fits(ds, cfg, fitter)
    except _Failure as f:
        f.artifact = _artifact("fit", ds, cfg, f.artifact)
        raise
    code, msg = _check_converged(groups)
    return _artifact("fit", ds, cfg, groups), code, msg


def cmd_simulate(args):
    proto, fit = load_protocol(args.protocol)
    seed = proto.seed if args.seed is None else args.seed
    ds, truth = generate_dataset(proto, seed=seed)
    write_dataset(ds, args.out)
    manifest = {
        "schema_version": SCHEMA_VERSION, "command": "simulate", "protocol": proto.to_dict(),
        "fit": fit, "seed": seed, "truth": truth.to_dict(),
        "config_hash": hashlib.sha256(json.dumps(proto.to_dict(), sort_keys=True).encode()).hexdigest()[:16],
    }
    write_text(os.path.join(args.out, "truth.json"), dumps(manifest))
    if fit:
        write_text(os.path.join(args.out, "fit_config.json"), dumps(fit))
    return None, EXIT_OK, ""


def cmd_benchmark(args):
    proto, fit = load_protocol(args.protocol)
    overrides = {"level": args.level, "noise_mode": args.noise_mode,
                 "temper": None if args.temper is None else
                 (args.temper if args.temper == "auto" else float(args.temper))}
    fit.update({k: v for k, v in overrides.items() if v is not None})
    cfg = FitConfig.from_dict(dict(fit))
    seed = proto.seed if args.seed is None else args.seed
    results = run_benchmark(proto, fit, args.replicates, threads=args.threads, master_seed=seed)
    runtimes = [r.pop("runtime") for r in results]
    summary = summarize_replicates([dict(r, runtime=t) for r, t in zip(results, runtimes)], proto, fit)
    mean_runtime = summary.pop("mean_runtime")
    art = {
        "schema_version": SCHEMA_VERSION, "command": "benchmark", "protocol": proto.to_dict(),
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": seed,
        "summary": summary, "replicates": results,
    }
    args._runtime_extra = {"per_replicate": runtimes, "mean_per_replicate": mean_runtime}
    return art, EXIT_OK, ""


def pk_report_rows(artifact, thresholds):
    """Flat per-subject PK rows (Cmax, Cmin, AUC with intervals and threshold probabilities)."""
    rows = []
    for g in artifact["groups"]:
        for r in g["result"].get("pk", []):
            row = {"group": g["group"], "id": r["id"]}
            for m in ("cmax", "cmin", "auc"):
                for k in ("estimate", "se", "lo", "hi"):
                    row[f"{m}_{k}"] = r[m][k]
            row["tmax"], row["tmin"] = r["tmax"], r["tmin"]
            for th in thresholds:
                row[f"p_cmin_below_{th:g}"] = threshold_probability(r["cmin"]["estimate"], r["cmin"]["se"], th)
            rows.append(row)
    return rows


def cmd_pk_report(args):
    with open(args.fit_artifact) as fh:
        art = json.load(fh)
    if not any("pk" in g.get("result", {}) for g in art.get("groups", [])):
        raise InvalidArgumentError(f"{args.fit_artifact} holds no PK summaries (model is not pk_bateman)")
    thresholds = args.threshold or art["config"].get("thresholds", [0.1])
    rows = pk_report_rows(art, thresholds)
    if args.out.endswith(".csv"):
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue(), EXIT_OK, ""
    return {"schema_version": SCHEMA_VERSION, "command": "pk-report", "config_hash": art["config_hash"],
            "seed": art["seed"], "thresholds": list(thresholds), "rows": rows}, EXIT_OK, ""


# ---------------------------------------------------------------------------
# argument parsing

def _add_fit_flags(p, fit_command=True):
    if fit_command:
        p.add_argument("--config", help="YAML or JSON file with fit settings")
        p.add_argument("--model", help="built-in model name")
    p.add_argument("--level", type=int, help="grid refinement level (number of step halvings)")
    p.add_argument("--lambda", dest="temper", help="tempering factor (>= 1) or 'auto'")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-mode", choices=("shared", "per_subject", "frozen"))


def build_parser():
    ap = argparse.ArgumentParser(prog="magime", description="Mixed-effects ODE inference with GP manifold constraints")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a dataset")
    p.add_argument("data", help="observations CSV or a directory with observations.csv")
    p.add_argument("--covariates", help="covariate CSV keyed by subject_id")
    _add_fit_flags(p)
    p.add_argument("--predict-to", type=float)
    p.add_argument("--predict-step", type=float)
    p.add_argument("--freeze-sigma", nargs="?", const="gp",
                   help="freeze noise SDs at the GP-stage estimates, or at the given comma-separated values")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset from a protocol")
    p.add_argument("protocol", help="built-in protocol name or YAML/JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("predict", help="extend a fit past the last observation")
    p.add_argument("fit_artifact")
    p.add_argument("--predict-to", type=float, required=True)
    p.add_argument("--predict-step", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("benchmark", help="simulate-and-fit replicates of a protocol")
    p.add_argument("protocol", help="built-in protocol name or YAML/JSON file")
    p.add_argument("--replicates", "-n", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    _add_fit_flags(p, fit_command=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pk-report", help="PK exposure table from a fit artifact")
    p.add_argument("fit_artifact")
    p.add_argument("--threshold", type=float, action="append", help="Cmin threshold (repeatable)")
    p.add_argument("--out", required=True, help="output file (.csv or .json)")
    return ap


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "predict": cmd_predict,
            "benchmark": cmd_benchmark, "pk-report": cmd_pk_report}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        out, code, msg = COMMANDS[args.command](args)
    except _Failure as f:
        if f.artifact is not None:
            write_text(args.out, dumps(f.artifact))
        print(f"magime: error: {f}", file=sys.stderr)
        return f.code
    except (MagiError, OSError, json.JSONDecodeError) as exc:
        code = EXIT_PARSE if isinstance(exc, (OSError, json.JSONDecodeError)) else exit_code_for(exc)
        print(f"magime: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    if out is not None:
        write_text(args.out, out if isinstance(out, str) else dumps(out))
        if args.command != "pk-report":
            write_runtime(args.out, time.perf_counter() - t0, **getattr(args, "_runtime_extra", {}))
    if code:
        print(f"magime: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
