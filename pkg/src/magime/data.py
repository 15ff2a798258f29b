"""Observation datasets and their CSV representation.

Observations live in a long-format CSV with columns
``subject_id, component, time, value``; a missing measurement is simply an
absent row.  Per-subject covariates (dose, treatment group, ...) live in an
optional second CSV keyed by ``subject_id``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataParseError, InsufficientDataError

OBS_COLUMNS = ("subject_id", "component", "time", "value")


@dataclass
class Subject:
    id: str
    series: dict  # component name -> (times, values)
    covariates: dict = field(default_factory=dict)

    def times(self, component):
        return self.series.get(component, (np.empty(0), np.empty(0)))[0]

    def values(self, component):
        return self.series.get(component, (np.empty(0), np.empty(0)))[1]

    def all_times(self):
        ts = [t for t, _ in self.series.values() if len(t)]
        return np.unique(np.concatenate(ts)) if ts else np.empty(0)

    def n_obs(self):
        return sum(len(t) for t, _ in self.series.values())


@dataclass
class Dataset:
    subjects: list
    component_names: tuple = ()

    def __post_init__(self):
        for s in self.subjects:
            for comp, (t, y) in s.series.items():
                t = np.asarray(t, dtype=float)
                y = np.asarray(y, dtype=float)
                if t.shape != y.shape:
                    raise DataParseError(f"subject {s.id} component {comp}: times/values length mismatch")
                if np.any(np.diff(t) <= 0):
                    raise DataParseError(f"subject {s.id} component {comp}: times must be strictly increasing")
                if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
                    raise DataParseError(f"subject {s.id} component {comp}: non-finite entries")
                s.series[comp] = (t, y)
        if not self.component_names:
            names = []
            for s in self.subjects:
                for c in s.series:
                    if c not in names:
                        names.append(c)
            self.component_names = tuple(names)

    def __len__(self):
        return len(self.subjects)

    @property
    def n_subjects(self):
        return len(self.subjects)

    def design_times(self):
        """Union of observation times across all subjects and components."""
        ts = [s.all_times() for s in self.subjects]
        ts = [t for t in ts if t.size]
        return np.unique(np.concatenate(ts)) if ts else np.empty(0)

    def split_by(self, covariate):
        groups = {}
        for s in self.subjects:
            key = str(s.covariates.get(covariate, ""))
            groups.setdefault(key, []).append(s)
        return {k: Dataset(v, self.component_names) for k, v in groups.items()}

    def to_dict(self):
        return {
            "component_names": list(self.component_names),
            "subjects": [
                {
                    "id": s.id,
                    "covariates": dict(s.covariates),
                    "series": {c: {"time": t.tolist(), "value": y.tolist()} for c, (t, y) in s.series.items()},
                }
                for s in self.subjects
            ],
        }

    @classmethod
    def from_dict(cls, d):
        subjects = [
            Subject(
                id=str(s["id"]),
                covariates=dict(s.get("covariates", {})),
                series={c: (np.asarray(v["time"], float), np.asarray(v["value"], float))
                        for c, v in s["series"].items()},
            )
            for s in d["subjects"]
        ]
        return cls(subjects, tuple(d.get("component_names", ())))


def _parse_float(text, what, line):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataParseError(f"{what} {text!r} is not a number", line) from None
    if not math.isfinite(v):
        raise DataParseError(f"{what} must be finite", line)
    return v


def _covariate_value(text):
    try:
        return float(text)
    except ValueError:
        return text


def read_observations(path, covariates_path=None) -> Dataset:
    """Read an observation CSV (and optionally a covariate CSV) into a Dataset.

    ``path`` may also be a directory containing ``observations.csv`` and,
    optionally, ``covariates.csv``.
    """
    if os.path.isdir(path):
        cpath = os.path.join(path, "covariates.csv")
        if covariates_path is None and os.path.exists(cpath):
            covariates_path = cpath
        path = os.path.join(path, "observations.csv")
    rows = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InsufficientDataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != OBS_COLUMNS:
            raise DataParseError(f"expected header {','.join(OBS_COLUMNS)}, got {','.join(header)}", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < 4:
                raise DataParseError(f"expected 4 columns, got {len(rec)}", lineno)
            sid, comp = rec[0].strip(), rec[1].strip()
            t = _parse_float(rec[2], "time", lineno)
            y = _parse_float(rec[3], "value", lineno)
            if sid not in rows:
                rows[sid] = {}
                order.append(sid)
            series = rows[sid].setdefault(comp, {})
            if t in series:
                raise DataParseError(f"duplicate time {t} for subject {sid} component {comp}", lineno)
            series[t] = y
    if not order:
        raise InsufficientDataError(f"{path}: no observations")

    covs = {}
    if covariates_path is not None:
        with open(covariates_path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if not header or header[0] != "subject_id":
                raise DataParseError("covariate CSV must start with a subject_id column", 1)
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise DataParseError(f"expected {len(header)} columns, got {len(rec)}", lineno)
                covs[rec[0].strip()] = {h: _covariate_value(v.strip()) for h, v in zip(header[1:], rec[1:])}

    subjects = []
    for sid in order:
        series = {}
        for comp, pts in rows[sid].items():
            ts = np.array(sorted(pts))
            series[comp] = (ts, np.array([pts[t] for t in ts]))
        subjects.append(Subject(sid, series, covs.get(sid, {})))
    return Dataset(subjects)


def format_float(v):
    return repr(float(v))


def observations_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBS_COLUMNS)
    for s in dataset.subjects:
        for comp in dataset.component_names:
            if comp not in s.series:
                continue
            t, y = s.series[comp]
            for ti, yi in zip(t, y):
                w.writerow([s.id, comp, format_float(ti), format_float(yi)])
    return buf.getvalue()


def covariates_csv(dataset: Dataset) -> str:
    names = []
    for s in dataset.subjects:
        for k in s.covariates:
            if k not in names:
                names.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", *names])
    for s in dataset.subjects:
        w.writerow([s.id, *[s.covariates.get(k, "") for k in names]])
    return buf.getvalue()


def write_dataset(dataset: Dataset, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "observations.csv"), "w") as fh:
        fh.write(observations_csv(dataset))
    if any(s.covariates for s in dataset.subjects):
        with open(os.path.join(directory, "covariates.csv"), "w") as fh:
            fh.write(covariates_csv(dataset))
