"""Discretization grids that contain every observation time.

Level 0 is the smallest evenly spaced set covering the observation times; its
step is the greatest common divisor of the gaps, computed exactly on a
rational lattice.  Level ``k`` splits every level-0 interval into ``2**k``
equal pieces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import GridConstructionError, InvalidArgumentError

MAX_DENOMINATOR = 10 ** 6
TOLERANCE = 1e-9


@dataclass
class Grid:
    points: np.ndarray
    obs_index: dict = field(default_factory=dict)
    horizon_start: int | None = None
    step: float = 0.0

    def __len__(self):
        return self.points.size

    def indices_of(self, times):
        """Grid indices of the given observation times (exact lookup)."""
        try:
            return np.array([self.obs_index[float(t)] for t in times], dtype=int)
        except KeyError as exc:
            raise InvalidArgumentError(f"time {exc.args[0]} is not an observation time of this grid") from None


def _to_fraction(t):
    f = Fraction(float(t)).limit_denominator(MAX_DENOMINATOR)
    if abs(float(f) - float(t)) > TOLERANCE:
        raise GridConstructionError(
            f"observation time {t!r} is not representable on a rational lattice with "
            f"denominator <= {MAX_DENOMINATOR}; round the times (e.g. to 6 decimals)"
        )
    return f


def _fraction_gcd(a: Fraction, b: Fraction) -> Fraction:
    den = a.denominator * b.denominator // math.gcd(a.denominator, b.denominator)
    return Fraction(math.gcd(int(a * den), int(b * den)), den)


def base_step(obs_times) -> Fraction:
    fr = sorted(_to_fraction(t) for t in obs_times)
    step = Fraction(0)
    for a, b in zip(fr[:-1], fr[1:]):
        step = _fraction_gcd(step, b - a) if step else b - a
    return step


def build_grid(obs_times, refinement_level: int = 0, horizon=None) -> Grid:
    """Build a grid containing ``obs_times``.

    Parameters
    ----------
    obs_times : sequence of float
        Sorted, distinct observation times.
    refinement_level : int
        Number of halvings of the level-0 step.
    horizon : tuple (t_end, step), optional
        Appends equally spaced prediction points in ``(max(obs_times), t_end]``.
    """
    obs = np.asarray(obs_times, dtype=float).reshape(-1)
    if obs.size == 0:
        raise InvalidArgumentError("obs_times must be non-empty")
    if not np.all(np.isfinite(obs)):
        raise InvalidArgumentError("obs_times must be finite")
    if np.any(np.diff(obs) <= 0):
        raise InvalidArgumentError("obs_times must be sorted and distinct")
    if int(refinement_level) != refinement_level or refinement_level < 0:
        raise InvalidArgumentError("refinement_level must be a non-negative integer")

    fr = [_to_fraction(t) for t in obs]
    start = fr[0]
    if len(fr) == 1:
        step = Fraction(0)
        lattice = [start]
    else:
        step = base_step(obs) / (2 ** int(refinement_level))
        count = int((fr[-1] - start) / step)
        lattice = [start + i * step for i in range(count + 1)]

    points = [float(p) for p in lattice]
    obs_index = {}
    for t, f in zip(obs, fr):
        i = int((f - start) / step) if step else 0
        points[i] = float(t)
        obs_index[float(t)] = i

    horizon_start = None
    if horizon is not None:
        t_end, h = horizon
        h_fr = _to_fraction(h)
        if h_fr <= 0:
            raise InvalidArgumentError("horizon step must be positive")
        end_fr = _to_fraction(t_end)
        extra = []
        k = 1
        while fr[-1] + k * h_fr <= end_fr:
            extra.append(float(fr[-1] + k * h_fr))
            k += 1
        if extra:
            horizon_start = len(points)
            points.extend(extra)

    return Grid(points=np.array(points), obs_index=obs_index, horizon_start=horizon_start,
                step=float(step))
