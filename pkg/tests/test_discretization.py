import numpy as np
import pytest

from magime.discretization import build_grid
from magime.errors import InvalidArgumentError
from magime.protocols import PK_OBS_TIMES


def test_one_insertion_halves_the_step():
    g = build_grid([0, 1, 2], 1)
    assert g.points.tolist() == [0, 0.5, 1, 1.5, 2]
    assert g.indices_of([0, 1, 2]).tolist() == [0, 2, 4]


def test_level_zero_is_identity():
    assert build_grid([0, 1, 2], 0).points.tolist() == [0, 1, 2]


def test_irregular_observations_use_common_step():
    g = build_grid([0.0, 0.5, 2.0], 0)
    assert g.points.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert g.step == 0.5


def test_pk_grid_extended_to_eighteen_hours():
    g = build_grid(PK_OBS_TIMES, 2, horizon=(18.0, 0.125))
    expected = np.arange(0, 18.0001, 0.125)
    np.testing.assert_allclose(g.points, expected, atol=1e-12)
    assert g.points[g.horizon_start - 1] == 12.0
    assert g.points[g.horizon_start] == 12.125
    assert g.indices_of(PK_OBS_TIMES).tolist() == [int(t * 8) for t in PK_OBS_TIMES]


def test_observation_times_are_exact_grid_values():
    obs = np.linspace(0.0, 1.0, 21)
    g = build_grid(obs, 2)
    assert np.all(g.points[g.indices_of(obs)] == obs)
    assert len(g) == 81


def test_horizon_at_last_observation_adds_nothing():
    g = build_grid([0, 1, 2], 1, horizon=(2.0, 0.5))
    assert g.horizon_start is None and len(g) == 5


@pytest.mark.parametrize("obs,level", [([], 0), ([1.0, 0.0], 0), ([0.0, 0.0], 0), ([0, 1], -1), ([0, 1], 0.5)])
def test_invalid_inputs(obs, level):
    with pytest.raises(InvalidArgumentError):
        build_grid(obs, level)


def test_unknown_time_lookup_fails():
    with pytest.raises(InvalidArgumentError):
        build_grid([0, 1, 2], 1).indices_of([0.5])
