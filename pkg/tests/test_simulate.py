import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magime.errors import BlowUpError, InvalidArgumentError
from magime.models import builtin
from magime.protocols import available_protocols, builtin_protocol, load_protocol
from magime.simulate import SimProtocol, generate_dataset, rk_solve, trajectory_mse

from oracles import bateman, exponential_decay


def test_rk4_matches_exponential_decay():
    t = np.linspace(0, 1, 21)
    got = rk_solve(builtin("population_growth"), [3.0], [1.0], t)[:, 0]
    assert np.max(np.abs(got - exponential_decay(t, 3.0, 1.0))) < 1e-7


def test_rk4_matches_bateman_solution():
    t = np.array([0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0])
    got = rk_solve(builtin("pk_bateman"), [0.3, 1.0, 22.45], [0.3], t, {"dose": 400.0})[:, 0]
    assert np.max(np.abs(got - bateman(t, 0.3, 1.0, 22.45, 400.0, 0.3))) < 1e-7


def test_rk4_is_fourth_order():
    t = np.array([0.0, 1.0])
    model = builtin("population_growth")
    exact = exponential_decay(1.0, 3.0, 1.0)
    e1 = abs(rk_solve(model, [3.0], [1.0], t, max_step=0.1)[-1, 0] - exact)
    e2 = abs(rk_solve(model, [3.0], [1.0], t, max_step=0.05)[-1, 0] - exact)
    assert 12 <= e1 / e2 <= 20


def test_rk4_lands_on_uneven_times():
    t = np.array([0.0, 0.013, 0.5, 0.51, 2.0])
    got = rk_solve(builtin("population_growth"), [1.0], [2.0], t)[:, 0]
    np.testing.assert_allclose(got, exponential_decay(t, 1.0, 2.0), atol=1e-9)


def test_blow_up_reports_last_time():
    with pytest.raises(BlowUpError) as err:
        rk_solve(builtin("population_growth"), [-800.0], [1.0], [0.0, 10.0])
    assert 0.0 <= err.value.last_time < 10.0


@pytest.mark.parametrize("times,x0", [([], [1.0]), ([0.0, 0.0], [1.0]), ([0.0, 1.0], [1.0, 2.0]),
                                      ([0.0, 1.0], [np.nan])])
def test_rk_solve_rejects_bad_input(times, x0):
    with pytest.raises(InvalidArgumentError):
        rk_solve(builtin("population_growth"), [1.0], x0, times)


@pytest.mark.parametrize("name,shape", [("population_growth", (20, 21, 1)), ("forced_vdp", (25, 21, 1)),
                                        ("fitzhugh_nagumo", (25, 41, 2)), ("pk_group1", (16, 12, 1)),
                                        ("pk_group2", (15, 12, 1))])
def test_builtin_protocol_shapes(name, shape):
    proto, fit = builtin_protocol(name)
    ds, truth = generate_dataset(proto, seed=1)
    assert truth.trajectories.shape == shape
    assert ds.n_subjects == shape[0]
    assert all(s.n_obs() == shape[1] * shape[2] for s in ds.subjects)
    assert fit["model"] == proto.model


def test_fitzhugh_nagumo_has_two_observed_components():
    proto, _ = builtin_protocol("fitzhugh_nagumo")
    ds, _ = generate_dataset(proto)
    assert ds.component_names == ("V", "R") or len(ds.component_names) == 2
    assert ds.subjects[0].times(ds.component_names[1]).size == 41


def test_pk_draws_are_positive_and_carry_dose():
    proto, _ = builtin_protocol("pk_group2")
    ds, truth = generate_dataset(proto, seed=9)
    assert np.all(truth.theta > 0)
    assert np.all(truth.theta[:, 0] == pytest.approx(0.27))
    assert all(s.covariates["dose"] == 600.0 for s in ds.subjects)


def test_same_seed_same_data_and_subject_streams_are_independent():
    proto, _ = builtin_protocol("population_growth")
    a, ta = generate_dataset(proto, seed=4)
    b, tb = generate_dataset(proto, seed=4)
    np.testing.assert_array_equal(ta.theta, tb.theta)
    assert a.to_dict() == b.to_dict()
    c, tc = generate_dataset(proto, seed=5)
    assert not np.array_equal(ta.theta, tc.theta)
    proto.n_subjects = 5
    _, short = generate_dataset(proto, seed=4)
    np.testing.assert_array_equal(short.theta, ta.theta[:5])


def test_trajectory_mse_is_zero_at_truth_and_quadratic_in_offset():
    proto, _ = builtin_protocol("population_growth")
    _, truth = generate_dataset(proto, seed=3)
    model = builtin("population_growth")
    mse0, flags = trajectory_mse(truth.theta, truth.x0, truth, model)
    assert mse0 == 0.0 and not any(flags)
    m1, _ = trajectory_mse(truth.theta, truth.x0 + 0.01, truth, model)
    m2, _ = trajectory_mse(truth.theta, truth.x0 + 0.02, truth, model)
    assert m2 / m1 == pytest.approx(4.0, rel=1e-9)


def test_trajectory_mse_flags_blow_up():
    proto, _ = builtin_protocol("population_growth")
    proto.n_subjects = 2
    _, truth = generate_dataset(proto)
    mse, flags = trajectory_mse(np.array([[-900.0], truth.theta[1]]), truth.x0, truth, builtin("population_growth"))
    assert mse == np.inf and flags == [True, False]


def test_protocol_validation():
    with pytest.raises(InvalidArgumentError):
        SimProtocol(model="population_growth", eta=[1.0], sigma_b_true=[[-1.0]], x0_mean=[1.0], x0_sd=[0.0],
                    noise_sd=[0.1], obs_times=[0, 1], n_subjects=2)
    with pytest.raises(InvalidArgumentError):
        SimProtocol.from_dict({"model": "population_growth", "bogus": 1})
    with pytest.raises(InvalidArgumentError):
        builtin_protocol("no_such_protocol")


def test_protocol_file_override(tmp_path):
    path = tmp_path / "p.yaml"
    path.write_text("base: population_growth\nprotocol:\n  n_subjects: 3\n")
    proto, fit = load_protocol(str(path))
    assert proto.n_subjects == 3 and proto.eta[0] == 3.0 and fit["level"] == 1
    assert "population_growth" in available_protocols()


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(0.1, 5.0), x0=st.floats(-3.0, 3.0), span=st.floats(0.1, 3.0))
def test_rk4_decay_property(theta, x0, span):
    t = np.linspace(0, span, 7)
    got = rk_solve(builtin("population_growth"), [theta], [x0], t)[:, 0]
    assert np.max(np.abs(got - exponential_decay(t, theta, x0))) < 1e-7 * max(1.0, abs(x0))
