import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magime.data import Dataset, Subject, read_observations, write_dataset
from magime.errors import DataParseError, InsufficientDataError


def write(tmp_path, text, name="obs.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_roundtrip_with_covariates(tmp_path):
    ds = Dataset([
        Subject("a", {"C": (np.array([0.0, 0.5, 2.0]), np.array([0.1, 1.25, 0.7]))}, {"dose": 400.0, "group": "g1"}),
        Subject("b", {"C": (np.array([0.0, 1.0]), np.array([0.3, 1e-17]))}, {"dose": 600.0, "group": "g2"}),
    ])
    write_dataset(ds, tmp_path / "d")
    back = read_observations(str(tmp_path / "d"))
    assert back.to_dict() == ds.to_dict()
    groups = back.split_by("group")
    assert sorted(groups) == ["g1", "g2"] and groups["g2"].subjects[0].id == "b"


def test_missing_rows_mean_missing_measurements(tmp_path):
    path = write(tmp_path, "subject_id,component,time,value\ns1,V,0,1\ns1,R,0.5,2\ns1,V,1,3\n")
    ds = read_observations(path)
    s = ds.subjects[0]
    np.testing.assert_array_equal(s.times("V"), [0.0, 1.0])
    np.testing.assert_array_equal(s.times("R"), [0.5])
    np.testing.assert_array_equal(s.all_times(), [0.0, 0.5, 1.0])
    assert ds.component_names == ("V", "R")


def test_rows_are_sorted_by_time(tmp_path):
    path = write(tmp_path, "subject_id,component,time,value\ns1,x,2,20\ns1,x,1,10\n")
    s = read_observations(path).subjects[0]
    np.testing.assert_array_equal(s.values("x"), [10.0, 20.0])


@pytest.mark.parametrize("body,line", [
    ("s1,x,0,1\ns1,x,oops,2\n", 3),
    ("s1,x,0,1\ns1,x,0,2\n", 3),
    ("s1,x,0\n", 2),
    ("s1,x,0,nan\n", 2),
    ("s1,x,inf,1\n", 2),
])
def test_parse_errors_carry_line_numbers(tmp_path, body, line):
    path = write(tmp_path, "subject_id,component,time,value\n" + body)
    with pytest.raises(DataParseError) as err:
        read_observations(path)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_bad_header(tmp_path):
    with pytest.raises(DataParseError) as err:
        read_observations(write(tmp_path, "id,comp,t,y\n"))
    assert err.value.line == 1


def test_empty_inputs(tmp_path):
    with pytest.raises(InsufficientDataError):
        read_observations(write(tmp_path, ""))
    with pytest.raises(InsufficientDataError):
        read_observations(write(tmp_path, "subject_id,component,time,value\n"))


def test_covariate_file_errors(tmp_path):
    obs = write(tmp_path, "subject_id,component,time,value\ns1,x,0,1\n")
    with pytest.raises(DataParseError):
        read_observations(obs, write(tmp_path, "dose\n400\n", "cov.csv"))
    with pytest.raises(DataParseError) as err:
        read_observations(obs, write(tmp_path, "subject_id,dose\ns1,400,9\n", "cov.csv"))
    assert err.value.line == 2


def test_dataset_validation():
    with pytest.raises(DataParseError):
        Dataset([Subject("a", {"x": (np.array([1.0, 0.0]), np.array([1.0, 2.0]))})])
    with pytest.raises(DataParseError):
        Dataset([Subject("a", {"x": (np.array([0.0]), np.array([1.0, 2.0]))})])


@settings(max_examples=40, deadline=None)
@given(values=st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False), min_size=1, max_size=15),
       seed=st.integers(0, 1000))
def test_csv_roundtrip_is_exact(tmp_path_factory, values, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.01, 1.0, len(values)))
    ds = Dataset([Subject("s1", {"x": (t, np.array(values))})])
    d = tmp_path_factory.mktemp("rt")
    write_dataset(ds, d)
    back = read_observations(str(d))
    np.testing.assert_array_equal(back.subjects[0].values("x"), values)
    np.testing.assert_array_equal(back.subjects[0].times("x"), t)
