import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcmle.covariance import TaperSpec
from svcmle.model import (
    ColumnRoles,
    CovParams,
    FitResult,
    SvcDataset,
    pack,
    pack_joint,
    read_dataset_csv,
    unpack,
    unpack_joint,
    validate_dataset,
    write_dataset_csv,
)
from svcmle.simulation import SIM12_TRUTH

ULP = np.finfo(float).eps


def test_pack_ones_is_zero():
    np.testing.assert_array_equal(pack(CovParams([1, 1, 1], [1, 1, 1], 1)), np.zeros(7))


def test_pack_simulation_truth_order():
    theta = SIM12_TRUTH.cov_params()
    expected = np.log([0.1, 0.2, 0.2, 0.1, 0.15, 0.05, 0.03])
    np.testing.assert_array_equal(pack(theta), expected)
    back = unpack(expected, 3)
    np.testing.assert_allclose(back.rho, [0.1, 0.2, 0.15], rtol=32 * ULP)
    np.testing.assert_allclose(back.sigma2, [0.2, 0.1, 0.05], rtol=32 * ULP)
    assert back.nugget == pytest.approx(0.03, rel=32 * ULP)


positive = st.floats(1e-6, 1e6)


@settings(max_examples=100, deadline=None)
@given(p=st.integers(1, 6), data=st.data())
def test_pack_roundtrip(p, data):
    rho = data.draw(st.lists(positive, min_size=p, max_size=p))
    s2 = data.draw(st.lists(positive, min_size=p, max_size=p))
    theta = CovParams(rho, s2, data.draw(positive))
    back = unpack(pack(theta), p)
    # exp(log(x)) is within a few ulp of x, not always bitwise equal
    np.testing.assert_allclose(back.rho, theta.rho, rtol=32 * ULP)
    np.testing.assert_allclose(back.sigma2, theta.sigma2, rtol=32 * ULP)
    assert back.nugget == pytest.approx(theta.nugget, rel=32 * ULP)
    assert np.all(back.rho > 0) and np.all(back.sigma2 > 0) and back.nugget > 0
    v = pack(theta)
    np.testing.assert_allclose(pack(unpack(v, p)), v, atol=4 * ULP * np.max(np.abs(v)) + 1e-300)


def test_unpack_length_mismatch():
    with pytest.raises(ValueError):
        unpack(np.zeros(6), 3)


def test_joint_packing():
    theta = CovParams([0.1, 0.2], [0.3, 0.4], 0.05)
    v = pack_joint(theta, [1.5, -2.0])
    assert v.shape == (7,)
    t2, mu = unpack_joint(v, 2)
    np.testing.assert_array_equal(mu, [1.5, -2.0])
    np.testing.assert_allclose(t2.rho, theta.rho, rtol=32 * ULP)


def test_covparams_validation():
    with pytest.raises(ValueError):
        CovParams([0.0], [1.0], 0.1)
    with pytest.raises(ValueError):
        CovParams([0.1, 0.2], [1.0], 0.1)
    with pytest.raises(ValueError):
        CovParams([0.1], [np.inf], 0.1)


def _clean(n=20, p=2, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    return SvcDataset(rng.standard_normal(n), X, rng.uniform(size=(n, 2)))


def test_validate_clean():
    assert validate_dataset(_clean()) == []


def test_validate_zero_column():
    d = _clean()
    X = d.X.copy()
    X[:, 1] = 0.0
    kinds = [f.kind for f in validate_dataset(SvcDataset(d.y, X, d.locations))]
    assert "degenerate covariate" in kinds


def test_validate_duplicate_location_is_info():
    d = _clean()
    locs = d.locations.copy()
    locs[3] = locs[7]
    found = validate_dataset(SvcDataset(d.y, d.X, locs))
    assert [(f.kind, f.severity) for f in found] == [("duplicate locations", "info")]


def test_validate_nan_and_small_n():
    d = _clean(n=3, p=2)
    y = d.y.copy()
    y[0] = np.nan
    kinds = {f.kind for f in validate_dataset(SvcDataset(y, d.X, d.locations))}
    assert "nan" in kinds
    d1 = SvcDataset([1.0], np.ones((1, 2)), [[0.0, 0.0]])
    assert "n < p" in {f.kind for f in validate_dataset(d1)}


def test_dataset_is_read_only():
    d = _clean()
    with pytest.raises(ValueError):
        d.y[0] = 1.0


def test_fit_result_json_roundtrip(tmp_path):
    theta = CovParams([0.1234567890123, 0.2], [1 / 3, 0.1], 0.03)
    res = FitResult(theta, np.array([0.1, -1 / 7]), -123.456, True, 12, 300, 1, 3e-6,
                    "ok", taper=TaperSpec(0.2), regularized=True, metadata={"a": 1})
    res.to_json(tmp_path / "f.json")
    back = FitResult.from_json(tmp_path / "f.json")
    assert back.theta_hat == theta
    np.testing.assert_array_equal(back.mu_hat, res.mu_hat)
    assert back.taper == TaperSpec(0.2)
    assert back.objective == res.objective and back.metadata == {"a": 1}
    untapered = FitResult.from_params(theta, [0, 0])
    untapered.to_json(tmp_path / "g.json")
    assert not FitResult.from_json(tmp_path / "g.json").taper.active


def test_csv_roundtrip(tmp_path):
    d = _clean(10, 3)
    d = SvcDataset(d.y, d.X, d.locations, np.arange(10) % 3)
    write_dataset_csv(tmp_path / "d.csv", d)
    back = read_dataset_csv(tmp_path / "d.csv", ColumnRoles(time="period"))
    np.testing.assert_array_equal(back.y, d.y)
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.locations, d.locations)
    np.testing.assert_array_equal(back.time, d.time)


def test_csv_roles(tmp_path):
    (tmp_path / "d.csv").write_text("price,a,b,lon,lat\n1,1,2,0.1,0.2\n2,1,3,0.3,0.4\n")
    d = read_dataset_csv(tmp_path / "d.csv", ColumnRoles("price", ("a", "b"), ("lon", "lat")))
    np.testing.assert_array_equal(d.X, [[1, 2], [1, 3]])
    with pytest.raises(KeyError):
        read_dataset_csv(tmp_path / "d.csv", ColumnRoles("y", ("a",), ("lon", "lat")))
