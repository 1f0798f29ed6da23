import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from svcmle import CovParams, FitResult, SvcDataset
from svcmle.covariance import TaperSpec
from svcmle.prediction import (
    PredictionRequest,
    crps_gaussian,
    predict,
    write_predictions_csv,
)

from conftest import random_instance
from oracles import joint_conditional, simple_kriging


def _fit(theta, mu, taper=None):
    return FitResult.from_params(theta, np.asarray(mu, dtype=float), taper)


def test_noiseless_interpolation(rng):
    d, theta = random_instance(rng, 30, 2, nugget=0.0)
    res = predict(_fit(theta, [0.2, -0.1]), d, PredictionRequest(d.locations[:5], d.X[:5]))
    np.testing.assert_allclose(res.y_hat, d.y[:5], atol=1e-8)
    np.testing.assert_allclose(res.pred_var, 0.0, atol=1e-8)


def test_simple_kriging_oracle(rng):
    for _ in range(50):
        n, m = int(rng.integers(2, 101)), int(rng.integers(1, 21))
        d, theta = random_instance(rng, n, 1)
        new = rng.uniform(size=(m, 2))
        mu = rng.standard_normal()
        res = predict(_fit(theta, [mu]), d, PredictionRequest(new, np.ones((m, 1))))
        mean, var = simple_kriging(d.locations, d.y, new, mu, theta.rho[0], theta.sigma2[0],
                                   theta.nugget)
        np.testing.assert_allclose(res.y_hat, mean, atol=1e-8)
        np.testing.assert_allclose(res.beta_hat[:, 0], mean, atol=1e-8)
        np.testing.assert_allclose(res.pred_var, var + theta.nugget, atol=1e-8)


def test_prior_reversion_far_away(rng):
    d, theta = random_instance(rng, 40, 3)
    theta = CovParams(np.full(3, 0.05), theta.sigma2, theta.nugget)
    far = np.array([[100.0, 100.0], [-50.0, 30.0]])
    x_far = np.array([[1.0, 0.5, -2.0], [1.0, 1.5, 0.3]])
    mu = [0.1, 0.2, 0.3]
    res = predict(_fit(theta, mu), d, PredictionRequest(far, x_far))
    np.testing.assert_allclose(res.beta_hat, np.tile(mu, (2, 1)), atol=1e-12)
    np.testing.assert_allclose(res.pred_var, x_far ** 2 @ theta.sigma2 + theta.nugget, rtol=1e-12)
    tapered = predict(_fit(theta, mu, TaperSpec(0.3)), d, PredictionRequest(far, x_far))
    np.testing.assert_array_equal(tapered.beta_hat, np.tile(mu, (2, 1)))


def test_joint_conditional_oracle(rng):
    for _ in range(20):
        n, m, p = int(rng.integers(2, 41)), int(rng.integers(1, 11)), int(rng.integers(1, 4))
        d, theta = random_instance(rng, n, p)
        new = rng.uniform(size=(m, 2))
        Xn = np.column_stack([np.ones(m), rng.standard_normal((m, p - 1))])
        mu = rng.standard_normal(p)
        res = predict(_fit(theta, mu), d, PredictionRequest(new, Xn))
        beta, yhat, yvar = joint_conditional(d.locations, d.X, d.y, new, Xn, mu,
                                             theta.rho, theta.sigma2, theta.nugget)
        np.testing.assert_allclose(res.beta_hat, beta, atol=1e-8)
        np.testing.assert_allclose(res.y_hat, yhat, atol=1e-8)
        np.testing.assert_allclose(res.pred_var, yvar, atol=1e-8)


def test_beta_minus_eta_is_mu(rng):
    d, theta = random_instance(rng, 30, 3)
    mu = np.array([1.0, -2.0, 0.5])
    res = predict(_fit(theta, mu), d, PredictionRequest(rng.uniform(size=(9, 2))))
    np.testing.assert_allclose(res.beta_hat - res.eta_hat, np.tile(mu, (9, 1)), rtol=0, atol=0)
    assert res.y_hat is None and res.pred_var is None


def test_linear_in_y(rng):
    d, theta = random_instance(rng, 25, 2)
    y2 = rng.standard_normal(25)
    new = rng.uniform(size=(6, 2))
    fitted = _fit(theta, [0.0, 0.0])

    def eta(y):
        return predict(fitted, SvcDataset(y, d.X, d.locations), PredictionRequest(new)).eta_hat

    np.testing.assert_allclose(eta(2 * d.y - 3 * y2), 2 * eta(d.y) - 3 * eta(y2), atol=1e-12)


def test_residuals_shrink_with_nugget(rng):
    d, theta = random_instance(rng, 40, 2)
    gaps = []
    for tau2 in (1.0, 0.1, 0.01, 1e-3, 1e-5, 1e-8):
        th = CovParams(theta.rho, theta.sigma2, tau2)
        res = predict(_fit(th, [0.0, 0.0]), d, PredictionRequest(d.locations, d.X))
        gaps.append(np.linalg.norm(res.y_hat - d.y))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_variance_smaller_at_training_sites(rng):
    for _ in range(20):
        d, theta = random_instance(rng, 30, 2)
        x = d.X[:1]
        near = predict(_fit(theta, [0, 0]), d, PredictionRequest(d.locations[:1], x))
        far = predict(_fit(theta, [0, 0]), d, PredictionRequest([[50.0, 50.0]], x))
        assert near.pred_var[0] <= far.pred_var[0]


def test_latent_variance_drops_nugget(rng):
    d, theta = random_instance(rng, 30, 2)
    new = rng.uniform(size=(5, 2))
    Xn = np.ones((5, 2))
    req = PredictionRequest(new, Xn)
    a = predict(_fit(theta, [0, 0]), d, req)
    b = predict(_fit(theta, [0, 0]), d, req, latent=True)
    np.testing.assert_allclose(a.pred_var - b.pred_var, theta.nugget, rtol=1e-10)


def test_batches_do_not_change_results(rng):
    d, theta = random_instance(rng, 50, 2)
    req = PredictionRequest(rng.uniform(size=(37, 2)), rng.standard_normal((37, 2)))
    a = predict(_fit(theta, [0, 1]), d, req, batch_size=1024)
    b = predict(_fit(theta, [0, 1]), d, req, batch_size=5)
    np.testing.assert_allclose(a.pred_var, b.pred_var, rtol=1e-13)


def test_tapered_prediction_beyond_diameter(rng):
    d, theta = random_instance(rng, 50, 2)
    req = PredictionRequest(rng.uniform(size=(10, 2)), rng.standard_normal((10, 2)))
    a = predict(_fit(theta, [0.1, 0.2]), d, req)
    b = predict(_fit(theta, [0.1, 0.2], TaperSpec(1.5e17)), d, req)
    np.testing.assert_allclose(b.y_hat, a.y_hat, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.pred_var, a.pred_var, rtol=1e-10)


def test_errors(rng):
    d, theta = random_instance(rng, 20, 2)
    with pytest.raises(ValueError):
        predict(_fit(theta, [0, 0]), d, PredictionRequest(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        predict(_fit(theta, [0, 0]), d, PredictionRequest(np.zeros((3, 2)), np.ones((3, 1))))
    bad = _fit(theta, [0, 0])
    bad.converged = False
    with pytest.raises(ValueError):
        predict(bad, d, PredictionRequest(np.zeros((1, 2))))
    predict(bad, d, PredictionRequest(np.zeros((1, 2))), allow_unconverged=True)


def test_write_predictions(tmp_path, rng):
    d, theta = random_instance(rng, 20, 2)
    res = predict(_fit(theta, [0, 0]), d, PredictionRequest(np.zeros((2, 2)), np.ones((2, 2))))
    write_predictions_csv(tmp_path / "p.csv", res)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "s1,s2,beta_1,beta_2,y_hat,pred_sd"
    assert len(lines) == 3


# CRPS ------------------------------------------------------------------------


def test_crps_at_zero():
    expected = 2 * norm.pdf(0) - 1 / math.sqrt(math.pi)
    assert abs(crps_gaussian(0.0, 0.0, 1.0) - expected) < 1e-12
    assert crps_gaussian(0.0, 0.0, 1.0) == pytest.approx(0.23370, abs=1e-5)


def test_crps_point_mass_limit():
    assert crps_gaussian(1.0, 1.0, 1e-12) < 1e-12
    assert crps_gaussian(3.0, 1.0, 1e-12) == pytest.approx(2.0, abs=1e-10)


def test_crps_matches_numerical_integral():
    from scipy.integrate import quad

    y, m, s = 0.7, -0.2, 1.3
    val = quad(lambda t: (norm.cdf(t, m, s) - (t >= y)) ** 2, -30, 30, points=[y])[0]
    assert crps_gaussian(y, m, s) == pytest.approx(val, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(y=st.floats(-50, 50), m=st.floats(-50, 50), s=st.floats(1e-3, 20), a=st.floats(1e-3, 1e3))
def test_crps_homogeneous(y, m, s, a):
    assert crps_gaussian(a * y, a * m, a * s) == pytest.approx(a * crps_gaussian(y, m, s),
                                                               rel=1e-9, abs=1e-12)
    assert crps_gaussian(y, m, s) >= 0


def test_crps_rejects_bad_sd():
    with pytest.raises(ValueError):
        crps_gaussian(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        crps_gaussian(0.0, 0.0, -1.0)
    out = crps_gaussian(np.zeros(4), np.zeros(4), np.ones(4))
    assert out.shape == (4,)
