import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcmle.covariance import TaperSpec, response_cov
from svcmle.linalg import (
    JITTER_STEPS,
    NotPositiveDefinite,
    SparsePattern,
    SparseSymmetricMatrix,
    cholesky,
    logdet,
    solve,
)

from conftest import random_instance


def to_sparse(A):
    """SparseSymmetricMatrix holding the nonzero upper triangle (and diagonal) of A."""
    n = A.shape[0]
    r, c = np.nonzero(np.triu(A) != 0)
    diag = np.arange(n)
    keep = r != c
    r = np.concatenate([r[keep], diag])
    c = np.concatenate([c[keep], diag])
    pattern, order = SparsePattern.from_pairs(n, r, c)
    return SparseSymmetricMatrix(pattern, A[r, c][order])


def random_spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T + n * np.eye(n)


def tapered(rng, n=500, taper=0.1):
    d, theta = random_instance(rng, n, 2)
    return response_cov(d, theta, TaperSpec(taper))


def test_identity_factor():
    f = cholesky(np.eye(3))
    np.testing.assert_array_equal(f.L, np.eye(3))
    assert not f.jittered


def test_hand_2x2():
    f = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(f.L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=1e-15)


def test_sparse_reconstruction(rng):
    S = tapered(rng)
    f = cholesky(S)
    A = S.toarray()
    rel = np.linalg.norm(f.reconstruct() - A) / np.linalg.norm(A)
    assert rel < 1e-8
    assert np.all(f.L.diagonal() > 0)


def test_logdet_examples(rng):
    assert logdet(cholesky(np.eye(5))) == 0.0
    a = rng.uniform(0.1, 5.0, 6)
    assert logdet(cholesky(np.diag(a))) == pytest.approx(np.sum(np.log(a)), abs=1e-12)
    A = random_spd(rng, 10)
    assert logdet(cholesky(A)) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(A))), abs=1e-9)
    sign, ld = np.linalg.slogdet(A)
    assert sign > 0 and logdet(cholesky(A)) == pytest.approx(ld, abs=1e-9)


def test_solve_examples(rng):
    b = rng.standard_normal(4)
    np.testing.assert_array_equal(solve(cholesky(np.eye(4)), b), b)
    A = random_spd(rng, 12)
    x = rng.standard_normal(12)
    assert np.max(np.abs(solve(cholesky(A), A @ x) - x)) < 1e-8
    r = rng.standard_normal(12)
    assert r @ solve(cholesky(A), r) == pytest.approx(r @ np.linalg.inv(A) @ r, abs=1e-9)


def test_half_solve_quadratic_form(rng):
    A = random_spd(rng, 8)
    r = rng.standard_normal(8)
    for f in (cholesky(A), cholesky(to_sparse(A))):
        w = f.half_solve(r)
        assert w @ w == pytest.approx(r @ np.linalg.solve(A, r), rel=1e-12)


def test_solve_dimension_mismatch(rng):
    f = cholesky(random_spd(rng, 5))
    with pytest.raises(ValueError):
        solve(f, np.ones(4))
    with pytest.raises(ValueError):
        cholesky(to_sparse(random_spd(rng, 5))).solve(np.ones((6, 2)))


def test_sparse_matches_dense(rng):
    S = tapered(rng)
    A = S.toarray()
    fs, fd = cholesky(S), cholesky(A)
    assert abs(fs.logdet() - fd.logdet()) < 1e-8
    B = rng.standard_normal((A.shape[0], 3))
    np.testing.assert_allclose(fs.solve(B), fd.solve(B), atol=1e-8)
    np.testing.assert_allclose(fs.solve(B[:, 0]), fd.solve(B[:, 0]), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_solve_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 15)
    x, y = rng.standard_normal((2, 15))
    for f in (cholesky(A), cholesky(to_sparse(A))):
        lhs = f.solve(a * x + b * y)
        np.testing.assert_allclose(lhs, a * f.solve(x) + b * f.solve(y), atol=1e-12)


def test_symbolic_reuse_changes_nothing(rng):
    S = tapered(rng, 300, 0.15)
    f1 = cholesky(S, reuse_symbolic=False)
    f2 = cholesky(S)
    f3 = cholesky(S.with_data(S.data * 1.0))  # second numeric pass on the cached analysis
    b = rng.standard_normal(300)
    for f in (f2, f3):
        assert f.logdet() == f1.logdet()
        np.testing.assert_array_equal(f.solve(b), f1.solve(b))


def test_jitter_applied_to_semidefinite():
    v = np.array([1.0, 2.0, 3.0])
    A = np.outer(v, v)
    f = cholesky(A)
    assert f.jittered
    assert f.jitter <= JITTER_STEPS[-1] * np.mean(np.diag(A))
    with pytest.raises(NotPositiveDefinite):
        cholesky(A, jitter=False)


def test_indefinite_raises():
    A = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        cholesky(A)
    with pytest.raises(NotPositiveDefinite):
        cholesky(to_sparse(A))


def test_factor_shared_across_threads(rng):
    from concurrent.futures import ThreadPoolExecutor

    S = tapered(rng, 200, 0.2)
    f = cholesky(S)
    B = rng.standard_normal((200, 8))
    ref = [f.solve(B[:, k]) for k in range(8)]
    with ThreadPoolExecutor(4) as ex:
        out = list(ex.map(lambda k: f.solve(B[:, k]), range(8)))
    for a, b in zip(ref, out):
        np.testing.assert_array_equal(a, b)
