"""Dense and sparse symmetric factorization kernels.

Response covariance matrices arrive either as dense ``numpy`` arrays or as
:class:`SparseSymmetricMatrix` objects whose sparsity pattern is fixed by the
locations and the taper range. Both are factorized by :func:`cholesky`, which
returns an immutable factor exposing ``logdet``, ``solve`` and ``half_solve``.

The sparse path uses an approximate-minimum-degree ordered LDL' factorization
(``qdldl``). The symbolic analysis is attached to the pattern and reused for
every numeric refactorization with new values.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import qdldl
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

__all__ = [
    "NotPositiveDefinite",
    "JITTER_STEPS",
    "SparsePattern",
    "SparseSymmetricMatrix",
    "DenseCholesky",
    "SparseCholesky",
    "cholesky",
    "logdet",
    "solve",
]

#: Relative diagonal jitter tried, in order, after a failed factorization.
JITTER_STEPS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even after diagonal jitter."""


# ---------------------------------------------------------------------------
# Sparse storage
# ---------------------------------------------------------------------------


class _Symbolic:
    """Reusable symbolic factorization for one sparsity pattern."""

    def __init__(self):
        self._solver = None
        self._lock = threading.Lock()

    def factorize(self, upper: sp.csc_matrix):
        with self._lock:
            try:
                if self._solver is None:
                    self._solver = qdldl.Solver(upper, upper=True)
                else:
                    self._solver.update(upper, upper=True)
            except RuntimeError:
                # a failed numeric phase can leave the solver in a bad state
                self._solver = None
                raise
            return self._solver.factors()


@dataclass(frozen=True, eq=False)
class SparsePattern:
    """Upper-triangular CSC structure (diagonal included) of a symmetric matrix.

    Attributes
    ----------
    n : int
        Matrix order.
    indptr, indices : ndarray
        CSC structure of the upper triangle, row indices sorted per column.
    diag_pos : ndarray
        Position of each diagonal entry in the data array.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    diag_pos: np.ndarray
    _symbolic: _Symbolic = field(default_factory=_Symbolic, repr=False)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @classmethod
    def from_pairs(cls, n: int, rows: np.ndarray, cols: np.ndarray):
        """Build a pattern from upper-triangular pairs ``rows <= cols``.

        Every diagonal pair must be present exactly once. Returns the pattern
        and the permutation ``order`` such that ``values[order]`` lays pair
        values out in CSC data order.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if np.any(rows > cols):
            raise ValueError("pairs must satisfy row <= col")
        order = np.lexsort((rows, cols))
        r, c = rows[order], cols[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, c + 1, 1)
        np.cumsum(indptr, out=indptr)
        diag_pos = np.flatnonzero(r == c)
        if diag_pos.size != n or np.any(r[diag_pos] != np.arange(n)):
            raise ValueError("pattern must contain every diagonal entry once")
        pattern = cls(n, indptr, r.astype(np.int32), diag_pos)
        return pattern, order


@dataclass(frozen=True, eq=False)
class SparseSymmetricMatrix:
    """Symmetric matrix stored as values on a fixed upper-triangular pattern."""

    pattern: SparsePattern
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.pattern.nnz,):
            raise ValueError("data length does not match pattern")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.pattern.n, self.pattern.n)

    @property
    def nnz(self) -> int:
        return self.pattern.nnz

    def diagonal(self) -> np.ndarray:
        return self.data[self.pattern.diag_pos]

    def upper(self) -> sp.csc_matrix:
        p = self.pattern
        return sp.csc_matrix((self.data, p.indices, p.indptr), shape=self.shape)

    def tocsc(self) -> sp.csc_matrix:
        """Full symmetric matrix in CSC format."""
        u = self.upper()
        strict = sp.triu(u, k=1)
        return (u + strict.T).tocsc()

    def toarray(self) -> np.ndarray:
        return self.tocsc().toarray()

    def with_data(self, data: np.ndarray) -> "SparseSymmetricMatrix":
        return SparseSymmetricMatrix(self.pattern, np.asarray(data, dtype=float))


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseCholesky:
    """Dense lower Cholesky factor ``A + jitter*I = L L'``."""

    L: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def jittered(self) -> bool:
        return self.jitter > 0.0

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def half_solve(self, B):
        """Return ``L^{-1} B`` so that ``||L^{-1} b||^2 = b' A^{-1} b``."""
        B = _check_rhs(B, self.n)
        return sla.solve_triangular(self.L, B, lower=True, check_finite=False)

    def solve(self, B):
        B = _check_rhs(B, self.n)
        return sla.cho_solve((self.L, True), B, check_finite=False)

    def reconstruct(self) -> np.ndarray:
        return self.L @ self.L.T


@dataclass(frozen=True)
class SparseCholesky:
    """Sparse factor ``P A P' = Lu D Lu'`` with unit lower ``Lu``.

    ``perm`` is the fill-reducing ordering: row ``k`` of the permuted matrix is
    row ``perm[k]`` of ``A``.
    """

    Lu: sp.csr_matrix
    d: np.ndarray
    perm: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.d.size

    @property
    def jittered(self) -> bool:
        return self.jitter > 0.0

    @property
    def L(self) -> sp.csc_matrix:
        """Cholesky factor of the permuted matrix, ``Lu diag(sqrt(d))``."""
        return (self.Lu @ sp.diags(np.sqrt(self.d))).tocsc()

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def half_solve(self, B):
        B = _check_rhs(B, self.n)
        z = spsolve_triangular(self.Lu, B[self.perm], lower=True,
                               unit_diagonal=True)
        sd = np.sqrt(self.d)
        return z / (sd if z.ndim == 1 else sd[:, None])

    def solve(self, B):
        B = _check_rhs(B, self.n)
        z = spsolve_triangular(self.Lu, B[self.perm], lower=True,
                               unit_diagonal=True)
        z = z / (self.d if z.ndim == 1 else self.d[:, None])
        x = spsolve_triangular(self.Lu.T.tocsr(), z, lower=False,
                               unit_diagonal=True)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def reconstruct(self) -> np.ndarray:
        """Dense ``A`` rebuilt from the factor (testing aid)."""
        L = self.L.toarray()
        PAP = L @ L.T
        out = np.empty_like(PAP)
        out[np.ix_(self.perm, self.perm)] = PAP
        return out


def _check_rhs(B, n):
    B = np.asarray(B, dtype=float)
    if B.ndim not in (1, 2) or B.shape[0] != n:
        raise ValueError(f"right-hand side with leading dimension {B.shape[0] if B.ndim else 0} "
                         f"is not conformable with order {n}")
    return B


# ---------------------------------------------------------------------------
# Factorization with jitter policy
# ---------------------------------------------------------------------------


def _dense_factor(A, jitter):
    M = A if jitter == 0.0 else A + jitter * np.eye(A.shape[0])
    try:
        L = sla.cholesky(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)):
        return None
    return DenseCholesky(L, jitter)


def _sparse_factor(A: SparseSymmetricMatrix, jitter, reuse_symbolic):
    data = A.data
    if jitter:
        data = data.copy()
        data[A.pattern.diag_pos] += jitter
    upper = sp.csc_matrix((data, A.pattern.indices, A.pattern.indptr),
                          shape=A.shape)
    symbolic = A.pattern._symbolic if reuse_symbolic else _Symbolic()
    try:
        Lstrict, d, perm = symbolic.factorize(upper)
    except RuntimeError:
        return None
    if not (np.all(d > 0) and np.all(np.isfinite(d))):
        return None
    n = A.shape[0]
    Lu = (Lstrict + sp.eye(n, format="csc")).tocsr()
    return SparseCholesky(Lu, np.array(d), np.asarray(perm, dtype=np.int64), jitter)


def cholesky(A, *, jitter=True, reuse_symbolic=True):
    """Factorize a symmetric positive definite matrix.

    Parameters
    ----------
    A : ndarray or SparseSymmetricMatrix
        Matrix to factorize. Only the lower (dense) or stored upper (sparse)
        triangle is referenced.
    jitter : bool, optional
        On failure retry with ``eps * mean(diag(A))`` added to the diagonal for
        each ``eps`` in :data:`JITTER_STEPS`.
    reuse_symbolic : bool, optional
        Sparse path only: reuse the ordering and symbolic analysis cached on
        the pattern. Disabling it never changes numeric results.

    Returns
    -------
    DenseCholesky or SparseCholesky

    Raises
    ------
    NotPositiveDefinite
        If every jitter level fails.
    """
    if isinstance(A, SparseSymmetricMatrix):
        diag = A.diagonal()
        attempt = lambda j: _sparse_factor(A, j, reuse_symbolic)  # noqa: E731
    else:
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError("expected a nonempty square matrix")
        diag = np.diag(A)
        attempt = lambda j: _dense_factor(A, j)  # noqa: E731

    f = attempt(0.0)
    if f is not None:
        return f
    if jitter:
        scale = float(np.mean(diag))
        if np.isfinite(scale) and scale > 0:
            for eps in JITTER_STEPS:
                f = attempt(eps * scale)
                if f is not None:
                    return f
    raise NotPositiveDefinite("matrix is not numerically positive definite")


def logdet(f) -> float:
    """Log-determinant ``2 sum log L_ii`` of a factorized matrix."""
    return f.logdet()


def solve(f, B):
    """Return ``A^{-1} B`` using two triangular solves."""
    return f.solve(B)
