"""Matérn covariances, compactly supported tapers and response covariance assembly.

The response covariance of an SVC model is assembled covariate by covariate,

    Sigma_Y = sum_j (Sigma_j * x_j x_j') + tau^2 I,

with ``*`` the elementwise product. With a taper, every covariance is further
multiplied by a compactly supported correlation so that pairs farther apart
than the taper range are structurally zero.
"""

from __future__ import annotations

import threading
import weakref
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaln, kv

from .linalg import SparsePattern, SparseSymmetricMatrix

__all__ = [
    "MaternParams",
    "TaperSpec",
    "NO_TAPER",
    "matern_cov",
    "matern_corr",
    "taper_weight",
    "check_taper",
    "as_locations",
    "neighbor_pairs",
    "cov_matrix",
    "ResponseCovariance",
    "response_assembler",
    "response_cov",
]

TAPER_FAMILIES = ("wendland1", "spherical", "none")
# largest Matérn smoothness for which each taper keeps the product positive definite
_TAPER_MAX_NU = {"wendland1": 1.5, "spherical": 0.5, "none": np.inf}


@dataclass(frozen=True)
class MaternParams:
    """Range, marginal variance and (fixed) smoothness of one Matérn process."""

    rho: float
    sigma2: float
    nu: float = 0.5

    def __post_init__(self):
        for name in ("rho", "sigma2", "nu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class TaperSpec:
    """Compactly supported taper: ``family`` in {wendland1, spherical, none}."""

    taper_range: float = np.inf
    family: str = "wendland1"

    def __post_init__(self):
        if self.family not in TAPER_FAMILIES:
            raise ValueError(f"unknown taper family {self.family!r}")
        if self.family != "none" and not (self.taper_range > 0):
            raise ValueError("taper_range must be positive")

    @property
    def active(self) -> bool:
        return self.family != "none" and np.isfinite(self.taper_range)


NO_TAPER = TaperSpec(np.inf, "none")


def _as_taper(taper):
    return NO_TAPER if taper is None else taper


def check_taper(taper, nus) -> None:
    """Reject taper families that are not valid for the given smoothness values."""
    taper = _as_taper(taper)
    if not taper.active:
        return
    limit = _TAPER_MAX_NU[taper.family]
    bad = [nu for nu in np.atleast_1d(nus) if nu > limit]
    if bad:
        raise ValueError(
            f"taper family {taper.family!r} requires smoothness <= {limit}, got {bad}")


# ---------------------------------------------------------------------------
# Scalar/vectorized kernels
# ---------------------------------------------------------------------------


def _matern_unit(t, nu):
    """Matérn correlation as a function of the scaled distance t = sqrt(2 nu) r / rho."""
    if nu == 0.5:
        return np.exp(-t)
    if nu == 1.5:
        return (1.0 + t) * np.exp(-t)
    if nu == 2.5:
        return (1.0 + t + t * t / 3.0) * np.exp(-t)
    return _matern_unit_bessel(t, nu)


def _matern_unit_bessel(t, nu):
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    pos = t > 0
    tp = t[pos]
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        logc = (1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(tp)
        val = np.exp(logc) * kv(nu, tp)
    # kv underflows to 0 for large t, exp(logc) may overflow there
    val[~np.isfinite(val)] = 0.0
    out[pos] = val
    return out


def matern_corr(r, rho, nu=0.5, *, method="auto"):
    """Matérn correlation at distance(s) ``r`` (unit marginal variance)."""
    r = np.asarray(r, dtype=float)
    if np.any(np.isnan(r)) or np.isnan(rho) or np.isnan(nu):
        raise ValueError("NaN input to Matérn covariance")
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    t = np.sqrt(2.0 * nu) * r / rho
    if method == "bessel":
        return _matern_unit_bessel(t, nu)
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    return _matern_unit(t, nu)


def matern_cov(r, p: MaternParams, *, method="auto"):
    """Matérn covariance ``sigma2 * corr(r)``.

    ``method="bessel"`` forces the general Bessel-K branch even where a closed
    form exists. At ``r = 0`` the value is ``sigma2`` exactly.
    """
    c = p.sigma2 * matern_corr(r, p.rho, p.nu, method=method)
    return float(c) if np.ndim(c) == 0 else c


def taper_weight(r, t: TaperSpec):
    """Taper correlation at distance(s) ``r``; exactly zero for ``r >= taper_range``."""
    r = np.asarray(r, dtype=float)
    if np.any(np.isnan(r)):
        raise ValueError("NaN distance")
    if t.family == "none":
        w = np.ones_like(r)
    else:
        h = np.minimum(r / t.taper_range, 1.0)
        if t.family == "wendland1":
            w = (1.0 - h) ** 4 * (4.0 * h + 1.0)
        else:
            w = 1.0 - 1.5 * h + 0.5 * h ** 3
        w = np.where(h >= 1.0, 0.0, w)
    return float(w) if w.ndim == 0 else w


# ---------------------------------------------------------------------------
# Locations and neighbor search
# ---------------------------------------------------------------------------


def as_locations(locs) -> np.ndarray:
    """Coerce to a finite ``(n, d)`` float array."""
    a = np.asarray(locs, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("locations must be a nonempty (n, d) array")
    if not np.all(np.isfinite(a)):
        raise ValueError("locations must be finite")
    return a


def neighbor_pairs(locs_a, locs_b=None, radius=1.0, *, strict=False):
    """All index pairs within ``radius`` using a uniform grid of cell size ``radius``.

    Parameters
    ----------
    locs_a, locs_b : array_like
        Location sets of shape ``(n_a, d)`` and ``(n_b, d)``. If ``locs_b`` is
        None the self-pairs of ``locs_a`` (both orders, plus the diagonal) are
        returned.
    radius : float
        Search radius.
    strict : bool
        Keep pairs with distance ``< radius`` instead of ``<= radius``.

    Returns
    -------
    ia, ib, dist : ndarray
        Pair indices into ``locs_a`` and ``locs_b`` with their distances,
        sorted by ``(ia, ib)``.
    """
    a = as_locations(locs_a)
    b = a if locs_b is None else as_locations(locs_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("location sets differ in dimension")
    d = a.shape[1]
    origin = np.minimum(a.min(axis=0), b.min(axis=0))
    ca = np.floor((a - origin) / radius).astype(np.int64)
    cb = np.floor((b - origin) / radius).astype(np.int64)
    # pad by one cell so neighbor offsets never leave the index box
    dims = np.maximum(ca.max(axis=0), cb.max(axis=0)) + 3
    ca += 1
    cb += 1
    if np.prod(dims.astype(float)) > 2.0 ** 62:
        raise ValueError("radius too small relative to the domain for grid binning")
    key_b = np.ravel_multi_index(cb.T, dims)
    order_b = np.argsort(key_b, kind="stable")
    sorted_keys = key_b[order_b]

    ia_parts, ib_parts = [], []
    offsets = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    for off in offsets:
        key_a = np.ravel_multi_index((ca + off).T, dims)
        lo = np.searchsorted(sorted_keys, key_a, side="left")
        hi = np.searchsorted(sorted_keys, key_a, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        ia = np.repeat(np.arange(a.shape[0]), counts)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        ib = order_b[starts + np.arange(total)]
        ia_parts.append(ia)
        ib_parts.append(ib)
    if not ia_parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    ia = np.concatenate(ia_parts)
    ib = np.concatenate(ib_parts)
    dist = np.sqrt(np.sum((a[ia] - b[ib]) ** 2, axis=1))
    keep = dist < radius if strict else dist <= radius
    ia, ib, dist = ia[keep], ib[keep], dist[keep]
    order = np.lexsort((ib, ia))
    return ia[order], ib[order], dist[order]


def cov_matrix(locs_a, locs_b, p: MaternParams) -> np.ndarray:
    """Covariance matrix between two location sets (Euclidean distance)."""
    a = as_locations(locs_a)
    b = as_locations(locs_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("location sets differ in dimension")
    return p.sigma2 * matern_corr(cdist(a, b), p.rho, p.nu)


# ---------------------------------------------------------------------------
# Response covariance
# ---------------------------------------------------------------------------


def _theta_arrays(theta, allow_zero_variance=False):
    rho = np.asarray(theta.rho, dtype=float)
    sigma2 = np.asarray(theta.sigma2, dtype=float)
    nu = np.asarray(theta.nu, dtype=float)
    tau2 = float(theta.nugget)
    ok = (np.all(rho > 0) and np.all(np.isfinite(rho)) and np.all(np.isfinite(sigma2))
          and (np.all(sigma2 >= 0) if allow_zero_variance else np.all(sigma2 > 0))
          and (tau2 >= 0 if allow_zero_variance else tau2 > 0) and np.isfinite(tau2))
    if not ok:
        raise ValueError("covariance parameters must be positive and finite")
    return rho, sigma2, nu, tau2


class ResponseCovariance:
    """Assembler of the response covariance for fixed locations, covariates and taper.

    Distances (dense) or the neighbor pattern (tapered) are computed once.
    Per-covariate unit-variance blocks ``corr_j * x_j x_j' [* taper]`` are kept
    in a small cache keyed by ``(j, rho_j, nu_j)``; a covariance is always
    summed in covariate order so cached and fresh assemblies are bit-identical.
    """

    def __init__(self, locations, X, taper=None, *, cache_size=None):
        self.locations = as_locations(locations)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != self.locations.shape[0]:
            raise ValueError("covariates and locations differ in length")
        self.X = X
        self.n, self.p = X.shape
        self.taper = _as_taper(taper)
        self.sparse = self.taper.active
        self._cache = OrderedDict()
        self._cache_size = cache_size if cache_size is not None else 2 * self.p + 2
        self._lock = threading.Lock()
        self._const_one = [bool(np.all(X[:, j] == 1.0)) for j in range(self.p)]
        if self.sparse:
            self._init_sparse()
        else:
            self._dist = cdist(self.locations, self.locations)

    def _init_sparse(self):
        ia, ib, dist = neighbor_pairs(self.locations, None, self.taper.taper_range,
                                      strict=True)
        upper = ia <= ib
        rows, cols, dist = ia[upper], ib[upper], dist[upper]
        self.pattern, order = SparsePattern.from_pairs(self.n, rows, cols)
        self._rows = rows[order]
        self._cols = cols[order]
        self._pair_dist = dist[order]
        self._pair_taper = taper_weight(self._pair_dist, self.taper)

    @property
    def diameter(self) -> float:
        span = self.locations.max(axis=0) - self.locations.min(axis=0)
        return float(np.sqrt(np.sum(span ** 2)))

    def _unit_block(self, j, rho, nu):
        key = (j, float(rho), float(nu))
        with self._lock:
            blk = self._cache.get(key)
            if blk is not None:
                self._cache.move_to_end(key)
                return blk
        x = self.X[:, j]
        if self.sparse:
            blk = matern_corr(self._pair_dist, rho, nu)
            if not self._const_one[j]:
                blk = blk * (x[self._rows] * x[self._cols])
            blk = blk * self._pair_taper
        else:
            blk = matern_corr(self._dist, rho, nu)
            if not self._const_one[j]:
                blk = blk * np.outer(x, x)
        with self._lock:
            self._cache[key] = blk
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return blk

    def __call__(self, theta, *, allow_zero_variance=False, nugget=True):
        """Assemble ``Sigma_Y`` for covariance parameters ``theta``."""
        rho, sigma2, nu, tau2 = _theta_arrays(theta, allow_zero_variance)
        if rho.size != self.p:
            raise ValueError(f"expected {self.p} covariance blocks, got {rho.size}")
        check_taper(self.taper, nu)
        total = None
        for j in range(self.p):
            term = sigma2[j] * self._unit_block(j, rho[j], nu[j])
            total = term if total is None else total + term
        if self.sparse:
            if nugget:
                total[self.pattern.diag_pos] += tau2
            return SparseSymmetricMatrix(self.pattern, total)
        if nugget:
            total[np.diag_indices(self.n)] += tau2
        return total

    def cross_blocks(self, new_locations, theta):
        """Per-covariate cross-covariances ``Cov(eta_j(s), eta_j(s'))``, shape ``(n, n')``.

        Returns a list of dense arrays, or of sparse CSC matrices when tapering.
        """
        import scipy.sparse as sp

        new = as_locations(new_locations)
        if new.shape[1] != self.locations.shape[1]:
            raise ValueError("new locations differ in dimension")
        rho, sigma2, nu, _ = _theta_arrays(theta, allow_zero_variance=True)
        if self.sparse:
            ia, ib, dist = neighbor_pairs(self.locations, new, self.taper.taper_range,
                                          strict=True)
            w = taper_weight(dist, self.taper)
            return [sp.csc_matrix((sigma2[j] * matern_corr(dist, rho[j], nu[j]) * w,
                                   (ia, ib)), shape=(self.n, new.shape[0]))
                    for j in range(self.p)]
        dist = cdist(self.locations, new)
        return [sigma2[j] * matern_corr(dist, rho[j], nu[j]) for j in range(self.p)]


_ASSEMBLERS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_ASSEMBLERS_LOCK = threading.Lock()


def response_assembler(dataset, taper=None) -> ResponseCovariance:
    """Cached :class:`ResponseCovariance` for a dataset object and taper."""
    taper = _as_taper(taper)
    with _ASSEMBLERS_LOCK:
        per = _ASSEMBLERS.setdefault(dataset, {})
        asm = per.get(taper)
        if asm is None:
            asm = ResponseCovariance(dataset.locations, dataset.X, taper)
            per[taper] = asm
    return asm


def response_cov(dataset, theta, taper=None, *, allow_zero_variance=False):
    """Response covariance of an SVC dataset.

    Parameters
    ----------
    dataset : SvcDataset
        Provides ``X`` (n x p) and ``locations`` (n x d).
    theta : CovParams
        Ranges, variances and smoothness per covariate plus the nugget.
    taper : TaperSpec, optional
        Tapering; ``None`` or family ``"none"`` yields a dense array.

    Returns
    -------
    ndarray or SparseSymmetricMatrix
    """
    return response_assembler(dataset, taper)(theta, allow_zero_variance=allow_zero_variance)
