"""Data containers, parameter packing and file I/O for SVC models."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .covariance import MaternParams, TaperSpec, as_locations

__all__ = [
    "SvcDataset",
    "CovParams",
    "FitResult",
    "Finding",
    "ColumnRoles",
    "pack",
    "unpack",
    "pack_joint",
    "unpack_joint",
    "validate_dataset",
    "read_dataset_csv",
    "write_dataset_csv",
    "format_float",
]


def _frozen_array(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SvcDataset:
    """Response ``y`` (n), covariates ``X`` (n x p) and ``locations`` (n x d).

    ``time`` optionally labels each observation with a discrete period, used by
    moving-window validation. Instances compare by identity so they can key
    per-dataset caches.
    """

    y: np.ndarray
    X: np.ndarray
    locations: np.ndarray
    time: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        locs = np.asarray(self.locations, dtype=float)
        if locs.ndim == 1:
            locs = locs[:, None]
        if not (y.shape[0] == X.shape[0] == locs.shape[0]):
            raise ValueError("y, X and locations must have the same number of rows")
        object.__setattr__(self, "y", _frozen_array(y))
        object.__setattr__(self, "X", _frozen_array(X))
        object.__setattr__(self, "locations", _frozen_array(locs))
        if self.time is not None:
            t = np.asarray(self.time).ravel()
            if t.shape[0] != y.shape[0]:
                raise ValueError("time column has the wrong length")
            object.__setattr__(self, "time", _frozen_array(t, dtype=t.dtype))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    def subset(self, idx) -> "SvcDataset":
        idx = np.asarray(idx)
        return SvcDataset(self.y[idx], self.X[idx], self.locations[idx],
                          None if self.time is None else self.time[idx])


@dataclass(frozen=True)
class CovParams:
    """Covariance parameters: per-covariate range, variance and smoothness plus nugget."""

    rho: np.ndarray
    sigma2: np.ndarray
    nugget: float
    nu: np.ndarray = None

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        nu = np.full(rho.shape, 0.5) if self.nu is None else np.broadcast_to(
            np.asarray(self.nu, dtype=float), rho.shape)
        if rho.ndim != 1 or sigma2.shape != rho.shape:
            raise ValueError("rho and sigma2 must be vectors of equal length")
        if not (np.all(rho > 0) and np.all(sigma2 >= 0) and np.all(nu > 0)
                and float(self.nugget) >= 0):
            raise ValueError("covariance parameters must be positive")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(sigma2))
                and np.isfinite(self.nugget)):
            raise ValueError("covariance parameters must be finite")
        object.__setattr__(self, "rho", _frozen_array(rho))
        object.__setattr__(self, "sigma2", _frozen_array(sigma2))
        object.__setattr__(self, "nu", _frozen_array(nu))
        object.__setattr__(self, "nugget", float(self.nugget))

    @property
    def p(self) -> int:
        return self.rho.size

    def svc(self, j) -> MaternParams:
        return MaternParams(self.rho[j], self.sigma2[j], self.nu[j])

    @classmethod
    def from_svcs(cls, svcs: Sequence[MaternParams], nugget: float) -> "CovParams":
        return cls([s.rho for s in svcs], [s.sigma2 for s in svcs], nugget,
                   [s.nu for s in svcs])

    def __eq__(self, other):
        if not isinstance(other, CovParams):
            return NotImplemented
        return (np.array_equal(self.rho, other.rho)
                and np.array_equal(self.sigma2, other.sigma2)
                and np.array_equal(self.nu, other.nu)
                and self.nugget == other.nugget)

    def to_dict(self) -> dict:
        return {"rho": self.rho.tolist(), "sigma2": self.sigma2.tolist(),
                "nu": self.nu.tolist(), "nugget": self.nugget}

    @classmethod
    def from_dict(cls, d) -> "CovParams":
        return cls(d["rho"], d["sigma2"], d["nugget"], d.get("nu"))


def pack(theta: CovParams) -> np.ndarray:
    """Log-transform to the optimizer vector ``(rho_1, s2_1, ..., rho_p, s2_p, tau2)``."""
    if np.any(theta.sigma2 <= 0) or theta.nugget <= 0:
        raise ValueError("packing requires strictly positive variances")
    v = np.empty(2 * theta.p + 1)
    v[0:-1:2] = theta.rho
    v[1:-1:2] = theta.sigma2
    v[-1] = theta.nugget
    return np.log(v)


def unpack(v, p: int, nu=0.5) -> CovParams:
    """Inverse of :func:`pack`; ``nu`` is carried along since it is never estimated."""
    v = np.asarray(v, dtype=float)
    if v.shape != (2 * p + 1,):
        raise ValueError(f"expected a vector of length {2 * p + 1}, got shape {v.shape}")
    e = np.exp(v)
    return CovParams(e[0:-1:2], e[1:-1:2], e[-1], nu)


def pack_joint(theta: CovParams, mu) -> np.ndarray:
    """Joint vector of length ``3p + 1``: packed ``theta`` followed by ``mu``."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (theta.p,):
        raise ValueError("mu must have one entry per covariate")
    return np.concatenate([pack(theta), mu])


def unpack_joint(v, p: int, nu=0.5):
    v = np.asarray(v, dtype=float)
    if v.shape != (3 * p + 1,):
        raise ValueError(f"expected a vector of length {3 * p + 1}")
    return unpack(v[: 2 * p + 1], p, nu), v[2 * p + 1:].copy()


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    severity: str = "warning"


def validate_dataset(d: SvcDataset) -> list:
    """Report data problems without raising.

    Duplicate locations are reported as informational only; the model allows
    several observations at the same site.
    """
    findings = []
    for name in ("y", "X", "locations"):
        if np.any(np.isnan(getattr(d, name))):
            findings.append(Finding("nan", f"{name} contains NaN values", "error"))
    for j in range(d.p):
        col = d.X[:, j]
        if not np.any(col != 0):
            findings.append(Finding("degenerate covariate",
                                    f"covariate column {j} is identically zero", "error"))
    if d.n < d.p:
        findings.append(Finding("n < p", f"{d.n} observations for {d.p} covariates", "error"))
    if d.n:
        _, counts = np.unique(d.locations, axis=0, return_counts=True)
        dup = int(np.sum(counts[counts > 1] - 1))
        if dup:
            findings.append(Finding("duplicate locations",
                                    f"{dup} observations share a location with another",
                                    "info"))
    return findings


@dataclass
class FitResult:
    """Estimated parameters and convergence diagnostics of one fit."""

    theta_hat: CovParams
    mu_hat: np.ndarray
    objective: float
    converged: bool
    iterations: int = 0
    n_evals: int = 0
    jitter_events: int = 0
    gradient_norm: float = float("nan")
    message: str = ""
    mode: str = "profile"
    taper: TaperSpec = field(default_factory=lambda: TaperSpec(np.inf, "none"))
    regularized: bool = False
    trace: list = field(default_factory=list, repr=False)
    metadata: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_params(cls, theta: CovParams, mu, taper=None) -> "FitResult":
        """Wrap known parameters (e.g. the truth) for prediction."""
        return cls(theta, np.asarray(mu, dtype=float), float("nan"), True,
                   taper=taper or TaperSpec(np.inf, "none"), message="fixed parameters")

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "mu_hat": np.asarray(self.mu_hat).tolist(),
            "objective": self.objective,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_evals": int(self.n_evals),
            "jitter_events": int(self.jitter_events),
            "gradient_norm": self.gradient_norm,
            "message": self.message,
            "mode": self.mode,
            "taper": {"taper_range": _json_float(self.taper.taper_range),
                      "family": self.taper.family},
            "regularized": self.regularized,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        t = d.get("taper", {"taper_range": None, "family": "none"})
        rng = t["taper_range"]
        taper = TaperSpec(np.inf if rng is None else float(rng), t["family"])
        return cls(CovParams.from_dict(d["theta_hat"]), np.asarray(d["mu_hat"], dtype=float),
                   float(d["objective"]), bool(d["converged"]), d.get("iterations", 0),
                   d.get("n_evals", 0), d.get("jitter_events", 0),
                   float(d.get("gradient_norm", float("nan"))), d.get("message", ""),
                   d.get("mode", "profile"), taper, d.get("regularized", False),
                   metadata=d.get("metadata", {}))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "FitResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _json_float(x):
    return None if not np.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def format_float(x) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class ColumnRoles:
    """Column names for the response, covariates, coordinates and optional time."""

    response: str = "y"
    covariates: tuple = ()
    coords: tuple = ("s1", "s2")
    time: Optional[str] = None


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    return header, rows


def read_dataset_csv(path, roles: ColumnRoles = ColumnRoles(), *, require_response=True):
    """Read a dataset from a CSV with a header row.

    If ``roles.covariates`` is empty, every column named ``x<k>`` is used in
    header order.
    """
    header, rows = _read_csv(path)
    covs = tuple(roles.covariates) or tuple(c for c in header
                                            if c.startswith("x") and c[1:].isdigit())
    needed = list(covs) + list(roles.coords)
    if require_response:
        needed.append(roles.response)
    if roles.time:
        needed.append(roles.time)
    missing = [c for c in needed if c not in header]
    if missing:
        raise KeyError(f"columns not found in {path}: {missing}")
    if not covs:
        raise KeyError(f"no covariate columns in {path}")

    def col(name):
        return np.array([float(r[name]) for r in rows])

    X = np.column_stack([col(c) for c in covs]) if rows else np.empty((0, len(covs)))
    locs = np.column_stack([col(c) for c in roles.coords])
    y = col(roles.response) if require_response else np.full(len(rows), np.nan)
    t = None
    if roles.time:
        t = np.array([r[roles.time] for r in rows])
        try:
            t = t.astype(float)
        except ValueError:
            pass
    return SvcDataset(y, X, locs, t)


def write_dataset_csv(path, dataset: SvcDataset, *, time_name="period"):
    p, d = dataset.p, dataset.d
    header = ["y"] + [f"x{j + 1}" for j in range(p)] + [f"s{k + 1}" for k in range(d)]
    if dataset.time is not None:
        header.append(time_name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            row = [format_float(dataset.y[i])]
            row += [format_float(v) for v in dataset.X[i]]
            row += [format_float(v) for v in dataset.locations[i]]
            if dataset.time is not None:
                row.append(str(dataset.time[i]))
            w.writerow(row)
