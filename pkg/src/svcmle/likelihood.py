"""Negative twice log-likelihood, GLS mean profile and PC-prior regularization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .covariance import response_assembler
from .linalg import cholesky

__all__ = [
    "SingularGram",
    "PcPriorSpec",
    "pc_lambdas",
    "pc_penalty",
    "n2ll",
    "gls_mu",
    "profile_n2ll",
    "regularized_objective",
    "ProfileEvaluation",
    "evaluate_profile",
]

#: Gram matrices X' Sigma^-1 X with a larger condition number are treated as singular.
GRAM_COND_LIMIT = 1e12


class SingularGram(np.linalg.LinAlgError):
    """X' Sigma_Y^-1 X is numerically singular."""


def pc_lambdas(rho0, alpha_rho, sigma0, alpha_sigma):
    """Rates of the PC prior from the tail statements P(rho < rho0) = alpha_rho
    and P(sigma > sigma0) = alpha_sigma."""
    rho0, alpha_rho, sigma0, alpha_sigma = map(np.asarray, (rho0, alpha_rho, sigma0, alpha_sigma))
    if np.any(rho0 <= 0) or np.any(sigma0 <= 0):
        raise ValueError("rho0 and sigma0 must be positive")
    for a in (alpha_rho, alpha_sigma):
        if np.any((a <= 0) | (a >= 1)):
            raise ValueError("tail probabilities must lie in (0, 1)")
    return -2.0 * np.log(alpha_rho) * rho0, -np.log(alpha_sigma) / sigma0


@dataclass(frozen=True)
class PcPriorSpec:
    """PC-prior regularizer with one ``(lambda_rho, lambda_sigma)`` pair per SVC.

    Scalars apply to every SVC. ``family="off"`` disables the penalty
    entirely, including the ``4 log rho`` term.
    """

    lambda_rho: object = 0.0
    lambda_sigma: object = 0.0
    family: str = "pc"
    hyper: Optional[dict] = None

    def __post_init__(self):
        if self.family not in ("pc", "off"):
            raise ValueError(f"unknown regularization family {self.family!r}")
        lr = np.asarray(self.lambda_rho, dtype=float)
        ls = np.asarray(self.lambda_sigma, dtype=float)
        if np.any(lr < 0) or np.any(ls < 0) or not (np.all(np.isfinite(lr)) and np.all(np.isfinite(ls))):
            raise ValueError("PC-prior rates must be finite and nonnegative")

    @classmethod
    def from_tail_probs(cls, rho0, alpha_rho, sigma0, alpha_sigma) -> "PcPriorSpec":
        lr, ls = pc_lambdas(rho0, alpha_rho, sigma0, alpha_sigma)
        hyper = {"rho0": np.asarray(rho0).tolist(), "alpha_rho": np.asarray(alpha_rho).tolist(),
                 "sigma0": np.asarray(sigma0).tolist(),
                 "alpha_sigma": np.asarray(alpha_sigma).tolist()}
        return cls(lr, ls, "pc", hyper)

    @classmethod
    def off(cls) -> "PcPriorSpec":
        return cls(0.0, 0.0, "off")

    @property
    def enabled(self) -> bool:
        return self.family != "off"

    def rates(self, p):
        lr = np.broadcast_to(np.asarray(self.lambda_rho, dtype=float), (p,))
        ls = np.broadcast_to(np.asarray(self.lambda_sigma, dtype=float), (p,))
        return lr, ls

    def to_dict(self) -> dict:
        return {"family": self.family,
                "lambda_rho": np.asarray(self.lambda_rho).tolist(),
                "lambda_sigma": np.asarray(self.lambda_sigma).tolist(),
                "hyper": self.hyper}


def pc_penalty(theta, spec: PcPriorSpec) -> float:
    """Sum over SVCs of ``lambda_rho/rho + 4 log rho + 2 lambda_sigma sigma``.

    Constants of ``-2 log pi_PC`` that do not involve the parameters are dropped.
    """
    if spec is None or not spec.enabled:
        return 0.0
    lr, ls = spec.rates(theta.p)
    rho = theta.rho
    sigma = np.sqrt(theta.sigma2)
    return float(np.sum(lr / rho + 4.0 * np.log(rho) + 2.0 * ls * sigma))


class ProfileEvaluation(NamedTuple):
    value: float
    mu: np.ndarray
    logdet: float
    quad: float
    jitter: float


def _check(d, theta):
    if theta.p != d.p:
        raise ValueError(f"theta has {theta.p} SVCs but the data has {d.p} covariates")


def _quad_form(f, r):
    w = f.half_solve(r)
    return float(w @ w)


def _gls(f, d):
    Z = f.solve(np.column_stack([d.y, d.X]))
    Zy, ZX = Z[:, 0], Z[:, 1:]
    G = d.X.T @ ZX
    G = 0.5 * (G + G.T)
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > GRAM_COND_LIMIT:
        raise SingularGram("X' Sigma_Y^-1 X is numerically singular")
    return np.linalg.solve(G, d.X.T @ Zy)


def n2ll(d, theta, mu, taper=None) -> float:
    """``log det Sigma_Y + (y - X mu)' Sigma_Y^-1 (y - X mu)``."""
    _check(d, theta)
    mu = np.asarray(mu, dtype=float)
    S = response_assembler(d, taper)(theta)
    f = cholesky(S)
    r = d.y - d.X @ mu
    return f.logdet() + _quad_form(f, r)


def gls_mu(d, theta, taper=None) -> np.ndarray:
    """Generalized least squares mean for fixed covariance parameters.

    Zero SVC variances are allowed, so that ``Sigma_Y = tau^2 I`` gives the
    ordinary least squares fit.
    """
    _check(d, theta)
    S = response_assembler(d, taper)(theta, allow_zero_variance=True)
    return _gls(cholesky(S), d)


def evaluate_profile(d, theta, taper=None) -> ProfileEvaluation:
    """Profile objective with one factorization of ``Sigma_Y`` shared by all solves."""
    _check(d, theta)
    S = response_assembler(d, taper)(theta)
    f = cholesky(S)
    mu = _gls(f, d)
    ld = f.logdet()
    quad = _quad_form(f, d.y - d.X @ mu)
    return ProfileEvaluation(ld + quad, mu, ld, quad, f.jitter)


def profile_n2ll(d, theta, taper=None):
    """Return ``(n2ll(theta, mu_gls(theta)), mu_gls(theta))``."""
    ev = evaluate_profile(d, theta, taper)
    return ev.value, ev.mu


def regularized_objective(d, theta, taper=None, spec: PcPriorSpec = None):
    """Profile objective plus the PC penalty; the GLS mean is unaffected."""
    value, mu = profile_n2ll(d, theta, taper)
    return value + pc_penalty(theta, spec), mu
