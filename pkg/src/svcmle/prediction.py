"""EBLUP prediction of SVC surfaces and responses, and Gaussian CRPS scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .covariance import NO_TAPER, ResponseCovariance, as_locations, response_assembler
from .linalg import cholesky
from .model import FitResult, format_float

__all__ = [
    "PredictionRequest",
    "PredictionResult",
    "predict",
    "crps_gaussian",
    "write_predictions_csv",
]

# predictive variances below zero by less than this are rounding noise
_NEG_VAR_TOL = 1e-10


@dataclass(frozen=True)
class PredictionRequest:
    new_locations: np.ndarray
    X_new: Optional[np.ndarray] = None


@dataclass
class PredictionResult:
    """Predicted deviations ``eta_hat``, coefficients ``beta_hat`` (n' x p),
    responses ``y_hat`` and their predictive variances ``pred_var``."""

    locations: np.ndarray
    eta_hat: np.ndarray
    beta_hat: np.ndarray
    y_hat: Optional[np.ndarray] = None
    pred_var: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def pred_sd(self):
        return None if self.pred_var is None else np.sqrt(self.pred_var)


def predict(fit: FitResult, train, req: PredictionRequest, taper=None, *,
            latent=False, batch_size=1024, allow_unconverged=False) -> PredictionResult:
    """Empirical best linear unbiased prediction at new locations.

    Parameters
    ----------
    fit : FitResult
        Estimated (or given) parameters.
    train : SvcDataset
        Data the model was fitted on.
    req : PredictionRequest
        New locations and, for response prediction, their covariates.
    taper : TaperSpec, optional
        Taper for the training and cross covariances. Defaults to the taper
        recorded in ``fit``.
    latent : bool
        Exclude the nugget from the predictive variance (noise-free signal).
    batch_size : int
        Number of new locations whose variances are computed per block.

    Returns
    -------
    PredictionResult
    """
    if not fit.converged and not allow_unconverged:
        raise ValueError("fit did not converge; pass allow_unconverged=True to predict anyway")
    taper = fit.taper if taper is None else taper
    taper = NO_TAPER if taper is None else taper
    theta, mu = fit.theta_hat, np.asarray(fit.mu_hat, dtype=float)
    if theta.p != train.p or mu.shape != (train.p,):
        raise ValueError("fitted model and training data differ in the number of covariates")
    new = as_locations(req.new_locations)
    if new.shape[1] != train.d:
        raise ValueError("new locations differ in dimension from the training locations")
    X_new = None
    if req.X_new is not None:
        X_new = np.asarray(req.X_new, dtype=float)
        if X_new.ndim == 1:
            X_new = X_new[:, None]
        if X_new.shape != (new.shape[0], train.p):
            raise ValueError(f"X_new must have shape {(new.shape[0], train.p)}")

    asm: ResponseCovariance = response_assembler(train, taper)
    f = cholesky(asm(theta, allow_zero_variance=True))
    alpha = f.solve(train.y - train.X @ mu)
    cross = asm.cross_blocks(new, theta)  # Cov(eta_j(s), eta_j(s')), n x n'

    n_new = new.shape[0]
    eta = np.empty((n_new, train.p))
    for j, C in enumerate(cross):
        eta[:, j] = C.T @ (train.X[:, j] * alpha)
    beta = mu[None, :] + eta
    result = PredictionResult(new, eta, beta)
    if X_new is None:
        return result

    result.y_hat = np.sum(X_new * beta, axis=1)
    prior = X_new ** 2 @ theta.sigma2 + (0.0 if latent else theta.nugget)
    reduction = np.empty(n_new)
    for lo in range(0, n_new, batch_size):
        hi = min(lo + batch_size, n_new)
        # Sigma_{Y Y'} for this block: sum_j diag(x_j) C_j diag(x'_j)
        B = np.zeros((train.n, hi - lo))
        for j, C in enumerate(cross):
            Cj = C[:, lo:hi]
            Cj = Cj.toarray() if hasattr(Cj, "toarray") else Cj
            B += train.X[:, j, None] * Cj * X_new[None, lo:hi, j]
        W = f.half_solve(B)
        reduction[lo:hi] = np.sum(W * W, axis=0)
    var = prior - reduction
    neg = var < 0
    if np.any(var < -_NEG_VAR_TOL * np.maximum(prior, 1.0)):
        raise FloatingPointError("negative predictive variance beyond rounding tolerance")
    if np.any(neg):
        result.diagnostics["clamped_variances"] = int(neg.sum())
        var = np.where(neg, 0.0, var)
    result.pred_var = var
    return result


def crps_gaussian(y, mean, sd):
    """Continuous ranked probability score of a normal predictive distribution.

    Vectorized over its arguments; lower is better.
    """
    y, mean, sd = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mean, sd)))
    if np.any(sd <= 0) or np.any(np.isnan(sd)):
        raise ValueError("standard deviation must be positive")
    z = (y - mean) / sd
    out = sd * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / np.sqrt(np.pi))
    return float(out) if out.ndim == 0 else out


def write_predictions_csv(path, res: PredictionResult):
    """Coordinates, one ``beta_j`` column per SVC, ``y_hat`` and ``pred_sd``."""
    d = res.locations.shape[1]
    p = res.beta_hat.shape[1]
    header = [f"s{k + 1}" for k in range(d)] + [f"beta_{j + 1}" for j in range(p)]
    if res.y_hat is not None:
        header += ["y_hat", "pred_sd"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(res.locations.shape[0]):
            row = [format_float(v) for v in res.locations[i]]
            row += [format_float(v) for v in res.beta_hat[i]]
            if res.y_hat is not None:
                row += [format_float(res.y_hat[i]), format_float(np.sqrt(res.pred_var[i]))]
            w.writerow(row)
