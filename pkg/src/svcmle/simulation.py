"""Synthetic SVC studies on perturbed grids, replicated experiments and validation.

A replication draws locations on a perturbed grid, samples the coefficient
surfaces and the response, splits the points into training, interpolation and
extrapolation folds, fits the model on the training fold and scores the
predicted coefficients and responses on every fold.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .covariance import NO_TAPER, TaperSpec, as_locations, matern_corr, neighbor_pairs
from .likelihood import PcPriorSpec
from .linalg import cholesky
from .model import CovParams, SvcDataset, format_float
from .optimizer import OptimizerConfig, default_init, fit
from .prediction import PredictionRequest, crps_gaussian, predict

__all__ = [
    "PerturbedGridSpec",
    "TrueModelSpec",
    "FoldPartition",
    "SimulationSetting",
    "PRESETS",
    "PAPER_PC_PRIOR",
    "truth_for",
    "perturbed_grid",
    "sample_svc_dataset",
    "partition",
    "rmse_beta",
    "rmse_y",
    "replication_seeds",
    "run_replication",
    "run_replicated_experiment",
    "ExperimentTable",
    "moving_window_validate",
    "ValidationResult",
    "neighbor_count_profile",
]

FOLDS = ("train", "interpolate", "extrapolate")
#: Largest grid for which coefficient surfaces are sampled by dense Cholesky.
MAX_DENSE_SAMPLE = 10000


@dataclass(frozen=True)
class PerturbedGridSpec:
    """``(2q)^2`` cells, one uniform point per cell shrunk by margin ``delta``."""

    q: int
    delta: float = 0.2

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise ValueError("q must be a positive integer")
        if not (0.0 <= self.delta < 0.5):
            raise ValueError("delta must lie in [0, 0.5)")

    @property
    def n(self) -> int:
        return (2 * self.q) ** 2


@dataclass(frozen=True)
class TrueModelSpec:
    """Generating parameters: per-SVC mean, range and variance plus the nugget."""

    mu: tuple
    rho: tuple
    sigma2: tuple
    nugget: float
    nu: float = 0.5

    def __post_init__(self):
        if not (len(self.mu) == len(self.rho) == len(self.sigma2)):
            raise ValueError("mu, rho and sigma2 must have equal length")
        if min(self.rho) <= 0 or min(self.sigma2) < 0 or self.nugget < 0:
            raise ValueError("invalid true parameters")

    @property
    def p(self) -> int:
        return len(self.mu)

    def cov_params(self) -> CovParams:
        return CovParams(self.rho, self.sigma2, self.nugget, self.nu)


_TABLE5 = dict(
    rho=(0.10, 0.20, 0.15, 0.10, 0.05, 0.05, 0.15, 0.15, 0.20, 0.20),
    sigma2=(0.20, 0.10, 0.05, 0.05, 0.10, 0.05, 0.10, 0.15, 0.15, 0.20),
)
SIM12_TRUTH = TrueModelSpec((0.0,) * 3, _TABLE5["rho"][:3], _TABLE5["sigma2"][:3], 0.03)
SIM3_TRUTH = TrueModelSpec((0.0,) * 10, _TABLE5["rho"], _TABLE5["sigma2"], 0.10)

#: PC prior with P(rho < 0.075) = 0.05 and P(sigma > 0.25) = 0.05.
PAPER_PC_PRIOR = PcPriorSpec.from_tail_probs(0.075, 0.05, 0.25, 0.05)


def truth_for(p: int) -> TrueModelSpec:
    """True model with the first ``p`` SVCs of the 10-SVC design.

    Up to three SVCs use the smaller nugget of the three-SVC design.
    """
    if not 1 <= p <= 10:
        raise ValueError("p must be between 1 and 10")
    base = SIM12_TRUTH if p <= 3 else SIM3_TRUTH
    return TrueModelSpec((0.0,) * p, _TABLE5["rho"][:p], _TABLE5["sigma2"][:p], base.nugget)


@dataclass(frozen=True)
class SimulationSetting:
    """Everything needed to run one replicated simulation study."""

    name: str
    grid: PerturbedGridSpec
    truth: TrueModelSpec
    taper: TaperSpec = NO_TAPER
    reg: Optional[PcPriorSpec] = PAPER_PC_PRIOR
    n_reps: int = 100

    def scaled(self, q=None, n_reps=None) -> "SimulationSetting":
        """Desk-scale copy with a smaller grid and/or fewer replications."""
        grid = self.grid if q is None else replace(self.grid, q=q)
        return replace(self, grid=grid, n_reps=self.n_reps if n_reps is None else n_reps)


PRESETS = {
    "sim1": SimulationSetting("sim1", PerturbedGridSpec(25), SIM12_TRUTH),
    "sim2": SimulationSetting("sim2", PerturbedGridSpec(50), SIM12_TRUTH,
                              taper=TaperSpec(0.2, "wendland1")),
    "sim3": SimulationSetting("sim3", PerturbedGridSpec(25), SIM3_TRUTH),
}


def _seed_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def perturbed_grid(spec: PerturbedGridSpec, seed) -> np.ndarray:
    """Perturbed-grid locations in the unit square, shape ``((2q)^2, 2)``.

    Cells are enumerated with the x index varying slowest.
    """
    rng = np.random.default_rng(_seed_seq(seed))
    m = 2 * spec.q
    r, s = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    lower = np.column_stack([r.ravel(), s.ravel()]) + spec.delta
    u = rng.uniform(size=lower.shape)
    return (lower + u * (1.0 - 2.0 * spec.delta)) / m


def sample_svc_dataset(locs, truth: TrueModelSpec, seed, *, max_dense=MAX_DENSE_SAMPLE):
    """Sample covariates, coefficient surfaces and responses at ``locs``.

    The first covariate is the constant 1 (varying intercept); the others are
    iid standard normal. Each surface is drawn from its untapered Matérn
    covariance through a dense Cholesky factor.

    Returns
    -------
    dataset : SvcDataset
    betas : ndarray, shape (n, p)
        True coefficient values at the locations.
    """
    locs = as_locations(locs)
    n, p = locs.shape[0], truth.p
    if n > max_dense:
        raise ValueError(f"dense sampling limited to {max_dense} locations, got {n}")
    x_ss, eta_ss, eps_ss = _seed_seq(seed).spawn(3)
    X = np.ones((n, p))
    if p > 1:
        X[:, 1:] = np.random.default_rng(x_ss).standard_normal((n, p - 1))
    eta_rng = np.random.default_rng(eta_ss)
    dist = cdist(locs, locs) if np.any(np.asarray(truth.sigma2) > 0) else None
    betas = np.empty((n, p))
    for j in range(p):
        z = eta_rng.standard_normal(n)
        eta = np.zeros(n)
        if truth.sigma2[j] > 0:
            L = cholesky(truth.sigma2[j] * matern_corr(dist, truth.rho[j], truth.nu)).L
            eta = L @ z
        betas[:, j] = truth.mu[j] + eta
    eps = np.sqrt(truth.nugget) * np.random.default_rng(eps_ss).standard_normal(n)
    y = np.sum(X * betas, axis=1) + eps
    return SvcDataset(y, X, locs), betas


@dataclass(frozen=True)
class FoldPartition:
    train: np.ndarray
    interpolate: np.ndarray
    extrapolate: np.ndarray

    def __getitem__(self, name):
        return getattr(self, name)

    def labels(self, n) -> np.ndarray:
        out = np.empty(n, dtype=object)
        for name in FOLDS:
            out[self[name]] = name
        return out


def partition(locs, seed) -> FoldPartition:
    """Split into training, interpolation and extrapolation folds.

    The lower-right quadrant ``x >= 0.5, y < 0.5`` is the extrapolation fold;
    a random third of the remaining points forms the interpolation fold.
    """
    locs = as_locations(locs)
    x, y = locs[:, 0], locs[:, 1]
    right, low = x >= 0.5, y < 0.5
    quads = [right & low, right & ~low, ~right & low, ~right & ~low]
    if any(not q.any() for q in quads):
        raise ValueError("degenerate partition: a quadrant of the unit square holds no points")
    extrap = np.flatnonzero(quads[0])
    rest = np.flatnonzero(~quads[0])
    rng = np.random.default_rng(_seed_seq(seed))
    k = int(round(rest.size / 3.0))
    interp = np.sort(rng.choice(rest, size=k, replace=False))
    train = np.setdiff1d(rest, interp)
    return FoldPartition(train, interp, extrap)


def _rmse(a, b, fold):
    fold = np.arange(len(a)) if fold is None else np.asarray(fold)
    if fold.size == 0:
        raise ValueError("empty fold")
    diff = np.asarray(a, dtype=float)[fold] - np.asarray(b, dtype=float)[fold]
    return float(np.sqrt(np.mean(diff ** 2)))


def rmse_beta(true_beta, est_beta, fold=None) -> float:
    """Root mean squared error between true and estimated coefficients on a fold."""
    return _rmse(true_beta, est_beta, fold)


def rmse_y(y, y_hat, fold=None) -> float:
    """Root mean squared prediction error of the response on a fold."""
    return _rmse(y, y_hat, fold)


# ---------------------------------------------------------------------------
# Replicated experiments
# ---------------------------------------------------------------------------


def replication_seeds(base_seed, rep):
    """Independent streams (locations, partition, data) for one replication."""
    return np.random.SeedSequence(base_seed + rep).spawn(3)


def run_replication(setting: SimulationSetting, rep: int, base_seed: int = 0,
                    cfg: OptimizerConfig = OptimizerConfig(threads=1)):
    """Simulate, fit and score one replication.

    Returns ``(rmse_rows, estimate_rows, run_row)`` as lists/dicts of plain values.
    """
    loc_ss, part_ss, data_ss = replication_seeds(base_seed, rep)
    locs = perturbed_grid(setting.grid, loc_ss)
    data, betas = sample_svc_dataset(locs, setting.truth, data_ss)
    folds = partition(locs, part_ss)
    train = data.subset(folds.train)
    res = fit(train, default_init(train), setting.taper, setting.reg, cfg)
    pred = predict(res, train, PredictionRequest(locs, data.X), setting.taper,
                   allow_unconverged=True)

    rmse_rows = []
    for fold in FOLDS:
        idx = folds[fold]
        for j in range(setting.truth.p):
            rmse_rows.append({"rep": rep, "fold": fold, "target": f"beta_{j + 1}",
                              "rmse": rmse_beta(betas[:, j], pred.beta_hat[:, j], idx)})
        rmse_rows.append({"rep": rep, "fold": fold, "target": "y",
                          "rmse": rmse_y(data.y, pred.y_hat, idx)})
    truth = setting.truth
    est_rows = []
    for j in range(truth.p):
        for name, value, true in (("mu", res.mu_hat[j], truth.mu[j]),
                                  ("rho", res.theta_hat.rho[j], truth.rho[j]),
                                  ("sigma2", res.theta_hat.sigma2[j], truth.sigma2[j])):
            est_rows.append({"rep": rep, "parameter": name, "j": j + 1,
                             "estimate": float(value), "truth": float(true)})
    est_rows.append({"rep": rep, "parameter": "nugget", "j": 0,
                     "estimate": res.theta_hat.nugget, "truth": truth.nugget})
    run_row = {"rep": rep, "status": "ok", "converged": res.converged,
               "objective": res.objective, "iterations": res.iterations,
               "n_evals": res.n_evals, "gradient_norm": res.gradient_norm}
    return rmse_rows, est_rows, run_row


def _replication_job(args):
    setting, rep, base_seed, cfg = args
    try:
        return run_replication(setting, rep, base_seed, cfg)
    except Exception as exc:  # recorded per replication, the run continues
        return [], [], {"rep": rep, "status": f"failed: {type(exc).__name__}: {exc}",
                        "converged": False, "objective": float("nan"), "iterations": 0,
                        "n_evals": 0, "gradient_norm": float("nan")}


@dataclass
class ExperimentTable:
    """Tidy results: RMSE rows, parameter-estimate rows and one status row per replication."""

    rmse: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    runs: list = field(default_factory=list)

    def values(self, table, **where):
        rows = getattr(self, table)
        col = "rmse" if table == "rmse" else "estimate"
        return np.array([r[col] for r in rows if all(r[k] == v for k, v in where.items())])

    def write_csv(self, directory, prefix=""):
        os.makedirs(directory, exist_ok=True)
        paths = {}
        for name in ("rmse", "estimates", "runs"):
            rows = getattr(self, name)
            path = os.path.join(directory, f"{prefix}{name}.csv")
            _write_rows(path, rows)
            paths[name] = path
        return paths


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0].keys())
        w.writerow(keys)
        for r in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v
                        for v in (r[k] for k in keys)])


def run_replicated_experiment(setting: SimulationSetting, base_seed: int = 0, *,
                              reps=None, workers: int = 1,
                              cfg: OptimizerConfig = OptimizerConfig(threads=1)) -> ExperimentTable:
    """Run replications ``reps`` (default ``range(setting.n_reps)``).

    Replication ``r`` uses seed ``base_seed + r``. With ``workers > 1`` the
    replications run in a process pool; rows are gathered in replication
    order either way.
    """
    reps = range(setting.n_reps) if reps is None else reps
    jobs = [(setting, r, base_seed, cfg) for r in reps]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_replication_job, jobs))
    else:
        results = [_replication_job(j) for j in jobs]
    table = ExperimentTable()
    for rm, est, run in results:
        table.rmse.extend(rm)
        table.estimates.extend(est)
        table.runs.append(run)
    return table


# ---------------------------------------------------------------------------
# Moving-window validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationResult:
    folds: list
    errors: list

    def write_csv(self, directory):
        os.makedirs(directory, exist_ok=True)
        _write_rows(os.path.join(directory, "folds.csv"), self.folds)
        _write_rows(os.path.join(directory, "errors.csv"), self.errors)


def moving_window_validate(d: SvcDataset, window_len=6, horizon=1, *, taper=None,
                           reg: PcPriorSpec = None, cfg: OptimizerConfig = OptimizerConfig(),
                           init: CovParams = None, nu=0.5) -> ValidationResult:
    """Fit on ``window_len`` consecutive periods, predict the following ``horizon`` periods.

    Without ``init`` each fold starts from :func:`default_init` of its own
    training window, with smoothness ``nu``. Returns one row per fold (RMSE,
    mean CRPS) and one row per predicted observation (prediction error and CRPS).
    """
    if d.time is None:
        raise ValueError("dataset has no time column")
    periods = np.unique(d.time)
    n_folds = periods.size - window_len - horizon + 1
    if window_len < 1 or horizon < 1 or n_folds < 1:
        raise ValueError(f"insufficient periods: {periods.size} periods for a window of "
                         f"{window_len} and horizon {horizon}")
    fold_rows, err_rows = [], []
    for f in range(n_folds):
        train_p = periods[f:f + window_len]
        test_p = periods[f + window_len:f + window_len + horizon]
        tr = np.flatnonzero(np.isin(d.time, train_p))
        te = np.flatnonzero(np.isin(d.time, test_p))
        train = d.subset(tr)
        start = init
        if start is None:
            start = default_init(train)
            start = CovParams(start.rho, start.sigma2, start.nugget, nu)
        res = fit(train, start, taper, reg, cfg)
        pred = predict(res, train, PredictionRequest(d.locations[te], d.X[te]), taper,
                       allow_unconverged=True)
        e = d.y[te] - pred.y_hat
        sd = pred.pred_sd
        crps = np.where(sd > 0, crps_gaussian(d.y[te], pred.y_hat, np.where(sd > 0, sd, 1.0)),
                        np.abs(e))
        for k, i in enumerate(te):
            err_rows.append({"fold": f + 1, "index": int(i), "period": d.time[i].item(),
                             "y": float(d.y[i]), "y_hat": float(pred.y_hat[k]),
                             "pred_sd": float(sd[k]), "error": float(e[k]),
                             "crps": float(crps[k])})
        fold_rows.append({"fold": f + 1, "train_first": train_p[0].item(),
                          "train_last": train_p[-1].item(), "test_first": test_p[0].item(),
                          "test_last": test_p[-1].item(), "n_train": int(tr.size),
                          "n_test": int(te.size), "rmse": rmse_y(e, np.zeros_like(e)),
                          "mean_crps": float(np.mean(crps)), "converged": res.converged})
    return ValidationResult(fold_rows, err_rows)


# ---------------------------------------------------------------------------
# Neighbor counts
# ---------------------------------------------------------------------------


def neighbor_count_profile(locs, taper_range):
    """Number of other observations within ``taper_range`` of each location.

    Returns
    -------
    counts : ndarray of int
    summary : dict
        min, quartiles, max and mean of the counts.
    """
    if not taper_range > 0:
        raise ValueError("taper_range must be positive")
    locs = as_locations(locs)
    ia, _, _ = neighbor_pairs(locs, None, taper_range)
    counts = np.bincount(ia, minlength=locs.shape[0]) - 1
    q = np.percentile(counts, [0, 25, 50, 75, 100])
    summary = {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
               "q3": float(q[3]), "max": float(q[4]), "mean": float(np.mean(counts))}
    return counts, summary
