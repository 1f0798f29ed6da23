"""Quasi-Newton maximum likelihood fitting of SVC models.

The profile (or PC-regularized profile) objective is minimized over the
log-transformed covariance parameters with L-BFGS-B. Gradients are central
finite differences of the objective, evaluated concurrently and reduced in
index order so results do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .covariance import NO_TAPER, check_taper
from .likelihood import (
    PcPriorSpec,
    SingularGram,
    evaluate_profile,
    n2ll,
    pc_penalty,
)
from .linalg import NotPositiveDefinite
from .model import CovParams, FitResult, pack, pack_joint, unpack, unpack_joint

__all__ = [
    "OptimizerConfig",
    "fd_gradient",
    "default_init",
    "Objective",
    "fit",
    "write_trace_csv",
]

# log-space safety bounds; inactive for sensible data, they keep exp() finite
LOG_LOWER = np.log(1e-10)
LOG_UPPER = np.log(1e10)
BOX_LOWER = 1e-10


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the quasi-Newton fit.

    ``space`` is ``"log"`` (default) or ``"box"``: the latter optimizes the raw
    parameters with lower bounds ``1e-10``. ``mode`` is ``"profile"`` or
    ``"joint"`` (means optimized alongside the covariance parameters).
    """

    max_iterations: int = 500
    gtol: float = 1e-5
    ftol: float = 1e-9
    fd_scheme: str = "central"
    fd_step: float = 1e-6
    history: int = 10
    multistart: int = 1
    seed: int = 0
    threads: int = 0
    space: str = "log"
    mode: str = "profile"
    max_restarts: int = 5

    def __post_init__(self):
        if self.fd_scheme not in ("central", "forward"):
            raise ValueError("fd_scheme must be 'central' or 'forward'")
        if self.space not in ("log", "box"):
            raise ValueError("space must be 'log' or 'box'")
        if self.mode not in ("profile", "joint"):
            raise ValueError("mode must be 'profile' or 'joint'")
        for name in ("max_iterations", "gtol", "ftol", "fd_step", "history", "multistart"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.gtol < 1 and self.ftol < 1):
            raise ValueError("tolerances must be below 1")

    @property
    def workers(self) -> int:
        if self.threads > 0:
            return self.threads
        env = os.environ.get("SVCMLE_THREADS")
        if env:
            return max(1, int(env))
        return os.cpu_count() or 1


def fd_gradient(func, x, *, scheme="central", step=1e-6, f0=None, map_=map):
    """Finite-difference gradient with absolute step ``step``.

    ``map_`` evaluates the stencil points (e.g. an executor's ``map``); the
    stencil is reduced in coordinate order.
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    eye = np.eye(k) * step
    if scheme == "central":
        pts = [x + eye[i] for i in range(k)] + [x - eye[i] for i in range(k)]
        vals = np.array(list(map_(func, pts)))
        return (vals[:k] - vals[k:]) / (2.0 * step)
    if scheme == "forward":
        if f0 is None:
            f0 = func(x)
        vals = np.array(list(map_(func, [x + eye[i] for i in range(k)])))
        return (vals - f0) / step
    raise ValueError(f"unknown scheme {scheme!r}")


def default_init(d) -> CovParams:
    """Ranges at a quarter of the domain diameter; variances split var(y) equally."""
    span = d.locations.max(axis=0) - d.locations.min(axis=0)
    diam = float(np.sqrt(np.sum(span ** 2)))
    rho = diam / 4.0 if diam > 0 else 1.0
    v = float(np.var(d.y)) / (d.p + 1)
    if not v > 0:
        v = 1.0
    return CovParams(np.full(d.p, rho), np.full(d.p, v), v)


class Objective:
    """Objective over the optimizer vector of one dataset.

    Non-finite values and failed factorizations evaluate to ``+inf``.
    """

    def __init__(self, d, taper=None, reg: PcPriorSpec = None, *, nu=0.5,
                 space="log", mode="profile"):
        self.d = d
        self.taper = taper if taper is not None else NO_TAPER
        self.reg = reg if (reg is not None and reg.enabled) else None
        self.nu = np.broadcast_to(np.asarray(nu, dtype=float), (d.p,)).copy()
        check_taper(self.taper, self.nu)
        self.space = space
        self.mode = mode
        self.n_evals = 0
        self.jitter_events = 0
        self.failures = 0
        self._lock = threading.Lock()

    def _count(self, name):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    @property
    def dim(self) -> int:
        return (2 if self.mode == "profile" else 3) * self.d.p + 1

    # -- vector <-> parameters ------------------------------------------------
    def encode(self, theta, mu=None) -> np.ndarray:
        theta = CovParams(theta.rho, theta.sigma2, theta.nugget, self.nu)
        if self.mode == "joint":
            v = pack_joint(theta, mu)
        else:
            v = pack(theta)
        if self.space == "box":
            v = v.copy()
            k = 2 * self.d.p + 1
            v[:k] = np.exp(v[:k])
        return v

    def decode(self, x):
        x = np.asarray(x, dtype=float)
        p = self.d.p
        k = 2 * p + 1
        th = x[:k] if self.space == "log" else np.log(np.maximum(x[:k], BOX_LOWER))
        if self.mode == "joint":
            return unpack_joint(np.concatenate([th, x[k:]]), p, self.nu)
        return unpack(th, p, self.nu), None

    def bounds(self):
        k = 2 * self.d.p + 1
        lo, hi = (LOG_LOWER, LOG_UPPER) if self.space == "log" else (BOX_LOWER, np.exp(LOG_UPPER))
        b = [(lo, hi)] * k
        if self.mode == "joint":
            b += [(None, None)] * self.d.p
        return b

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, x):
        """Return ``(value, mu)``; value is ``inf`` when evaluation fails."""
        self._count("n_evals")
        try:
            theta, mu = self.decode(x)
            if self.mode == "joint":
                value = n2ll(self.d, theta, mu, self.taper)
            else:
                ev = evaluate_profile(self.d, theta, self.taper)
                value, mu = ev.value, ev.mu
                if ev.jitter > 0:
                    self._count("jitter_events")
            if self.reg is not None:
                value += pc_penalty(theta, self.reg)
        except (NotPositiveDefinite, SingularGram, ValueError, FloatingPointError):
            self._count("failures")
            return np.inf, None
        if not np.isfinite(value):
            return np.inf, None
        return float(value), mu

    def __call__(self, x) -> float:
        return self.evaluate(x)[0]


class _Run:
    """One L-BFGS-B run with cached value/gradient pairs and an iteration trace."""

    def __init__(self, obj: Objective, cfg: OptimizerConfig, executor):
        self.obj = obj
        self.cfg = cfg
        self.map = executor.map if executor is not None else map
        self.cache = {}
        self.trace = []
        self.best = (np.inf, None)

    def grad(self, x, f0=None):
        x = np.asarray(x, dtype=float)
        step = self.cfg.fd_step
        if self.obj.space == "box":
            # relative steps on the raw scale; one-sided near the lower bound
            return self._box_grad(x, f0)
        return fd_gradient(self.obj, x, scheme=self.cfg.fd_scheme, step=step,
                           f0=f0, map_=self.map)

    def _box_grad(self, x, f0):
        k = 2 * self.obj.d.p + 1
        h = np.where(np.arange(x.size) < k, self.cfg.fd_step * np.maximum(np.abs(x), 1e-3),
                     self.cfg.fd_step)
        eye = np.diag(h)
        central = (self.cfg.fd_scheme == "central") & (x - h > BOX_LOWER)
        pts = [x + eye[i] for i in range(x.size)] + [x - eye[i] for i in range(x.size) if central[i]]
        vals = list(self.map(self.obj, pts))
        if f0 is None and not np.all(central):
            f0 = self.obj(x)
        g = np.empty(x.size)
        j = x.size
        for i in range(x.size):
            if central[i]:
                g[i] = (vals[i] - vals[j]) / (2 * h[i])
                j += 1
            else:
                g[i] = (vals[i] - f0) / h[i]
        return g

    def fun_and_grad(self, x):
        key = x.tobytes()
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        f, mu = self.obj.evaluate(x)
        if np.isfinite(f):
            g = self.grad(x, f0=f)
            if not np.all(np.isfinite(g)):
                g = np.where(np.isfinite(g), g, 0.0)
            if f < self.best[0]:
                self.best = (f, x.copy())
        else:
            # a huge finite value makes the line search backtrack
            f, g = 1e300, np.zeros_like(x)
        self.cache = {key: (f, g)}
        return f, g

    def callback(self, intermediate_result):
        x = intermediate_result.x
        f, g = self.fun_and_grad(x)
        prev = self.trace[-1]["x"] if self.trace else self.x0
        self.trace.append({"iteration": len(self.trace), "objective": f,
                           "step_length": float(np.linalg.norm(x - prev)),
                           "gradient_norm": _proj_grad_norm(x, g, self.obj.bounds()),
                           "x": x.copy()})

    def run(self, x0):
        self.x0 = np.asarray(x0, dtype=float)
        f0, g0 = self.fun_and_grad(self.x0)
        self.trace.append({"iteration": 0, "objective": f0, "step_length": 0.0,
                           "gradient_norm": _proj_grad_norm(self.x0, g0, self.obj.bounds()),
                           "x": self.x0.copy()})
        x = self.x0
        iterations = 0
        message = ""
        for restart in range(self.cfg.max_restarts + 1):
            budget = self.cfg.max_iterations - iterations
            if budget <= 0:
                message = "maximum number of iterations reached"
                break
            res = minimize(self.fun_and_grad, x, jac=True, method="L-BFGS-B",
                           bounds=self.obj.bounds(), callback=self.callback,
                           options={"maxiter": budget, "maxcor": self.cfg.history,
                                    "gtol": self.cfg.gtol,
                                    "ftol": self.cfg.ftol * 1e-3 ** restart,
                                    "maxfun": 20 * budget + 100})
            iterations += int(res.nit)
            message = str(res.message)
            x = self.best[1] if self.best[1] is not None else res.x
            f, g = self.fun_and_grad(x)
            if _proj_grad_norm(x, g, self.obj.bounds()) <= self.cfg.gtol:
                break
            if res.nit == 0 and restart > 0:
                break
            # stopped on the relative-reduction test or a line-search failure
            # before the gradient test: restart from the best point with fresh
            # curvature memory and a tighter reduction test
        return x, iterations, message


def _proj_grad_norm(x, g, bounds):
    g = np.array(g, dtype=float)
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and x[i] <= lo and g[i] > 0:
            g[i] = 0.0
        if hi is not None and x[i] >= hi and g[i] < 0:
            g[i] = 0.0
    return float(np.max(np.abs(g))) if g.size else 0.0


def _start_points(obj, init, mu0, cfg):
    x0 = obj.encode(init, mu0)
    starts = [x0]
    if cfg.multistart > 1:
        rng = np.random.default_rng(cfg.seed)
        k = 2 * obj.d.p + 1
        for _ in range(cfg.multistart - 1):
            x = x0.copy()
            jit = np.log1p(rng.uniform(-0.5, 0.5, size=k))
            if obj.space == "log":
                x[:k] = x0[:k] + jit
            else:
                x[:k] = x0[:k] * np.exp(jit)
            starts.append(x)
    return starts


def fit(d, init: CovParams = None, taper=None, reg: PcPriorSpec = None,
        cfg: OptimizerConfig = OptimizerConfig(), *, mu0=None) -> FitResult:
    """Maximum likelihood (or PC-regularized) estimate of an SVC model.

    Parameters
    ----------
    d : SvcDataset
        Training data.
    init : CovParams, optional
        Starting covariance parameters; :func:`default_init` if omitted. Its
        smoothness values are kept fixed.
    taper : TaperSpec, optional
        Covariance taper used for every likelihood evaluation.
    reg : PcPriorSpec, optional
        PC-prior regularizer added to the objective.
    cfg : OptimizerConfig
        Optimizer settings.
    mu0 : array_like, optional
        Starting means in joint mode (defaults to the GLS mean at ``init``).

    Returns
    -------
    FitResult
        ``converged`` is true only if the projected gradient inf-norm at the
        solution is within ``cfg.gtol``.
    """
    init = default_init(d) if init is None else init
    obj = Objective(d, taper, reg, nu=init.nu, space=cfg.space, mode=cfg.mode)
    if cfg.mode == "joint" and mu0 is None:
        mu0 = evaluate_profile(d, replace(init, nu=obj.nu), obj.taper).mu

    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        best = None
        for x0 in _start_points(obj, init, mu0, cfg):
            run = _Run(obj, cfg, executor)
            x, iterations, message = run.run(x0)
            f, g = run.fun_and_grad(x)
            if best is None or f < best[0]:
                best = (f, x, g, iterations, message, run)
    finally:
        if executor is not None:
            executor.shutdown()

    f, x, g, iterations, message, run = best
    gnorm = _proj_grad_norm(x, g, obj.bounds())
    theta, mu = obj.decode(x)
    if cfg.mode == "profile":
        mu = obj.evaluate(x)[1]
        if mu is None:
            mu = np.full(d.p, np.nan)
    converged = bool(np.isfinite(f) and f < 1e300 and gnorm <= cfg.gtol)
    if iterations >= cfg.max_iterations and not converged:
        message = "maximum number of iterations reached"
    trace = [{k: v for k, v in row.items() if k != "x"} for row in run.trace]
    return FitResult(
        theta_hat=theta,
        mu_hat=np.asarray(mu, dtype=float),
        objective=float(f),
        converged=converged,
        iterations=int(iterations),
        n_evals=int(obj.n_evals),
        jitter_events=int(obj.jitter_events),
        gradient_norm=gnorm,
        message=message,
        mode=cfg.mode,
        taper=obj.taper,
        regularized=obj.reg is not None,
        trace=trace,
    )


def write_trace_csv(path, trace):
    """Iteration trace as CSV: iteration, objective, step length, gradient norm."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "step_length", "gradient_norm"])
        for row in trace:
            w.writerow([row["iteration"], format(row["objective"], ".17g"),
                        format(row["step_length"], ".17g"),
                        format(row["gradient_norm"], ".17g")])
