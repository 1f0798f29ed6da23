"""Simulate a three-SVC dataset, fit it by regularized ML and score predictions.

Runs the first simulation design at desk scale (400 locations instead of 2500).

    python demos/01_simulate_and_fit.py
"""

import numpy as np

from svcmle import PredictionRequest, default_init, fit, partition, perturbed_grid, predict
from svcmle.optimizer import OptimizerConfig
from svcmle.simulation import FOLDS, PRESETS, rmse_beta, rmse_y, sample_svc_dataset

setting = PRESETS["sim1"].scaled(q=10)
truth = setting.truth

# Locations, folds and data come from independent seed streams.
loc_ss, part_ss, data_ss = np.random.SeedSequence(1).spawn(3)
locs = perturbed_grid(setting.grid, loc_ss)
data, betas = sample_svc_dataset(locs, truth, data_ss)
folds = partition(locs, part_ss)
train = data.subset(folds.train)
print(f"{data.n} locations, {train.n} for training, p = {data.p}")

res = fit(train, default_init(train), reg=setting.reg, cfg=OptimizerConfig())
print(f"converged: {res.converged} after {res.iterations} iterations "
      f"({res.n_evals} objective evaluations)")

print("\n      truth    estimate")
for j in range(truth.p):
    print(f"rho_{j + 1}  {truth.rho[j]:.3f}    {res.theta_hat.rho[j]:.3f}")
    print(f"s2_{j + 1}   {truth.sigma2[j]:.3f}    {res.theta_hat.sigma2[j]:.3f}")
    print(f"mu_{j + 1}   {truth.mu[j]:.3f}    {res.mu_hat[j]:+.3f}")
print(f"tau2   {truth.nugget:.3f}    {res.theta_hat.nugget:.3f}")

# Predict coefficient surfaces and responses everywhere, score each fold.
pred = predict(res, train, PredictionRequest(locs, data.X))
print("\nRMSE        " + "  ".join(f"{f:>11s}" for f in FOLDS))
for j in range(truth.p):
    vals = [rmse_beta(betas[:, j], pred.beta_hat[:, j], folds[f]) for f in FOLDS]
    print(f"beta_{j + 1}      " + "  ".join(f"{v:11.4f}" for v in vals))
vals = [rmse_y(data.y, pred.y_hat, folds[f]) for f in FOLDS]
print("y           " + "  ".join(f"{v:11.4f}" for v in vals))
