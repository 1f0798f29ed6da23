"""Spatially varying coefficient (SVC) models with Matérn Gaussian-process
coefficients, fitted by (regularized, optionally tapered) maximum likelihood."""

from .covariance import (
    NO_TAPER,
    MaternParams,
    ResponseCovariance,
    TaperSpec,
    matern_corr,
    matern_cov,
    neighbor_pairs,
    response_cov,
    taper_weight,
)
from .likelihood import (
    PcPriorSpec,
    evaluate_profile,
    gls_mu,
    n2ll,
    pc_penalty,
    profile_n2ll,
    regularized_objective,
)
from .linalg import NotPositiveDefinite, SparseSymmetricMatrix, cholesky
from .model import (
    ColumnRoles,
    CovParams,
    FitResult,
    SvcDataset,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .optimizer import OptimizerConfig, default_init, fit
from .prediction import PredictionRequest, PredictionResult, crps_gaussian, predict
from .simulation import (
    PAPER_PC_PRIOR,
    PRESETS,
    PerturbedGridSpec,
    SimulationSetting,
    TrueModelSpec,
    moving_window_validate,
    neighbor_count_profile,
    partition,
    perturbed_grid,
    run_replicated_experiment,
    sample_svc_dataset,
)

__version__ = "0.1.0"
