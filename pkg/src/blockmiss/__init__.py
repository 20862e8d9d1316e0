"""Estimation and inference for blockwise (non-monotone) missing data.

The package augments a complete-case estimating equation with tuned,
mean-zero per-pattern prediction terms and reports sandwich confidence
intervals; a simulation harness checks calibration at desk scale.
"""

from .data import ObservedDataset, Schema, dataset_from_frame, ingest_csv
from .errors import BlockmissError, ConfigError, DataError, NumericError
from .estfun import LinearRegression, OutcomeMean, solve_root
from .estimators import (
    TRACE,
    EstimateReport,
    GLEstimate,
    Scalarization,
    adaptive_qp,
    confidence_interval,
    cross_fit,
    estimate_G_L,
    fit_adaptive,
    ibm_solve,
    naive_estimate,
    optimal_alpha,
    ppi_estimate,
    ppi_pp_estimate,
)
from .patterns import (
    PS,
    RAY,
    PatternTable,
    WeightScheme,
    alpha_characterization,
    build_pattern_table,
    gamma_eta,
    mask_from_string,
    mask_to_string,
    omega,
    signed_superset_sum,
)
from .predictors import (
    GaussianSpec,
    LinearPredictorMap,
    PredictorBank,
    noisy_mixture_predictor,
    ols_conditional_moments,
    train_linear_predictor,
)
from .simulation import (
    ExchangeableDesign,
    MeanDesign,
    MetricsTable,
    OLSDesign,
    ReplicationPlan,
    generate,
    quality_sweep,
    remainder_study,
    run_replications,
)

__version__ = "0.1.0"
