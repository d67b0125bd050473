"""Covariate-dependent functional PCA monitoring for daily sensor profiles."""

from .dataset import (
    MonitoringDataset,
    ProfileDay,
    derive_covariate,
    load_profiles,
    save_profiles,
    split_phases,
)
from .eigensystem import (
    EigenSystem,
    build_baseline_eigensystem,
    build_eigensystem,
    eigendecompose_at,
    periodic_trapezoid_weights,
)
from .errors import (
    CdfpcaError,
    CovariateUnavailableError,
    DegenerateCovarianceError,
    EmptyPhaseError,
    InsufficientDataError,
    NumericalError,
    ParseError,
    ValidationError,
    WindowEmptyError,
)
from .covsmooth import (
    CovSurface,
    RawCovPoints,
    estimate_noise_variance,
    evaluate_surface,
    local_linear_smooth,
    raw_covariances,
    select_bandwidths,
)
from .meanmodel import (
    TemperatureMeanModel,
    compute_residuals,
    fit_mean_model,
    predict_mean,
)
from .mewma import (
    ChartResult,
    ChartState,
    bootstrap_run_length,
    calibrate_h4,
    estimate_arl,
    run_chart,
    update,
)
from .pipeline import (
    CdFpcaMonitor,
    MonitorResult,
    emit_report,
    load_bundle,
    save_bundle,
)
from .scores import (
    Calibration,
    ScoreCalibration,
    ScoreRecord,
    estimate_scores,
    fit_calibration,
    standardize,
)
from .synthetic import SynthSpec, SynthTruth, generate_synthetic, load_truth, save_truth

__version__ = "0.1.0"
