"""Reversible instance normalization with a Johnson S_U shape transform.

Shape parameters are kept out of gradient training: they come from a
closed-form quantile fit, optionally refined by a TPE search on validation
MSE, and stay frozen while the forecasting backbone trains.
"""

from .backbone import LinearBackbone, MLPBackbone, Normalizer, RunResult, TrainConfig, TrainingError, train
from .normalizers import (
    AffinePost,
    InstanceStats,
    ShapeParams,
    jsu_forward,
    jsu_inverse,
    jsu_shape_grads,
    mean_std_stats,
    revin_forward,
    revin_inverse,
    robust_loc_scale,
)
from .search import SearchSpace, TpeConfig, TrialRecord, run_tpe, search
from .series import (
    DataError,
    GeneratorParams,
    MultiSeries,
    SplitSpec,
    WindowBatch,
    ingest_csv,
    mae,
    make_windows,
    moments,
    mse,
    synth_heavy_tailed,
)
from .shape_fit import FitResult, slifker_shapiro_fit, warm_start
from .significance import wilcoxon_signed_rank

__version__ = "0.1.0"

__all__ = [
    "LinearBackbone",
    "MLPBackbone",
    "Normalizer",
    "RunResult",
    "TrainConfig",
    "TrainingError",
    "train",
    "AffinePost",
    "InstanceStats",
    "ShapeParams",
    "jsu_forward",
    "jsu_inverse",
    "jsu_shape_grads",
    "mean_std_stats",
    "revin_forward",
    "revin_inverse",
    "robust_loc_scale",
    "SearchSpace",
    "TpeConfig",
    "TrialRecord",
    "run_tpe",
    "search",
    "DataError",
    "GeneratorParams",
    "MultiSeries",
    "SplitSpec",
    "WindowBatch",
    "ingest_csv",
    "mae",
    "make_windows",
    "moments",
    "mse",
    "synth_heavy_tailed",
    "FitResult",
    "slifker_shapiro_fit",
    "warm_start",
    "wilcoxon_signed_rank",
]
