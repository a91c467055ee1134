"""Multi-task Gaussian process regression with a learned common mean process."""

__version__ = "0.1.0"

from .data import IndividualSeries, PriorMean, TrainingSet  # noqa: E402
from .evaluation import (  # noqa: E402
    BenchmarkConfig,
    EvalReport,
    benchmark,
    benchmark_sweep,
    ci95_coverage,
    gp_baseline_predict,
    mse_mu0,
    mse_prediction,
)
from .kernels import HyperParams, NoiseVariance, cov_matrix, eq_kernel, psi_matrix  # noqa: E402
from .linalg import JitterWarning, SingularMatrixError, chol_psd  # noqa: E402
from .prediction import PredictiveDistribution, predict  # noqa: E402
from .simulation import SimConfig, SimDataset, simulate_dataset  # noqa: E402
from .training import ModelHyperParams, TrainConfig, TrainedModel, train_em  # noqa: E402
from .estimator import MagmaRegressor  # noqa: E402

__all__ = [
    "BenchmarkConfig",
    "EvalReport",
    "HyperParams",
    "IndividualSeries",
    "JitterWarning",
    "MagmaRegressor",
    "ModelHyperParams",
    "NoiseVariance",
    "PredictiveDistribution",
    "PriorMean",
    "SimConfig",
    "SimDataset",
    "SingularMatrixError",
    "TrainConfig",
    "TrainedModel",
    "TrainingSet",
    "benchmark",
    "benchmark_sweep",
    "chol_psd",
    "ci95_coverage",
    "cov_matrix",
    "eq_kernel",
    "gp_baseline_predict",
    "mse_mu0",
    "mse_prediction",
    "predict",
    "psi_matrix",
    "simulate_dataset",
    "train_em",
]
