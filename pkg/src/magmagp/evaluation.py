"""Evaluation metrics, the single-task GP baseline and the benchmark harness."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._optimize import MAX_EVALS, maximize
from .data import IndividualSeries, PriorMean
from .kernels import HyperParams, NoiseVariance, cov_matrix, cov_matrix_grad, psi_matrix
from .linalg import SingularMatrixError, chol_psd, inverse, log_det, quantize, solve
from .prediction import PredictiveDistribution, default_new_hp, predict
from .simulation import SimConfig, SimDataset, simulate_dataset
from .training import TrainConfig, TrainedModel, train_em

logger = logging.getLogger(__name__)

WORKERS_ENV = "MAGMAGP_NUM_WORKERS"
METRICS = ("magma_mse", "magma_coverage", "gp_mse", "gp_coverage", "mu0_mse", "train_seconds")


def _truth_outputs(truth) -> np.ndarray:
    if isinstance(truth, IndividualSeries):
        return truth.outputs
    return np.asarray(truth, dtype=float).reshape(-1)


def mse_prediction(pred: PredictiveDistribution, truth) -> float:
    """Mean squared error of the predictive mean over the test points."""
    y = _truth_outputs(truth)
    if y.shape != pred.mean.shape:
        raise ValueError(f"truth has {y.size} points, prediction has {pred.mean.size}")
    if y.size == 0:
        raise ValueError("no test points")
    return float(np.mean((pred.mean - y) ** 2))


def ci95_coverage(pred: PredictiveDistribution, truth) -> float:
    """Percentage of test points inside ``mean +/- 1.96 sd``."""
    y = _truth_outputs(truth)
    if y.shape != pred.mean.shape:
        raise ValueError(f"truth has {y.size} points, prediction has {pred.mean.size}")
    if y.size == 0:
        raise ValueError("no test points")
    inside = (y >= pred.ci95_lower) & (y <= pred.ci95_upper)
    return 100.0 * float(np.mean(inside))


def mse_mu0(model: TrainedModel, mu0_true, data) -> float:
    """Squared error of the hyper-posterior mean against the true mean process.

    Averaged over each individual's timestamps, then over individuals.
    ``mu0_true`` is either a callable on timestamps or an array on
    ``model.grid``.
    """
    grid = model.grid
    if callable(mu0_true):
        truth_at = mu0_true
    else:
        values = np.asarray(mu0_true, dtype=float).reshape(-1)
        if values.shape != grid.shape:
            raise ValueError("mu0_true must be given on the model grid")
        truth_at = lambda t: values[np.searchsorted(grid, quantize(t))]  # noqa: E731
    errors = []
    for series in data:
        pos = np.searchsorted(grid, series.timestamps)
        if np.any(grid[np.minimum(pos, grid.size - 1)] != series.timestamps):
            raise KeyError(f"timestamps of {series.id!r} are not on the model grid")
        diff = model.hyper_posterior.mean[pos] - truth_at(series.timestamps)
        errors.append(np.mean(diff**2))
    if not errors:
        raise ValueError("no individuals to average over")
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# single-task baseline
# ---------------------------------------------------------------------------


def gp_log_marginal(obs: IndividualSeries, hp: HyperParams, noise: NoiseVariance):
    """``log N(y; 0, K + sigma2 I)`` and its log-space gradient."""
    t, y = obs.timestamps, obs.outputs
    F = chol_psd(psi_matrix(t, hp, noise), role="baseline covariance", allow_jitter=False)
    alpha = solve(F, y)
    value = -0.5 * (y @ alpha + log_det(F) + y.size * math.log(2.0 * math.pi))
    W = np.outer(alpha, alpha) - inverse(F)
    grad = np.array([0.5 * np.sum(W * d) for d in cov_matrix_grad(t, hp, noise)])
    return float(value), grad


def gp_baseline_predict(
    new_obs: IndividualSeries,
    target,
    init: tuple[HyperParams, NoiseVariance] | None = None,
    optimize: bool = True,
    max_evals: int = MAX_EVALS,
) -> PredictiveDistribution:
    """Zero-mean single-task GP regression on the new individual alone.

    Hyper-parameters start at ``init`` (default: the training defaults) and
    are fitted by maximum marginal likelihood unless ``optimize`` is False.
    """
    hp, noise = init or default_new_hp()
    info = {"optimized": False}
    if optimize and len(new_obs):
        x0 = np.array([hp.log_v, hp.log_ell, noise.log_sigma2])
        res = maximize(
            lambda x: gp_log_marginal(new_obs, HyperParams(x[0], x[1]), NoiseVariance(x[2])),
            x0,
            max_evals,
        )
        hp, noise = HyperParams(res.x[0], res.x[1]), NoiseVariance(res.x[2])
        info = {"optimized": True, "log_likelihood": res.value, "success": res.success}
    target = np.asarray(target, dtype=float).reshape(-1)
    # same timestamp lattice as the multi-task route
    tq = quantize(target)
    t = new_obs.timestamps
    prior_pp = psi_matrix(tq, hp, noise)
    if len(new_obs) == 0:
        mean, cov = np.zeros(target.size), prior_pp
    else:
        F = chol_psd(psi_matrix(t, hp, noise), role="baseline covariance")
        k_ps = cov_matrix(tq, t, hp)
        # noise enters cross terms only where a target coincides with an observation
        k_ps = k_ps + noise.sigma2 * (tq[:, None] == t[None, :])
        mean = k_ps @ solve(F, new_obs.outputs)
        cov = prior_pp - k_ps @ solve(F, k_ps.T)
    info.update({"theta": hp.to_dict(), "sigma2": noise.to_dict()})
    return PredictiveDistribution(target, mean, 0.5 * (cov + cov.T), info)


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """One benchmark cell: ``runs`` datasets with seeds ``seed, seed+1, ...``.

    The new individual is observed on its first ``n_obs`` points and tested
    on its last ``n_test`` points. ``data_hp_mode`` sets how data are drawn,
    ``model_hp_mode`` how the multi-task model is trained.
    """

    runs: int = 30
    seed: int = 0
    m: int = 20
    n_i: int = 30
    n_obs: int = 20
    n_test: int = 10
    grid_mode: str = "common"
    data_hp_mode: str = "common"
    model_hp_mode: str = "common"
    n_restarts: int = 1
    tol: float = 1e-3
    max_iter: int = 100
    baseline: bool = True
    sim_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not (0 <= self.n_obs and 1 <= self.n_test and self.n_obs + self.n_test <= self.n_i):
            raise ValueError("need n_obs >= 0, n_test >= 1 and n_obs + n_test <= n_i")

    def sim_config(self, run: int) -> SimConfig:
        return SimConfig(
            seed=self.seed + run,
            m=self.m,
            n_i=self.n_i,
            n_obs=self.n_i - self.n_test,
            hp_mode=self.data_hp_mode,
            grid_mode=self.grid_mode,
            **self.sim_overrides,
        )

    def train_config(self, run: int) -> TrainConfig:
        return TrainConfig(
            mode=self.model_hp_mode,
            prior_mean=PriorMean(0.0),
            n_restarts=self.n_restarts,
            tol=self.tol,
            max_iter=self.max_iter,
            seed=self.seed + run,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    seed: int
    magma_mse: float = math.nan
    magma_coverage: float = math.nan
    gp_mse: float = math.nan
    gp_coverage: float = math.nan
    mu0_mse: float = math.nan
    train_seconds: float = math.nan
    iterations: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class EvalReport:
    """Per-run results plus mean (sd) aggregates over successful runs."""

    config: dict
    runs: list
    aggregate: dict
    failures: list

    @classmethod
    def from_runs(cls, config: dict, runs) -> "EvalReport":
        runs = sorted(runs, key=lambda r: r.seed)
        ok = [r for r in runs if r.ok]
        aggregate = {}
        for name in METRICS:
            vals = np.array([getattr(r, name) for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            aggregate[name] = {
                "mean": float(np.mean(vals)) if vals.size else math.nan,
                "sd": float(np.std(vals, ddof=1)) if vals.size > 1 else math.nan,
                "median": float(np.median(vals)) if vals.size else math.nan,
                "n": int(vals.size),
            }
        failures = [{"seed": r.seed, "error": r.error} for r in runs if not r.ok]
        return cls(config, runs, aggregate, failures)

    def mean(self, metric: str) -> float:
        return self.aggregate[metric]["mean"]

    def median(self, metric: str) -> float:
        return self.aggregate[metric]["median"]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "aggregate": self.aggregate,
            "failures": self.failures,
        }


def split_new_individual(ds: SimDataset, n_obs: int, n_test: int):
    """First ``n_obs`` points observed, last ``n_test`` points held out."""
    full = ds.new_individual
    n = len(full)
    return full.subset(slice(0, n_obs)), full.subset(slice(n - n_test, n))


def run_once(config: BenchmarkConfig, run: int) -> RunResult:
    """Simulate, train, predict and score one dataset; errors are captured."""
    seed = config.seed + run
    out = RunResult(seed=seed)
    try:
        ds = simulate_dataset(config.sim_config(run))
        observed, test = split_new_individual(ds, config.n_obs, config.n_test)
        start = time.perf_counter()
        model = train_em(ds.training, config.train_config(run))
        out.train_seconds = time.perf_counter() - start
        out.iterations = model.diagnostics.iterations
        pred = predict(model, ds.training, observed, test.timestamps)
        out.magma_mse = mse_prediction(pred, test)
        out.magma_coverage = ci95_coverage(pred, test)
        out.mu0_mse = mse_mu0(model, ds.mu0_at, ds.training)
        if config.baseline:
            base = gp_baseline_predict(observed, test.timestamps)
            out.gp_mse = mse_prediction(base, test)
            out.gp_coverage = ci95_coverage(base, test)
    except (SingularMatrixError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        logger.warning("run with seed %d failed: %s", seed, exc)
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, workers)


def _run_task(args):
    return run_once(*args)


def benchmark(config: BenchmarkConfig, workers: int | None = None) -> EvalReport:
    """Run ``config.runs`` seeded pipelines and aggregate their metrics.

    ``workers`` (default: ``$MAGMAGP_NUM_WORKERS`` or 1) sets the process
    count; results do not depend on it.
    """
    tasks = [(config, r) for r in range(config.runs)]
    n = _workers(workers)
    if n == 1:
        runs = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            runs = list(pool.map(_run_task, tasks))
    return EvalReport.from_runs(config.to_dict(), runs)


SWEEP_DEFAULTS = {"m": (5, 20, 50, 100), "nobs": (5, 10, 15, 20)}


def benchmark_sweep(
    config: BenchmarkConfig, sweep: str, values=None, workers: int | None = None
) -> dict:
    """One :func:`benchmark` per value of ``m`` or ``n_obs``."""
    if sweep not in SWEEP_DEFAULTS:
        raise ValueError(f"sweep must be one of {sorted(SWEEP_DEFAULTS)}, got {sweep!r}")
    values = SWEEP_DEFAULTS[sweep] if values is None else values
    attr = "m" if sweep == "m" else "n_obs"
    return {v: benchmark(replace(config, **{attr: int(v)}), workers) for v in values}
