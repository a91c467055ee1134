"""EM training of the common mean process and covariance hyper-parameters.

The E-step computes the Gaussian hyper-posterior of the mean process on the
pooled grid of all training timestamps. The M-step maximises the expected
complete-data log-likelihood, which splits into one problem for the mean
process kernel and either one problem per individual ("different" mode) or a
single shared problem ("common" mode).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from ._optimize import MAX_EVALS, maximize
from .data import IndividualSeries, PriorMean, TrainingSet
from .kernels import (
    EQ,
    ExponentiatedQuadratic,
    HyperParams,
    Kernel,
    NoiseVariance,
    cov_matrix,
    cov_matrix_grad,
    psi_matrix,
)
from .linalg import (
    JitterWarning,
    SingularMatrixError,
    chol_psd,
    inverse,
    log_det,
    scatter_precision,
    scatter_vector,
    solve,
)

logger = logging.getLogger(__name__)

HP_MODES = ("common", "different")
LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_INIT_V = math.e
DEFAULT_INIT_ELL = math.e
DEFAULT_INIT_SIGMA2 = 0.4**2
# relative white-noise term on the mean-process kernel, keeps K_theta0 factorisable
MEAN_NUGGET = 1e-8


def _check_mode(mode: str) -> str:
    if mode not in HP_MODES:
        raise ValueError(f"hp mode must be one of {HP_MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class ModelHyperParams:
    """All hyper-parameters of the model.

    ``shared`` holds the single ``(theta, sigma2)`` pair in common mode;
    ``individual`` maps individual ids to their pairs in different mode.
    ``mean_nugget`` is the relative white-noise term of the mean-process
    kernel ``v0^2 (exp(-d^2 / (2 ell0^2)) + nugget * [d == 0])``.
    """

    mode: str
    theta0: HyperParams
    shared: tuple | None = None
    individual: dict | None = None
    mean_nugget: float = MEAN_NUGGET

    def __post_init__(self):
        _check_mode(self.mode)
        if self.mode == "common" and (self.shared is None or self.individual is not None):
            raise ValueError("common mode needs exactly one shared (theta, sigma2) pair")
        if self.mode == "different" and (self.individual is None or self.shared is not None):
            raise ValueError("different mode needs a per-individual mapping")
        if not self.mean_nugget >= 0:
            raise ValueError("mean_nugget must be non-negative")

    @property
    def mean_kernel(self) -> Kernel:
        return ExponentiatedQuadratic(self.mean_nugget) if self.mean_nugget else EQ

    def for_individual(self, id: str) -> tuple[HyperParams, NoiseVariance]:
        if self.mode == "common":
            return self.shared
        return self.individual[id]

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "theta0": self.theta0.to_dict(), "mean_nugget": self.mean_nugget}
        if self.mode == "common":
            hp, noise = self.shared
            out["shared"] = {**hp.to_dict(), **noise.to_dict()}
        else:
            out["individual"] = {
                k: {**hp.to_dict(), **noise.to_dict()} for k, (hp, noise) in self.individual.items()
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHyperParams":
        def pair(e):
            return HyperParams.from_dict(e), NoiseVariance.from_dict(e)

        theta0 = HyperParams.from_dict(d["theta0"])
        nugget = float(d.get("mean_nugget", MEAN_NUGGET))
        if d["mode"] == "common":
            return cls("common", theta0, shared=pair(d["shared"]), mean_nugget=nugget)
        individual = {k: pair(v) for k, v in d["individual"].items()}
        return cls("different", theta0, individual=individual, mean_nugget=nugget)


@dataclass(frozen=True, eq=False)
class HyperPosterior:
    """Gaussian law ``N(mean, cov)`` of the mean process on ``grid``."""

    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.grid).size
        if np.shape(self.mean) != (n,) or np.shape(self.cov) != (n, n):
            raise ValueError("hyper-posterior dimensions do not match its grid")

    def restrict(self, index) -> "HyperPosterior":
        index = np.asarray(index, dtype=int)
        return HyperPosterior(
            self.grid[index], self.mean[index], self.cov[np.ix_(index, index)]
        )


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)
    restart: int = 0
    restart_log_likelihoods: list = field(default_factory=list)
    jitter_events: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": list(self.trace),
            "restart": self.restart,
            "restart_log_likelihoods": list(self.restart_log_likelihoods),
            "jitter_events": [dict(e) for e in self.jitter_events],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Diagnostics":
        return cls(
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            trace=[float(x) for x in d["trace"]],
            restart=int(d["restart"]),
            restart_log_likelihoods=[float(x) for x in d["restart_log_likelihoods"]],
            jitter_events=[dict(e) for e in d["jitter_events"]],
            warnings=list(d["warnings"]),
        )


@dataclass(frozen=True, eq=False)
class TrainedModel:
    params: ModelHyperParams
    prior_mean: PriorMean
    hyper_posterior: HyperPosterior
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @property
    def hp_mode(self) -> str:
        return self.params.mode

    @property
    def grid(self) -> np.ndarray:
        return self.hyper_posterior.grid


@dataclass
class TrainConfig:
    """Settings for :func:`train_em`.

    ``tol`` is the relative change of the observed-data log-likelihood
    below which EM stops.
    """

    mode: str = "common"
    prior_mean: PriorMean = field(default_factory=PriorMean)
    n_restarts: int = 1
    tol: float = 1e-3
    max_iter: int = 100
    seed: int = 0
    max_evals: int = MAX_EVALS
    init_v: float = DEFAULT_INIT_V
    init_ell: float = DEFAULT_INIT_ELL
    init_sigma2: float = DEFAULT_INIT_SIGMA2
    mean_nugget: float = MEAN_NUGGET

    def __post_init__(self):
        _check_mode(self.mode)
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.max_iter < 0 or not self.tol > 0:
            raise ValueError("max_iter must be >= 0 and tol > 0")


# ---------------------------------------------------------------------------
# hyper-posterior
# ---------------------------------------------------------------------------


def posterior_from_precision(K, m0, precision, shift):
    """Return ``(Khat, mhat)`` with ``Khat = (K^-1 + P)^-1`` and
    ``mhat = Khat (K^-1 m0 + b)``.

    ``K`` is never inverted: with ``P = B B^T`` the Woodbury identity gives
    ``Khat = K - K B (I + B^T K B)^-1 B^T K``, which stays accurate when the
    prior Gram matrix is numerically singular (smooth kernels on dense grids).
    """
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros(0)
    lam, U = la.eigh(0.5 * (precision + precision.T))
    keep = lam > max(lam.max(initial=0.0), 0.0) * n * np.finfo(float).eps
    if not np.any(keep):
        return K.copy(), np.asarray(m0, dtype=float).copy() + K @ shift
    B = U[:, keep] * np.sqrt(lam[keep])
    KB = K @ B
    C = np.eye(B.shape[1]) + B.T @ KB
    F = chol_psd(0.5 * (C + C.T), role="hyper-posterior system")
    G = solve(F, KB.T)
    K_hat = K - KB @ G
    K_hat = 0.5 * (K_hat + K_hat.T)
    m_hat = m0 - KB @ solve(F, B.T @ m0) + K_hat @ shift
    return K_hat, m_hat


def hyper_posterior_on(
    grid, contributions, theta0: HyperParams, prior_mean: PriorMean, kernel: Kernel = EQ
):
    """Hyper-posterior of the mean process on an arbitrary ``grid``.

    ``contributions`` yields ``(id, index, Psi, y)`` where ``index`` locates
    the individual's retained timestamps inside ``grid``. Each ``Psi`` is
    inverted on its own sub-grid and the precision is then zero-padded.
    """
    grid = np.asarray(grid, dtype=float)
    n = grid.size
    K = cov_matrix(grid, grid, theta0, kernel)
    m0 = prior_mean(grid)
    P = np.zeros((n, n))
    b = np.zeros(n)
    for id_, idx, psi, y in contributions:
        if len(idx) == 0:
            continue
        try:
            F = chol_psd(psi, role=f"Psi[{id_}]")
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"Psi[{id_}]", str(exc)) from exc
        P += scatter_precision(inverse(F), idx, n)
        b += scatter_vector(solve(F, y), idx, n)
    K_hat, m_hat = posterior_from_precision(K, m0, P, b)
    return HyperPosterior(grid.copy(), m_hat, K_hat)


def e_step(data: TrainingSet, params: ModelHyperParams, prior_mean: PriorMean) -> HyperPosterior:
    """Hyper-posterior of the mean process on the pooled training grid."""
    grid = data.grid

    def contributions():
        for k, series in enumerate(data):
            hp, noise = params.for_individual(series.id)
            yield series.id, data.index_map(k), psi_matrix(series.timestamps, hp, noise), series.outputs

    return hyper_posterior_on(grid, contributions(), params.theta0, prior_mean, params.mean_kernel)


# ---------------------------------------------------------------------------
# M-step objectives
# ---------------------------------------------------------------------------


def _corrected_gaussian(resid, extra_cov, S, dS, role):
    """``log N(resid; 0, S) - 1/2 Tr(extra_cov S^-1)`` and its gradient.

    ``dS`` lists the derivatives of ``S`` w.r.t. each log-parameter. No
    jitter is added: a jittered value would not match its gradient, so a
    non-PD ``S`` raises and the optimiser backs off.
    """
    n = resid.size
    F = chol_psd(S, role=role, allow_jitter=False)
    S_inv = inverse(F)
    alpha = S_inv @ resid
    value = -0.5 * (resid @ alpha + log_det(F) + n * LOG_2PI) - 0.5 * np.sum(extra_cov * S_inv)
    W = np.outer(alpha, alpha) + S_inv @ extra_cov @ S_inv - S_inv
    grad = np.array([0.5 * np.sum(W * d) for d in dS])
    return float(value), grad


def q_objective_theta0(
    hyper_posterior: HyperPosterior,
    prior_mean: PriorMean,
    theta0: HyperParams,
    kernel: Kernel = EQ,
):
    """Mean-process part of the expected complete-data log-likelihood.

    Returns ``(value, grad)`` with the gradient w.r.t. ``(log_v, log_ell)``.
    """
    grid = hyper_posterior.grid
    resid = hyper_posterior.mean - prior_mean(grid)
    S = cov_matrix(grid, grid, theta0, kernel)
    dS = cov_matrix_grad(grid, theta0, kernel=kernel)
    return _corrected_gaussian(resid, hyper_posterior.cov, S, dS, "K_theta0")


def _locate(hyper_posterior: HyperPosterior, t) -> np.ndarray:
    pos = np.searchsorted(hyper_posterior.grid, t)
    pos = np.minimum(pos, hyper_posterior.grid.size - 1)
    if np.any(hyper_posterior.grid[pos] != t):
        raise KeyError("individual timestamps are not on the hyper-posterior grid")
    return pos


def q_objective_individual(
    hyper_posterior: HyperPosterior,
    series: IndividualSeries,
    hp: HyperParams,
    noise: NoiseVariance,
):
    """One individual's part of the expected complete-data log-likelihood.

    Returns ``(value, grad)`` w.r.t. ``(log_v, log_ell, log_sigma2)``.
    """
    idx = _locate(hyper_posterior, series.timestamps)
    resid = series.outputs - hyper_posterior.mean[idx]
    A = hyper_posterior.cov[np.ix_(idx, idx)]
    S = psi_matrix(series.timestamps, hp, noise)
    dS = cov_matrix_grad(series.timestamps, hp, noise)
    return _corrected_gaussian(resid, A, S, dS, f"Psi[{series.id}]")


def q_objective_common(
    hyper_posterior: HyperPosterior,
    individuals,
    hp: HyperParams,
    noise: NoiseVariance,
):
    """Sum of individual objectives under one shared ``(theta, sigma2)``.

    Individuals observed on identical timestamps share one factorisation.
    """
    groups: dict[bytes, list] = {}
    for s in individuals:
        groups.setdefault(s.timestamps.tobytes(), []).append(s)
    total = 0.0
    grad = np.zeros(3)
    for members in groups.values():
        t = members[0].timestamps
        idx = _locate(hyper_posterior, t)
        A = hyper_posterior.cov[np.ix_(idx, idx)]
        S = psi_matrix(t, hp, noise)
        dS = cov_matrix_grad(t, hp, noise)
        F = chol_psd(S, role="Psi[shared]", allow_jitter=False)
        S_inv = inverse(F)
        R = np.column_stack([s.outputs - hyper_posterior.mean[idx] for s in members])
        alpha = S_inv @ R
        k = len(members)
        value = -0.5 * (
            np.sum(R * alpha) + k * (log_det(F) + t.size * LOG_2PI) + k * np.sum(A * S_inv)
        )
        W = alpha @ alpha.T + k * (S_inv @ A @ S_inv - S_inv)
        total += value
        grad += np.array([0.5 * np.sum(W * d) for d in dS])
    return float(total), grad


def q_value(data: TrainingSet, hyper_posterior: HyperPosterior, params: ModelHyperParams, prior_mean: PriorMean) -> float:
    """Full expected complete-data log-likelihood at ``params``."""
    value, _ = q_objective_theta0(hyper_posterior, prior_mean, params.theta0, params.mean_kernel)
    if params.mode == "common":
        hp, noise = params.shared
        value += q_objective_common(hyper_posterior, data.individuals, hp, noise)[0]
    else:
        for s in data:
            hp, noise = params.individual[s.id]
            value += q_objective_individual(hyper_posterior, s, hp, noise)[0]
    return float(value)


def _pack(hp: HyperParams, noise: NoiseVariance) -> np.ndarray:
    return np.array([hp.log_v, hp.log_ell, noise.log_sigma2])


def _unpack(x) -> tuple[HyperParams, NoiseVariance]:
    return HyperParams(float(x[0]), float(x[1])), NoiseVariance(float(x[2]))


def m_step(
    data: TrainingSet,
    hyper_posterior: HyperPosterior,
    mode: str,
    previous: ModelHyperParams,
    prior_mean: PriorMean,
    max_evals: int = MAX_EVALS,
    diagnostics: Diagnostics | None = None,
) -> ModelHyperParams:
    """Maximise each independent part of the expected log-likelihood.

    Every sub-problem is warm-started at ``previous`` and never returns a
    point worse than its start.
    """
    _check_mode(mode)
    if mode != previous.mode:
        raise ValueError("previous hyper-parameters were built for another mode")

    def note(what, res):
        if not res.success and diagnostics is not None:
            diagnostics.warnings.append(f"optimizer ({what}): {res.message}")

    res0 = maximize(
        lambda x: q_objective_theta0(
            hyper_posterior, prior_mean, HyperParams.from_array(x), previous.mean_kernel
        ),
        previous.theta0.to_array(),
        max_evals,
    )
    note("theta0", res0)
    theta0 = HyperParams.from_array(res0.x)

    if mode == "common":
        res = maximize(
            lambda x: q_objective_common(hyper_posterior, data.individuals, *_unpack(x)),
            _pack(*previous.shared),
            max_evals,
        )
        note("shared", res)
        return ModelHyperParams(
            "common", theta0, shared=_unpack(res.x), mean_nugget=previous.mean_nugget
        )

    individual = {}
    for s in data:
        res = maximize(
            lambda x, s=s: q_objective_individual(hyper_posterior, s, *_unpack(x)),
            _pack(*previous.individual[s.id]),
            max_evals,
        )
        note(s.id, res)
        individual[s.id] = _unpack(res.x)
    return ModelHyperParams(
        "different", theta0, individual=individual, mean_nugget=previous.mean_nugget
    )


# ---------------------------------------------------------------------------
# marginal likelihood, initialisation, EM loop
# ---------------------------------------------------------------------------


def observed_data_log_likelihood(data: TrainingSet, params: ModelHyperParams, prior_mean: PriorMean) -> float:
    """Log-density of all stacked observations with the mean process
    integrated out: blocks ``K(t_i, t_j) + delta_ij Psi_i``."""
    if len(data) == 0:
        return 0.0
    t = np.concatenate([s.timestamps for s in data])
    y = np.concatenate([s.outputs for s in data])
    cov = cov_matrix(t, t, params.theta0, params.mean_kernel)
    start = 0
    for s in data:
        hp, noise = params.for_individual(s.id)
        stop = start + len(s)
        cov[start:stop, start:stop] += psi_matrix(s.timestamps, hp, noise)
        start = stop
    F = chol_psd(0.5 * (cov + cov.T), role="marginal covariance")
    resid = y - prior_mean(t)
    return float(-0.5 * (resid @ solve(F, resid) + log_det(F) + y.size * LOG_2PI))


def init_theta(config: TrainConfig, data: TrainingSet, restart: int = 0) -> ModelHyperParams:
    """Initial hyper-parameters; restarts > 0 add seeded U[-1, 1] noise in log-space."""
    base_hp = np.array([math.log(config.init_v), math.log(config.init_ell)])
    base_noise = math.log(config.init_sigma2)
    rng = np.random.default_rng([config.seed, restart]) if restart > 0 else None

    def draw(x):
        x = np.asarray(x, dtype=float)
        if rng is None:
            return x
        return x + rng.uniform(-1.0, 1.0, size=x.shape)

    theta0 = HyperParams.from_array(draw(base_hp))
    nugget = config.mean_nugget
    if config.mode == "common":
        shared = _unpack(draw(np.append(base_hp, base_noise)))
        return ModelHyperParams("common", theta0, shared=shared, mean_nugget=nugget)
    individual = {s.id: _unpack(draw(np.append(base_hp, base_noise))) for s in data}
    return ModelHyperParams("different", theta0, individual=individual, mean_nugget=nugget)


def _summarise_jitter(records) -> list[dict]:
    summary: dict[str, dict] = {}
    for w in records:
        msg = w.message
        entry = summary.setdefault(msg.role, {"role": msg.role, "count": 0, "max_jitter": 0.0})
        entry["count"] += 1
        entry["max_jitter"] = max(entry["max_jitter"], msg.jitter)
    return [summary[k] for k in sorted(summary)]


def _run_em(data: TrainingSet, config: TrainConfig, restart: int) -> TrainedModel:
    diag = Diagnostics(restart=restart)
    params = init_theta(config, data, restart)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", JitterWarning)
        ll = observed_data_log_likelihood(data, params, config.prior_mean)
        diag.trace.append(ll)
        for it in range(config.max_iter):
            post = e_step(data, params, config.prior_mean)
            params = m_step(
                data, post, config.mode, params, config.prior_mean, config.max_evals, diag
            )
            new_ll = observed_data_log_likelihood(data, params, config.prior_mean)
            diag.trace.append(new_ll)
            diag.iterations = it + 1
            logger.debug("restart %d iteration %d: log-likelihood %.6f", restart, it + 1, new_ll)
            if abs(new_ll - ll) < config.tol * abs(ll):
                diag.converged = True
                break
            ll = new_ll
        post = e_step(data, params, config.prior_mean)
    jitter = [w for w in caught if isinstance(w.message, JitterWarning)]
    for w in caught:
        if not isinstance(w.message, JitterWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    diag.jitter_events = _summarise_jitter(jitter)
    return TrainedModel(params, config.prior_mean, post, diag)


def train_em(data: TrainingSet, config: TrainConfig | None = None) -> TrainedModel:
    """Fit the model by EM, keeping the best of ``config.n_restarts`` runs.

    Runs are compared on their final observed-data log-likelihood.
    """
    config = config or TrainConfig()
    if len(data) < 1:
        raise ValueError("training needs at least one individual")
    best = None
    failures = []
    finals = []
    for r in range(config.n_restarts):
        try:
            model = _run_em(data, config, r)
        except SingularMatrixError as exc:
            logger.warning("restart %d failed: %s", r, exc)
            failures.append(f"restart {r}: {exc}")
            finals.append(float("nan"))
            continue
        finals.append(model.diagnostics.trace[-1])
        if best is None or model.diagnostics.trace[-1] > best.diagnostics.trace[-1]:
            best = model
    if best is None:
        raise SingularMatrixError("training", "; ".join(failures))
    diag = replace(best.diagnostics, restart_log_likelihoods=finals)
    diag.warnings = list(diag.warnings) + failures
    return TrainedModel(best.params, best.prior_mean, best.hyper_posterior, diag)
