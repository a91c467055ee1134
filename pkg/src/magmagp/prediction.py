"""Multi-task prediction for a new, partially observed individual.

Pipeline: pool the prediction and observation timestamps (plus, by default,
the training grid), compute the hyper-posterior of the mean process there,
add the new individual's own covariance to get its multi-task prior,
optionally fit its hyper-parameters, then condition on its observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._optimize import MAX_EVALS, maximize
from .data import IndividualSeries, TrainingSet
from .kernels import HyperParams, NoiseVariance, cov_matrix_grad, psi_matrix
from .linalg import PooledGrid, chol_psd, quantize, solve
from .training import (
    DEFAULT_INIT_ELL,
    DEFAULT_INIT_SIGMA2,
    DEFAULT_INIT_V,
    HyperPosterior,
    TrainedModel,
    _corrected_gaussian,
    _pack,
    _unpack,
    hyper_posterior_on,
)

Z95 = 1.96


def default_new_hp() -> tuple[HyperParams, NoiseVariance]:
    return (
        HyperParams.from_natural(DEFAULT_INIT_V, DEFAULT_INIT_ELL),
        NoiseVariance.from_natural(DEFAULT_INIT_SIGMA2),
    )


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """Working grid ``tau`` = targets U observed (U extra), with index maps."""

    target: np.ndarray
    observed: np.ndarray
    tau: np.ndarray
    target_index: np.ndarray
    observed_index: np.ndarray

    @classmethod
    def build(cls, target, observed, extra=None) -> "PredictionGrid":
        target = quantize(np.asarray(target, dtype=float).reshape(-1))
        observed = quantize(np.asarray(observed, dtype=float).reshape(-1))
        grids = [target, observed]
        if extra is not None:
            grids.append(np.asarray(extra, dtype=float).reshape(-1))
        pooled = PooledGrid.from_grids(grids)
        return cls(target, observed, pooled.timestamps, pooled.index_maps[0], pooled.index_maps[1])


@dataclass(frozen=True, eq=False)
class MultiTaskPrior:
    """Prior of the new individual on ``grid`` with block views.

    ``target_index`` and ``observed_index`` locate the prediction and
    observation timestamps inside ``grid``.
    """

    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    target_index: np.ndarray
    observed_index: np.ndarray

    @property
    def gamma_pp(self):
        return self.cov[np.ix_(self.target_index, self.target_index)]

    @property
    def gamma_ps(self):
        return self.cov[np.ix_(self.target_index, self.observed_index)]

    @property
    def gamma_sp(self):
        return self.cov[np.ix_(self.observed_index, self.target_index)]

    @property
    def gamma_ss(self):
        return self.cov[np.ix_(self.observed_index, self.observed_index)]

    @property
    def mean_p(self):
        return self.mean[self.target_index]

    @property
    def mean_s(self):
        return self.mean[self.observed_index]


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    """Gaussian prediction at ``grid`` with 95% credible intervals."""

    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def variance(self) -> np.ndarray:
        return np.clip(np.diag(self.cov), 0.0, None)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def ci95_lower(self) -> np.ndarray:
        return self.mean - Z95 * self.sd

    @property
    def ci95_upper(self) -> np.ndarray:
        return self.mean + Z95 * self.sd


def _positions(grid, t) -> np.ndarray:
    t = quantize(np.asarray(t, dtype=float).reshape(-1))
    pos = np.searchsorted(grid, t)
    pos = np.minimum(pos, max(grid.size - 1, 0))
    if t.size and (grid.size == 0 or np.any(grid[pos] != t)):
        raise KeyError("timestamps are not covered by the hyper-posterior grid")
    return pos


def hyperposterior_at(model: TrainedModel, data: TrainingSet, tau) -> HyperPosterior:
    """Hyper-posterior of the mean process on an arbitrary grid ``tau``.

    Training observations at timestamps outside ``tau`` are dropped.
    """
    tau = np.unique(quantize(np.asarray(tau, dtype=float).reshape(-1)))

    def contributions():
        for series in data:
            keep = np.isin(series.timestamps, tau)
            if not np.any(keep):
                continue
            t = series.timestamps[keep]
            hp, noise = model.params.for_individual(series.id)
            yield series.id, np.searchsorted(tau, t), psi_matrix(t, hp, noise), series.outputs[keep]

    return hyper_posterior_on(
        tau, contributions(), model.params.theta0, model.prior_mean, model.params.mean_kernel
    )


def prior_new_individual(
    hp_post: HyperPosterior,
    theta_star: HyperParams,
    sigma2_star: NoiseVariance,
    target=None,
    observed=None,
) -> MultiTaskPrior:
    """Multi-task prior ``N(mhat, Khat + Psi_*)`` of a new individual.

    With ``target``/``observed`` given, the prior lives on their union and the
    block views follow; otherwise it covers the whole hyper-posterior grid.
    """
    grid = hp_post.grid
    if target is None and observed is None:
        idx = np.arange(grid.size)
        t_idx, o_idx = idx, np.zeros(0, dtype=int)
    else:
        tp = _positions(grid, [] if target is None else target)
        ts = _positions(grid, [] if observed is None else observed)
        idx = np.unique(np.concatenate([tp, ts]))
        t_idx, o_idx = np.searchsorted(idx, tp), np.searchsorted(idx, ts)
    sub = hp_post.restrict(idx)
    cov = sub.cov + psi_matrix(sub.grid, theta_star, sigma2_star)
    return MultiTaskPrior(sub.grid, sub.mean.copy(), 0.5 * (cov + cov.T), t_idx, o_idx)


def new_individual_log_likelihood(
    hp_post: HyperPosterior, observations: IndividualSeries, hp: HyperParams, noise: NoiseVariance
):
    """``log N(y_*; mhat(t_*), Khat(t_*) + Psi_*)`` and its gradient in log-space."""
    idx = _positions(hp_post.grid, observations.timestamps)
    resid = observations.outputs - hp_post.mean[idx]
    khat = hp_post.cov[np.ix_(idx, idx)]
    S = khat + psi_matrix(observations.timestamps, hp, noise)
    dS = cov_matrix_grad(observations.timestamps, hp, noise)
    return _corrected_gaussian(resid, np.zeros_like(S), S, dS, "Gamma_**")


def learn_new_hp(
    observations: IndividualSeries,
    hp_post: HyperPosterior,
    init: tuple[HyperParams, NoiseVariance] | None = None,
    mode: str = "different",
    shared: tuple[HyperParams, NoiseVariance] | None = None,
    max_evals: int = MAX_EVALS,
) -> tuple[HyperParams, NoiseVariance, dict]:
    """Hyper-parameters of the new individual.

    Common mode passes ``shared`` through untouched. Different mode maximises
    the new individual's multi-task marginal likelihood from ``init``.
    """
    if mode == "common":
        if shared is None:
            raise ValueError("common mode needs the model's shared hyper-parameters")
        return shared[0], shared[1], {"optimized": False}
    init = init or default_new_hp()
    if len(observations) == 0:
        return init[0], init[1], {"optimized": False}
    res = maximize(
        lambda x: new_individual_log_likelihood(hp_post, observations, *_unpack(x)),
        _pack(*init),
        max_evals,
    )
    hp, noise = _unpack(res.x)
    info = {"optimized": True, "log_likelihood": res.value, "success": res.success}
    if not res.success:
        info["warning"] = f"optimizer: {res.message}"
    return hp, noise, info


def posterior_predict(prior: MultiTaskPrior, observations: IndividualSeries) -> PredictiveDistribution:
    """Condition the multi-task prior on the new individual's observations."""
    grid = prior.grid[prior.target_index]
    if len(observations) == 0:
        return PredictiveDistribution(grid, prior.mean_p.copy(), prior.gamma_pp.copy())
    if len(observations) != prior.observed_index.size or np.any(
        prior.grid[prior.observed_index] != observations.timestamps
    ):
        raise ValueError("observations do not match the prior's observed block")
    F = chol_psd(prior.gamma_ss, role="Gamma_**")
    g_ps = prior.gamma_ps
    mean = prior.mean_p + g_ps @ solve(F, observations.outputs - prior.mean_s)
    cov = prior.gamma_pp - g_ps @ solve(F, prior.gamma_sp)
    info = {"jitter": F.jitter} if F.jitter else {}
    return PredictiveDistribution(grid, mean, 0.5 * (cov + cov.T), info)


def predict(
    model: TrainedModel,
    data: TrainingSet,
    new_obs: IndividualSeries,
    target,
    include_training_grid: bool = True,
    init: tuple[HyperParams, NoiseVariance] | None = None,
) -> PredictiveDistribution:
    """Full multi-task prediction at ``target`` for ``new_obs``."""
    target = np.asarray(target, dtype=float).reshape(-1)
    extra = data.grid if include_training_grid else None
    pgrid = PredictionGrid.build(target, new_obs.timestamps, extra)
    hp_post = hyperposterior_at(model, data, pgrid.tau)
    obs_post = hp_post.restrict(pgrid.observed_index)
    shared = model.params.shared if model.hp_mode == "common" else None
    hp, noise, info = learn_new_hp(new_obs, obs_post, init, model.hp_mode, shared)
    prior = prior_new_individual(hp_post, hp, noise, pgrid.target, pgrid.observed)
    pred = posterior_predict(prior, new_obs)
    info = {**info, **pred.info, "theta_star": hp.to_dict(), "sigma2_star": noise.to_dict()}
    info["init_default"] = init is None
    return PredictiveDistribution(target, pred.mean, pred.cov, info)
