"""Synthetic multi-task datasets drawn from the generative model.

Each dataset has a random working grid, a linear prior mean ``a t + b``, a
mean process drawn around it, ``m`` training individuals and one held-out
individual whose first ``n_obs`` points are observed and the rest are test
targets.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as la

from .data import IndividualSeries, TrainingSet
from .kernels import HyperParams, NoiseVariance, cov_matrix
from .linalg import quantize

NEW_ID = "new"


def _gaussian_draw(rng, mean, cov):
    # eigen square root: exact for rank-deficient smooth-kernel Gram matrices
    lam, U = la.eigh(cov)
    root = U * np.sqrt(np.clip(lam, 0.0, None))
    return mean + root @ rng.standard_normal(mean.size)


@dataclass
class SimConfig:
    """Sampling settings.

    ``v_range`` bounds the kernel variance ``v^2`` when ``v_range_on`` is
    ``"variance"`` (default) and the amplitude ``v`` when it is
    ``"amplitude"``. With ``log_uniform`` the kernel parameters are drawn
    uniformly in log-scale; the noise variance is always drawn uniformly.
    """

    seed: int = 0
    m: int = 20
    n: int = 200
    n_i: int = 30
    n_obs: int = 20
    input_range: tuple = (0.0, 10.0)
    hp_mode: str = "common"
    grid_mode: str = "common"
    a_range: tuple = (-2.0, 2.0)
    b_range: tuple = (0.0, 10.0)
    v_range: tuple = (1.0, math.exp(5.0))
    ell_range: tuple = (1.0, math.exp(2.0))
    sigma2_range: tuple = (0.0, 1.0)
    log_uniform: bool = True
    v_range_on: str = "variance"

    def __post_init__(self):
        if self.hp_mode not in ("common", "different"):
            raise ValueError(f"hp_mode must be 'common' or 'different', got {self.hp_mode!r}")
        if self.grid_mode not in ("common", "uncommon"):
            raise ValueError(f"grid_mode must be 'common' or 'uncommon', got {self.grid_mode!r}")
        if self.v_range_on not in ("variance", "amplitude"):
            raise ValueError("v_range_on must be 'variance' or 'amplitude'")
        if self.m < 0 or not 1 <= self.n_i <= self.n or not 0 <= self.n_obs <= self.n_i:
            raise ValueError("need m >= 0, 1 <= n_i <= n and 0 <= n_obs <= n_i")
        for name in ("input_range", "a_range", "b_range", "v_range", "ell_range", "sigma2_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty")
        if self.log_uniform and (self.v_range[0] <= 0 or self.ell_range[0] <= 0):
            raise ValueError("log-uniform draws need positive lower bounds")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(eq=False)
class SimDataset:
    config: SimConfig
    grid: np.ndarray
    a: float
    b: float
    theta0: HyperParams
    mu0: np.ndarray
    training: TrainingSet
    new_observed: IndividualSeries
    new_test: IndividualSeries
    params: dict = field(default_factory=dict)
    latent_f: dict = field(default_factory=dict)
    latent_eps: dict = field(default_factory=dict)

    def mu0_at(self, t) -> np.ndarray:
        """True mean process at timestamps of the working grid."""
        t = quantize(np.asarray(t, dtype=float).reshape(-1))
        pos = np.searchsorted(self.grid, t)
        if np.any(self.grid[np.minimum(pos, self.grid.size - 1)] != t):
            raise KeyError("timestamps outside the working grid")
        return self.mu0[pos]

    @property
    def new_individual(self) -> IndividualSeries:
        return IndividualSeries(
            NEW_ID,
            np.concatenate([self.new_observed.timestamps, self.new_test.timestamps]),
            np.concatenate([self.new_observed.outputs, self.new_test.outputs]),
        )


def _draw_kernel_params(rng, config: SimConfig) -> HyperParams:
    def draw(lo, hi):
        if config.log_uniform:
            return rng.uniform(math.log(lo), math.log(hi))
        return math.log(rng.uniform(lo, hi))

    log_v = draw(*config.v_range)
    if config.v_range_on == "variance":
        log_v *= 0.5
    return HyperParams(log_v, draw(*config.ell_range))


def _draw_noise(rng, config: SimConfig) -> NoiseVariance:
    lo, hi = config.sigma2_range
    s2 = rng.uniform(lo, hi)
    return NoiseVariance(math.log(max(s2, 1e-12)))


def simulate_dataset(config: SimConfig) -> SimDataset:
    """Draw one dataset; fully determined by ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    lo, hi = config.input_range
    grid = np.unique(quantize(np.sort(rng.uniform(lo, hi, size=config.n))))
    a = float(rng.uniform(*config.a_range))
    b = float(rng.uniform(*config.b_range))
    theta0 = _draw_kernel_params(rng, config)
    mu0 = _gaussian_draw(rng, a * grid + b, cov_matrix(grid, grid, theta0))

    shared = (_draw_kernel_params(rng, config), _draw_noise(rng, config))
    common_t = np.sort(rng.choice(grid, size=config.n_i, replace=False))

    ids = [f"ind{k:03d}" for k in range(config.m)] + [NEW_ID]
    series, params, latent_f, latent_eps = {}, {}, {}, {}
    for id_ in ids:
        if config.hp_mode == "common":
            hp, noise = shared
        else:
            hp, noise = _draw_kernel_params(rng, config), _draw_noise(rng, config)
        if config.grid_mode == "common":
            t = common_t
        else:
            t = np.sort(rng.choice(grid, size=config.n_i, replace=False))
        f = _gaussian_draw(rng, np.zeros(t.size), cov_matrix(t, t, hp))
        eps = math.sqrt(noise.sigma2) * rng.standard_normal(t.size)
        pos = np.searchsorted(grid, t)
        series[id_] = IndividualSeries(id_, t, mu0[pos] + f + eps)
        params[id_] = (hp, noise)
        latent_f[id_] = f
        latent_eps[id_] = eps

    new = series.pop(NEW_ID)
    k = config.n_obs
    return SimDataset(
        config=config,
        grid=grid,
        a=a,
        b=b,
        theta0=theta0,
        mu0=mu0,
        training=TrainingSet([series[i] for i in ids[:-1]]),
        new_observed=new.subset(slice(0, k)),
        new_test=new.subset(slice(k, None)),
        params=params,
        latent_f=latent_f,
        latent_eps=latent_eps,
    )
