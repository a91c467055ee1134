"""Covariance functions and their hyper-parameter gradients.

Hyper-parameters live in log-space so that the optimisers never have to
worry about positivity. Gradients returned here are therefore derivatives
with respect to ``log_v``, ``log_ell`` and ``log_sigma2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HyperParams:
    """Exponentiated Quadratic parameters ``(v, ell)`` stored as logs."""

    log_v: float
    log_ell: float

    def __post_init__(self):
        if not (math.isfinite(self.log_v) and math.isfinite(self.log_ell)):
            raise ValueError(f"non-finite hyper-parameters: {self!r}")

    @classmethod
    def from_natural(cls, v: float, ell: float) -> "HyperParams":
        return cls(math.log(v), math.log(ell))

    @property
    def v(self) -> float:
        return math.exp(self.log_v)

    @property
    def ell(self) -> float:
        return math.exp(self.log_ell)

    def to_array(self) -> np.ndarray:
        return np.array([self.log_v, self.log_ell])

    @classmethod
    def from_array(cls, x) -> "HyperParams":
        return cls(float(x[0]), float(x[1]))

    def to_dict(self) -> dict:
        return {"log_v": self.log_v, "log_ell": self.log_ell}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(float(d["log_v"]), float(d["log_ell"]))


@dataclass(frozen=True)
class NoiseVariance:
    """Observation noise variance ``sigma2`` stored as its log."""

    log_sigma2: float

    def __post_init__(self):
        if not math.isfinite(self.log_sigma2):
            raise ValueError(f"non-finite noise variance: {self!r}")

    @classmethod
    def from_natural(cls, sigma2: float) -> "NoiseVariance":
        return cls(math.log(sigma2))

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_sigma2)

    def to_dict(self) -> dict:
        return {"log_sigma2": self.log_sigma2}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseVariance":
        return cls(float(d["log_sigma2"]))


def _as_grid(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("timestamps must be finite")
    return x


class Kernel:
    """Minimal stationary-kernel interface.

    Subclasses implement :meth:`profile`, the kernel as a function of the
    squared distance, and :meth:`grad_log_params`.
    """

    n_params = 2

    def profile(self, sqdist: np.ndarray, hp: HyperParams) -> np.ndarray:
        raise NotImplementedError

    def grad_log_params(
        self, sqdist: np.ndarray, value: np.ndarray, hp: HyperParams
    ) -> list[np.ndarray]:
        raise NotImplementedError

    def __call__(self, grid_a, grid_b, hp: HyperParams) -> np.ndarray:
        a, b = _as_grid(grid_a), _as_grid(grid_b)
        sqdist = (a[:, None] - b[None, :]) ** 2
        return self.profile(sqdist, hp)


class ExponentiatedQuadratic(Kernel):
    """``k(x, x') = v^2 exp(-(x - x')^2 / (2 ell^2))``.

    ``nugget`` adds ``v^2 * nugget`` at zero distance (a relative white-noise
    term); it is 0 unless requested.
    """

    def __init__(self, nugget: float = 0.0):
        if not nugget >= 0:
            raise ValueError("nugget must be non-negative")
        self.nugget = float(nugget)

    def __repr__(self):
        return f"ExponentiatedQuadratic(nugget={self.nugget!r})"

    def profile(self, sqdist, hp):
        out = np.exp(2.0 * hp.log_v - 0.5 * sqdist * math.exp(-2.0 * hp.log_ell))
        # exact v^2 at distance zero, whatever ell is
        out[sqdist == 0.0] = math.exp(2.0 * hp.log_v) * (1.0 + self.nugget)
        return out

    def grad_log_params(self, sqdist, value, hp):
        d_log_v = 2.0 * value
        d_log_ell = value * sqdist * math.exp(-2.0 * hp.log_ell)
        d_log_ell[sqdist == 0.0] = 0.0
        return [d_log_v, d_log_ell]


EQ = ExponentiatedQuadratic()


def eq_kernel(x: float, x2: float, hp: HyperParams) -> float:
    """Scalar Exponentiated Quadratic kernel value."""
    if not (math.isfinite(x) and math.isfinite(x2)):
        raise ValueError("kernel inputs must be finite")
    return float(EQ([x], [x2], hp)[0, 0])


def cov_matrix(grid_a, grid_b, hp: HyperParams, kernel: Kernel = EQ) -> np.ndarray:
    """Cross-covariance matrix ``[k(a_j, b_k)]`` (0x0 for empty grids)."""
    return kernel(grid_a, grid_b, hp)


def psi_matrix(grid, hp: HyperParams, noise: NoiseVariance, kernel: Kernel = EQ) -> np.ndarray:
    """Individual covariance: kernel Gram matrix plus ``sigma2 * I``."""
    g = _as_grid(grid)
    out = kernel(g, g, hp)
    out[np.diag_indices_from(out)] += noise.sigma2
    return out


def cov_matrix_grad(
    grid, hp: HyperParams, noise: NoiseVariance | None = None, kernel: Kernel = EQ
) -> list[np.ndarray]:
    """Derivatives of the (noisy) Gram matrix w.r.t. each log-parameter.

    Order is ``[log_v, log_ell]`` followed by ``log_sigma2`` when ``noise``
    is given.
    """
    g = _as_grid(grid)
    sqdist = (g[:, None] - g[None, :]) ** 2
    value = kernel.profile(sqdist, hp)
    grads = kernel.grad_log_params(sqdist, value, hp)
    if noise is not None:
        grads.append(noise.sigma2 * np.eye(g.size))
    return grads
