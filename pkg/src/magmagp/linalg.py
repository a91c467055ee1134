"""Positive-definite linear algebra and pooled-grid scatter helpers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

QUANTUM = 1e-6
JITTER_START = 1e-8
JITTER_MAX = 1e-2


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a covariance stays non-PD even at maximum jitter."""

    def __init__(self, role: str, detail: str = ""):
        self.role = role
        msg = f"matrix '{role}' is not positive definite at maximum jitter"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class JitterWarning(RuntimeWarning):
    """Emitted whenever diagonal jitter had to be added before factorising."""

    def __init__(self, role: str, jitter: float):
        self.role = role
        self.jitter = jitter
        super().__init__(f"added jitter {jitter:.3e} to '{role}'")


def quantize(t) -> np.ndarray:
    """Snap timestamps onto the 1e-6 lattice used for pooling."""
    t = np.asarray(t, dtype=float)
    return np.round(t / QUANTUM) * QUANTUM


@dataclass(frozen=True)
class PsdFactor:
    """Lower Cholesky factor of ``m + jitter * I``."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return self.lower.shape[0]


def chol_psd(m, role: str = "matrix", allow_jitter: bool = True) -> PsdFactor:
    """Cholesky factorisation with escalating diagonal jitter.

    The plain factorisation is tried first; on failure ``1e-8`` times the
    mean diagonal is added and multiplied by ten per retry, up to ``1e-2``
    times the mean diagonal. With ``allow_jitter=False`` the first failure
    raises instead.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"'{role}' must be square, got shape {m.shape}")
    n = m.shape[0]
    if n == 0:
        return PsdFactor(np.zeros((0, 0)))
    if not np.all(np.isfinite(m)):
        raise SingularMatrixError(role, "non-finite entries")
    scale = np.max(np.abs(m))
    if np.max(np.abs(m - m.T)) > 1e-8 * max(scale, 1e-300):
        raise ValueError(f"'{role}' is not symmetric")
    try:
        return PsdFactor(la.cholesky(m, lower=True, check_finite=False))
    except la.LinAlgError:
        if not allow_jitter:
            raise SingularMatrixError(role, "jitter disabled") from None

    mean_diag = float(np.mean(np.diag(m)))
    if not mean_diag > 0:
        raise SingularMatrixError(role, "non-positive mean diagonal")
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * mean_diag
        try:
            lower = la.cholesky(m + jitter * np.eye(n), lower=True, check_finite=False)
        except la.LinAlgError:
            rel *= 10.0
            continue
        warnings.warn(JitterWarning(role, jitter), stacklevel=2)
        return PsdFactor(lower, jitter)
    raise SingularMatrixError(role)


def solve(f: PsdFactor, b) -> np.ndarray:
    """Solve ``(m + jitter I) x = b`` given the factor of ``m``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.size:
        raise ValueError(f"dimension mismatch: factor {f.size}, rhs {b.shape}")
    if f.size == 0:
        return b.copy()
    return la.cho_solve((f.lower, True), b, check_finite=False)


def inverse(f: PsdFactor) -> np.ndarray:
    inv = solve(f, np.eye(f.size))
    return 0.5 * (inv + inv.T)


def log_det(f: PsdFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def _check_map(index_map, target_size: int) -> np.ndarray:
    idx = np.asarray(index_map, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= target_size):
        raise IndexError(f"index map out of range for target size {target_size}")
    return idx


def scatter_precision(sub_precision, index_map, target_size: int) -> np.ndarray:
    """Embed an ``n_i x n_i`` precision into an ``N x N`` zero matrix."""
    idx = _check_map(index_map, target_size)
    sub = np.asarray(sub_precision, dtype=float)
    if sub.shape != (idx.size, idx.size):
        raise ValueError(f"precision shape {sub.shape} does not match map of size {idx.size}")
    out = np.zeros((target_size, target_size))
    out[np.ix_(idx, idx)] = sub
    return out


def scatter_vector(sub_vector, index_map, target_size: int) -> np.ndarray:
    """Zero-padded copy of ``sub_vector`` placed at ``index_map``."""
    idx = _check_map(index_map, target_size)
    sub = np.asarray(sub_vector, dtype=float).reshape(-1)
    if sub.size != idx.size:
        raise ValueError(f"vector of size {sub.size} does not match map of size {idx.size}")
    out = np.zeros(target_size)
    out[idx] = sub
    return out


@dataclass(frozen=True)
class PooledGrid:
    """Union of several timestamp vectors, with per-vector positions.

    ``index_maps[k]`` gives, for the k-th input vector, the positions of its
    (quantised) timestamps inside ``timestamps``.
    """

    timestamps: np.ndarray
    index_maps: tuple

    @classmethod
    def from_grids(cls, grids) -> "PooledGrid":
        grids = [quantize(np.asarray(g, dtype=float).reshape(-1)) for g in grids]
        if grids:
            pooled = np.unique(np.concatenate(grids))
        else:
            pooled = np.zeros(0)
        maps = tuple(np.searchsorted(pooled, g) for g in grids)
        return cls(pooled, maps)

    @property
    def size(self) -> int:
        return self.timestamps.size

    def locate(self, t) -> np.ndarray:
        """Positions of ``t`` in the grid; raises if any timestamp is absent."""
        q = quantize(np.asarray(t, dtype=float).reshape(-1))
        pos = np.searchsorted(self.timestamps, q)
        pos_c = np.minimum(pos, max(self.size - 1, 0))
        if q.size and (self.size == 0 or np.any(self.timestamps[pos_c] != q)):
            raise KeyError("timestamps not on the pooled grid")
        return pos_c
