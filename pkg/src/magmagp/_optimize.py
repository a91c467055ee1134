from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .linalg import SingularMatrixError

# box on every log-parameter; keeps exp() finite during line searches
LOG_BOUND = 15.0
MAX_EVALS = 200


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    success: bool
    message: str
    n_evals: int


def maximize(fun, x0, max_evals: int = MAX_EVALS) -> OptimResult:
    """Maximise ``fun(x) -> (value, grad)`` with L-BFGS-B.

    The best point seen is returned, so the result is never worse than
    ``x0``. Evaluations that hit a singular matrix count as ``-inf``.
    """
    x0 = np.clip(np.asarray(x0, dtype=float), -LOG_BOUND, LOG_BOUND)
    best = {"x": x0.copy(), "f": -np.inf, "g": np.zeros_like(x0)}
    n_evals = 0

    def neg(x):
        nonlocal n_evals
        n_evals += 1
        try:
            f, g = fun(x)
        except SingularMatrixError:
            return 1e300, np.zeros_like(x)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return 1e300, np.zeros_like(x)
        if f > best["f"]:
            best["x"], best["f"], best["g"] = x.copy(), f, np.asarray(g, dtype=float)
        return -f, -np.asarray(g, dtype=float)

    f0, _ = neg(x0)
    if f0 >= 1e300:
        raise SingularMatrixError("objective", "initial point is not evaluable")
    res = minimize(
        neg,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(-LOG_BOUND, LOG_BOUND)] * x0.size,
        options={"maxfun": max_evals, "maxiter": max_evals, "ftol": 1e-12, "gtol": 1e-8},
    )
    success = bool(res.success)
    message = str(res.message)
    if not success and "ABNORMAL" in message:
        # line search stalled at round-off; fine if the projected gradient vanishes
        g = best["g"].copy()
        at_lo = best["x"] <= -LOG_BOUND
        at_hi = best["x"] >= LOG_BOUND
        g[(at_lo & (g < 0)) | (at_hi & (g > 0))] = 0.0
        if np.max(np.abs(g), initial=0.0) <= 1e-5 * max(1.0, abs(best["f"])):
            success = True
    return OptimResult(best["x"], float(best["f"]), success, message, n_evals)
