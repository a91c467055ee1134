"""scikit-learn style wrapper around training and prediction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import IndividualSeries, PriorMean, TrainingSet
from .prediction import PredictiveDistribution, predict
from .training import MEAN_NUGGET, TrainConfig, train_em


def _timestamps(X, name="X", allow_empty=False) -> np.ndarray:
    X = check_array(
        X, ensure_2d=False, dtype=float, ensure_min_samples=0 if allow_empty else 1,
        input_name=name,
    )
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"{name} must hold a single timestamp column, got {X.shape[1]}")
        X = X[:, 0]
    return X


def _group_series(t, y, groups) -> list[IndividualSeries]:
    groups = np.asarray(groups).reshape(-1)
    out = []
    for g in dict.fromkeys(groups.tolist()):
        mask = groups == g
        out.append(IndividualSeries.from_unsorted(str(g), t[mask], y[mask]))
    return out


class MagmaRegressor(BaseEstimator, RegressorMixin):
    """Multi-task GP regressor with a shared mean process.

    ``fit`` takes every training individual stacked in one ``(X, y)`` pair
    with ``groups`` naming the individual of each row. ``predict`` returns
    the posterior mean for a new individual observed at ``(X_obs, y_obs)``;
    without observations it predicts from the mean process alone.

    Parameters
    ----------
    hp_mode : {"common", "different"}
        Whether individuals share one kernel/noise setting.
    prior_mean : float
        Constant prior mean of the mean process.
    n_restarts, tol, max_iter :
        EM settings.
    random_state : int
        Seed for restart initialisations.
    include_training_grid : bool
        Add the training timestamps to the prediction grid.
    mean_nugget : float
        Relative white-noise term of the mean-process kernel.
    """

    def __init__(
        self,
        hp_mode="common",
        prior_mean=0.0,
        n_restarts=1,
        tol=1e-3,
        max_iter=100,
        random_state=0,
        include_training_grid=True,
        mean_nugget=MEAN_NUGGET,
    ):
        self.hp_mode = hp_mode
        self.prior_mean = prior_mean
        self.n_restarts = n_restarts
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state
        self.include_training_grid = include_training_grid
        self.mean_nugget = mean_nugget

    def fit(self, X, y, groups):
        t = _timestamps(X)
        y = check_array(y, ensure_2d=False, dtype=float, input_name="y").reshape(-1)
        check_consistent_length(t, y, groups)
        self.training_set_ = TrainingSet(_group_series(t, y, groups))
        config = TrainConfig(
            mode=self.hp_mode,
            prior_mean=PriorMean(float(self.prior_mean)),
            n_restarts=self.n_restarts,
            tol=self.tol,
            max_iter=self.max_iter,
            seed=self.random_state,
            mean_nugget=self.mean_nugget,
        )
        self.model_ = train_em(self.training_set_, config)
        self.n_individuals_ = len(self.training_set_)
        return self

    def predict_distribution(self, X, X_obs=None, y_obs=None) -> PredictiveDistribution:
        check_is_fitted(self, "model_")
        target = _timestamps(X)
        if X_obs is None:
            new = IndividualSeries.empty()
        else:
            t_obs = _timestamps(X_obs, "X_obs", allow_empty=True)
            y_arr = check_array(
                y_obs, ensure_2d=False, dtype=float, ensure_min_samples=0, input_name="y_obs"
            ).reshape(-1)
            check_consistent_length(t_obs, y_arr)
            new = IndividualSeries.from_unsorted("*", t_obs, y_arr)
        return predict(
            self.model_, self.training_set_, new, target, self.include_training_grid
        )

    def predict(self, X, X_obs=None, y_obs=None, return_std=False):
        dist = self.predict_distribution(X, X_obs, y_obs)
        if return_std:
            return dist.mean, dist.sd
        return dist.mean
