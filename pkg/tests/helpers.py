"""Random small instances shared by several test modules."""

from __future__ import annotations

import numpy as np

from magmagp.data import IndividualSeries, TrainingSet
from magmagp.kernels import HyperParams, NoiseVariance
from magmagp.training import ModelHyperParams


def random_hp(rng) -> tuple[HyperParams, NoiseVariance]:
    return (
        HyperParams(rng.uniform(-0.5, 1.0), rng.uniform(-0.3, 1.0)),
        NoiseVariance(rng.uniform(-2.0, 0.0)),
    )


def random_training_set(rng, m, n_pool, common_grid, n_min=2):
    pool = np.sort(rng.choice(np.arange(0, 100), size=n_pool, replace=False) / 10.0)
    series = []
    shared_t = np.sort(rng.choice(pool, size=rng.integers(n_min, n_pool + 1), replace=False))
    for k in range(m):
        if common_grid:
            t = shared_t
        else:
            t = np.sort(rng.choice(pool, size=rng.integers(n_min, n_pool + 1), replace=False))
        y = 1.0 + np.sin(t) + rng.standard_normal(t.size)
        series.append(IndividualSeries(f"i{k}", t, y))
    return TrainingSet(series)


def random_params(rng, data, mode, mean_nugget=0.0) -> ModelHyperParams:
    theta0 = random_hp(rng)[0]
    if mode == "common":
        return ModelHyperParams("common", theta0, shared=random_hp(rng), mean_nugget=mean_nugget)
    ind = {s.id: random_hp(rng) for s in data}
    return ModelHyperParams("different", theta0, individual=ind, mean_nugget=mean_nugget)


def oracle_individuals(data, params):
    out = []
    for s in data:
        hp, noise = params.for_individual(s.id)
        out.append((s.timestamps, s.outputs, hp.log_v, hp.log_ell, noise.log_sigma2))
    return out


def cli_pipeline(root, seed=1, m=5):
    """simulate -> train -> predict -> evaluate -> benchmark under ``root``; returns exit codes."""
    from magmagp.cli import main

    d = root / "sim"
    codes = [
        main(["simulate", "--seed", str(seed), "--m", str(m), "--out", str(d)]),
        main(["train", "--data", str(d / "train.csv"), "--seed", str(seed), "--out", str(root / "model.json")]),
        main([
            "predict", "--model", str(root / "model.json"), "--data", str(d / "train.csv"),
            "--new-obs", str(d / "new_obs.csv"), "--targets-from", str(d / "new_test.csv"),
            "--out", str(root / "pred.csv"),
        ]),
        main([
            "evaluate", "--pred", str(root / "pred.csv"), "--truth", str(d / "new_test.csv"),
            "--out", str(root / "report.json"),
        ]),
        main([
            "benchmark", "--runs", "2", "--seed", str(seed), "--m", "3", "--n-i", "15",
            "--n-obs", "5", "--out", str(root / "bench"),
        ]),
    ]
    return codes
