"""Command-line interface: simulate, train, predict, evaluate, benchmark.

Failures print a single JSON line ``{"error": <kind>, "message": <text>}``
on stderr and exit with a nonzero status (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import PriorMean
from .evaluation import SWEEP_DEFAULTS, BenchmarkConfig, benchmark, benchmark_sweep
from .io import (
    DatasetError,
    SchemaVersionError,
    load_dataset,
    load_model,
    load_predictions,
    load_series,
    save_dataset,
    save_json,
    save_model,
    save_predictions,
    save_runs_csv,
)
from .linalg import SingularMatrixError, quantize
from .prediction import predict
from .simulation import SimConfig, simulate_dataset
from .training import TrainConfig, train_em

REPORT_SCHEMA_VERSION = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = 1):
        self.kind = kind
        self.status = status
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", status=2)


def _emit_error(kind: str, message: str) -> None:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    config = SimConfig(
        seed=args.seed,
        m=args.m,
        n_i=args.n_i,
        n_obs=args.n_obs,
        hp_mode=args.hp,
        grid_mode=args.grid,
    )
    ds = simulate_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds.training, out / "train.csv")
    save_dataset([ds.new_observed], out / "new_obs.csv")
    save_dataset([ds.new_test], out / "new_test.csv")
    with (out / "mu0.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp", "mu0"))
        for t, v in zip(ds.grid, ds.mu0):
            w.writerow((repr(float(t)), repr(float(v))))
    meta = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "a": ds.a,
        "b": ds.b,
        "theta0": ds.theta0.to_dict(),
        "params": {k: {**hp.to_dict(), **n.to_dict()} for k, (hp, n) in ds.params.items()},
    }
    save_json(meta, out / "simulation.json")


def cmd_train(args) -> None:
    data = load_dataset(args.data)
    config = TrainConfig(
        mode=args.mode,
        prior_mean=PriorMean.parse(args.m0),
        n_restarts=args.restarts,
        tol=args.tol,
        max_iter=args.max_iter,
        seed=args.seed,
    )
    model = train_em(data, config)
    save_model(model, args.out)


def _parse_targets(args) -> np.ndarray:
    if args.targets is not None:
        try:
            vals = [float(x) for x in args.targets.split(",") if x.strip()]
        except ValueError:
            raise CliError("usage", "--targets must be comma-separated numbers", 2) from None
        if not vals or not np.all(np.isfinite(vals)):
            raise CliError("usage", "--targets must list finite numbers", 2)
        return np.array(vals)
    return load_series(args.targets_from).timestamps


def cmd_predict(args) -> None:
    model = load_model(args.model)
    data = load_dataset(args.data)
    new = load_series(args.new_obs)
    target = _parse_targets(args)
    pred = predict(model, data, new, target, include_training_grid=not args.no_training_grid)
    save_predictions(pred, args.out)


def cmd_evaluate(args) -> None:
    pred = load_predictions(args.pred)
    truth = load_series(args.truth)
    t_pred = quantize(pred["timestamp"])
    pos = np.searchsorted(truth.timestamps, t_pred)
    pos = np.minimum(pos, len(truth) - 1)
    found = truth.timestamps[pos] == t_pred
    if not np.any(found):
        raise CliError("data", "no prediction timestamp matches the truth file")
    y = truth.outputs[pos[found]]
    mean = pred["mean"][found]
    inside = (y >= pred["ci95_lo"][found]) & (y <= pred["ci95_hi"][found])
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_points": int(found.sum()),
        "n_unmatched": int((~found).sum()),
        "mse": float(np.mean((mean - y) ** 2)),
        "ci95_coverage": 100.0 * float(np.mean(inside)),
    }
    save_json(report, args.out)


def _strip_timings(d: dict) -> dict:
    d = dict(d)
    d["runs"] = [{k: v for k, v in r.items() if k != "train_seconds"} for r in d["runs"]]
    d["aggregate"] = {k: v for k, v in d["aggregate"].items() if k != "train_seconds"}
    return d


def cmd_benchmark(args) -> None:
    config = BenchmarkConfig(
        runs=args.runs,
        seed=args.seed,
        m=args.m,
        n_i=args.n_i,
        n_obs=args.n_obs,
        grid_mode=args.grid,
        data_hp_mode=args.hp_data,
        model_hp_mode=args.hp_model,
        baseline=not args.no_baseline,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def dump(report, stem):
        d = report.to_dict()
        if not args.timings:
            d = _strip_timings(d)
        save_json({"schema_version": REPORT_SCHEMA_VERSION, **d}, out / f"{stem}.json")
        save_runs_csv(report, out / f"{stem}_runs.csv")
        if not args.timings:
            _drop_column(out / f"{stem}_runs.csv", "train_seconds")

    if args.sweep is None:
        dump(benchmark(config, args.workers), "report")
        return
    values = None
    if args.values:
        values = [int(v) for v in args.values.split(",")]
    reports = benchmark_sweep(config, args.sweep, values, args.workers)
    for value, report in reports.items():
        dump(report, f"report_{args.sweep}{value}")


def _drop_column(path: Path, column: str) -> None:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or column not in rows[0]:
        return
    k = rows[0].index(column)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow(row[:k] + row[k + 1 :])


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="magmagp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m", type=int, default=20, help="training individuals")
    s.add_argument("--n-i", type=int, default=30, help="points per individual")
    s.add_argument("--n-obs", type=int, default=20, help="observed points of the new individual")
    s.add_argument("--grid", choices=("common", "uncommon"), default="common")
    s.add_argument("--hp", choices=("common", "different"), default="common")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit the model by EM")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("common", "different"), default="common")
    t.add_argument("--m0", default="const:0", help="prior mean, const:<c>")
    t.add_argument("--restarts", type=int, default=1)
    t.add_argument("--tol", type=float, default=1e-3)
    t.add_argument("--max-iter", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="predict a new individual")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True, help="training data used for the model")
    q.add_argument("--new-obs", required=True)
    g = q.add_mutually_exclusive_group(required=True)
    g.add_argument("--targets", help="comma-separated timestamps")
    g.add_argument("--targets-from", help="dataset CSV whose timestamps are the targets")
    q.add_argument("--no-training-grid", action="store_true")
    q.add_argument("--seed", type=int, default=0, help="accepted for uniformity; prediction is deterministic")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against held-out truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="repeat simulate/train/predict over seeds")
    b.add_argument("--runs", type=int, default=30)
    b.add_argument("--seed", type=int, default=0, help="seed of the first run")
    b.add_argument("--m", type=int, default=20)
    b.add_argument("--n-i", type=int, default=30)
    b.add_argument("--n-obs", type=int, default=20)
    b.add_argument("--grid", choices=("common", "uncommon"), default="common")
    b.add_argument("--hp-data", choices=("common", "different"), default="common")
    b.add_argument("--hp-model", choices=("common", "different"), default="common")
    b.add_argument("--sweep", choices=sorted(SWEEP_DEFAULTS))
    b.add_argument("--values", help="comma-separated sweep values")
    b.add_argument("--no-baseline", action="store_true")
    b.add_argument("--workers", type=int, default=None, help="process count (default: $MAGMAGP_NUM_WORKERS or 1)")
    b.add_argument("--timings", action="store_true", help="include wall-clock times (not reproducible)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
    except CliError as exc:
        _emit_error(exc.kind, str(exc))
        return exc.status
    except FileNotFoundError as exc:
        _emit_error("missing_file", f"{exc.filename}: no such file")
        return 1
    except SchemaVersionError as exc:
        _emit_error("schema_version", str(exc))
        return 1
    except DatasetError as exc:
        _emit_error("schema", str(exc))
        return 1
    except SingularMatrixError as exc:
        _emit_error("numerical", str(exc))
        return 1
    except (ValueError, KeyError) as exc:
        _emit_error("invalid_input", str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
