"""File formats: dataset CSV, model JSON, prediction CSV and report JSON.

Floats are written with ``repr`` so every value survives a round trip
bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .data import IndividualSeries, PriorMean, TrainingSet
from .linalg import quantize
from .prediction import PredictiveDistribution
from .training import Diagnostics, HyperPosterior, ModelHyperParams, TrainedModel

SCHEMA_VERSION = 1
DATASET_HEADER = ("individual_id", "timestamp", "output")
PRED_HEADER = ("timestamp", "mean", "sd", "ci95_lo", "ci95_hi")


class DatasetError(ValueError):
    """Invalid dataset file; ``line`` is 1-based when known."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class SchemaVersionError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def read_series(path) -> list[IndividualSeries]:
    """Parse a dataset CSV into series ordered by first appearance of each id."""
    path = Path(path)
    rows: dict[str, list] = {}
    seen: dict[tuple, int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(path, "empty file")
        if tuple(h.strip() for h in header) != DATASET_HEADER:
            raise DatasetError(path, f"header must be {','.join(DATASET_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DatasetError(path, f"expected 3 fields, got {len(row)}", line)
            id_ = row[0].strip()
            if not id_:
                raise DatasetError(path, "empty individual_id", line)
            try:
                t, y = float(row[1]), float(row[2])
            except ValueError:
                raise DatasetError(path, "timestamp and output must be numbers", line) from None
            if not (math.isfinite(t) and math.isfinite(y)):
                raise DatasetError(path, "non-finite value", line)
            key = (id_, float(quantize(t)))
            if key in seen:
                raise DatasetError(
                    path, f"duplicate observation of {id_!r} at t={t} (first on line {seen[key]})", line
                )
            seen[key] = line
            rows.setdefault(id_, []).append((t, y))
    if not rows:
        raise DatasetError(path, "no observations")
    out = []
    for id_, obs in rows.items():
        arr = np.array(obs, dtype=float)
        out.append(IndividualSeries.from_unsorted(id_, arr[:, 0], arr[:, 1]))
    return out


def load_dataset(path) -> TrainingSet:
    """Load a training set from ``individual_id,timestamp,output`` CSV."""
    return TrainingSet(read_series(path))


def load_series(path, id: str | None = None) -> IndividualSeries:
    """Load a single individual; the file must hold exactly one id unless ``id`` is given."""
    series = read_series(path)
    if id is not None:
        for s in series:
            if s.id == id:
                return s
        raise DatasetError(path, f"individual {id!r} not found")
    if len(series) != 1:
        raise DatasetError(path, f"expected one individual, found {len(series)}")
    return series[0]


def save_dataset(data, path) -> None:
    """Write a TrainingSet or an iterable of series as dataset CSV."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for s in data:
            for t, y in zip(s.timestamps, s.outputs):
                w.writerow((s.id, _fmt(t), _fmt(y)))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _nan_to_none(values):
    return [None if not math.isfinite(v) else float(v) for v in values]


def model_to_dict(model: TrainedModel) -> dict:
    post = model.hyper_posterior
    diag = model.diagnostics.to_dict()
    diag["restart_log_likelihoods"] = _nan_to_none(diag["restart_log_likelihoods"])
    diag["trace"] = _nan_to_none(diag["trace"])
    return {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "hp_mode": model.hp_mode,
        "hyper_parameters": model.params.to_dict(),
        "prior_mean": model.prior_mean.to_dict(),
        "grid": post.grid.tolist(),
        "mean": post.mean.tolist(),
        "cov": post.cov.tolist(),
        "diagnostics": diag,
    }


def model_from_dict(d: dict) -> TrainedModel:
    version = d.get("schema_version")
    if not isinstance(version, int):
        raise SchemaVersionError("model file has no integer schema_version")
    if version > SCHEMA_VERSION:
        raise SchemaVersionError(
            f"model file schema_version {version} is newer than supported {SCHEMA_VERSION}"
        )
    params = ModelHyperParams.from_dict(d["hyper_parameters"])
    if params.mode != d["hp_mode"]:
        raise ValueError("hp_mode does not match the stored hyper-parameters")
    grid = np.array(d["grid"], dtype=float).reshape(-1)
    cov = np.array(d["cov"], dtype=float).reshape(grid.size, grid.size)
    post = HyperPosterior(grid, np.array(d["mean"], dtype=float).reshape(-1), cov)
    diag = dict(d["diagnostics"])
    for key in ("trace", "restart_log_likelihoods"):
        diag[key] = [math.nan if v is None else v for v in diag[key]]
    return TrainedModel(params, PriorMean.from_dict(d["prior_mean"]), post, Diagnostics.from_dict(diag))


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, allow_nan=False) + "\n")


def load_model(path) -> TrainedModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a JSON model file ({exc})") from None
    return model_from_dict(d)


# ---------------------------------------------------------------------------
# predictions and reports
# ---------------------------------------------------------------------------


def save_predictions(pred: PredictiveDistribution, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        cols = (pred.grid, pred.mean, pred.sd, pred.ci95_lower, pred.ci95_upper)
        for row in zip(*cols):
            w.writerow(tuple(_fmt(v) for v in row))


def load_predictions(path) -> dict:
    """Read pred.csv into a dict of column arrays."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRED_HEADER:
            raise DatasetError(path, f"header must be {','.join(PRED_HEADER)}", 1)
        rows = []
        for row in reader:
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DatasetError(path, "non-numeric field", reader.line_num) from None
            if len(vals) != len(PRED_HEADER):
                raise DatasetError(path, f"expected {len(PRED_HEADER)} fields", reader.line_num)
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, len(PRED_HEADER))
    return {name: arr[:, k] for k, name in enumerate(PRED_HEADER)}


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=True) + "\n")


def save_runs_csv(report, path) -> None:
    """Per-run benchmark results as CSV."""
    runs = report.to_dict()["runs"]
    with Path(path).open("w", newline="") as fh:
        if not runs:
            return
        w = csv.DictWriter(fh, fieldnames=list(runs[0]), lineterminator="\n")
        w.writeheader()
        for r in runs:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
