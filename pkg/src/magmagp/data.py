"""Core data containers: individual series, training sets, prior means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import PooledGrid, quantize


@dataclass(frozen=True, eq=False)
class IndividualSeries:
    """Observations ``y_i`` of one individual at timestamps ``t_i``.

    Timestamps are quantised on construction and must then be strictly
    increasing.
    """

    id: str
    timestamps: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        t = quantize(np.asarray(self.timestamps, dtype=float).reshape(-1))
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if t.shape != y.shape:
            raise ValueError(
                f"individual {self.id!r}: {t.size} timestamps but {y.size} outputs"
            )
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError(f"individual {self.id!r}: non-finite values")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"individual {self.id!r}: timestamps not strictly increasing")
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "outputs", y)

    @classmethod
    def from_unsorted(cls, id, timestamps, outputs) -> "IndividualSeries":
        t = np.asarray(timestamps, dtype=float).reshape(-1)
        y = np.asarray(outputs, dtype=float).reshape(-1)
        order = np.argsort(t, kind="stable")
        return cls(id, t[order], y[order])

    def __len__(self) -> int:
        return self.timestamps.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndividualSeries):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.outputs, other.outputs)
        )

    __hash__ = None

    def subset(self, mask_or_index) -> "IndividualSeries":
        return IndividualSeries(
            self.id, self.timestamps[mask_or_index], self.outputs[mask_or_index]
        )

    @classmethod
    def empty(cls, id: str = "*") -> "IndividualSeries":
        return cls(id, np.zeros(0), np.zeros(0))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """A list of individuals plus their pooled timestamp grid."""

    individuals: tuple
    pooled: PooledGrid = field(init=False)

    def __post_init__(self):
        inds = tuple(self.individuals)
        ids = [s.id for s in inds]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate individual ids")
        object.__setattr__(self, "individuals", inds)
        object.__setattr__(self, "pooled", PooledGrid.from_grids([s.timestamps for s in inds]))

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self):
        return iter(self.individuals)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainingSet):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))

    __hash__ = None

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.individuals]

    @property
    def grid(self) -> np.ndarray:
        return self.pooled.timestamps

    def index_map(self, k: int) -> np.ndarray:
        return self.pooled.index_maps[k]


@dataclass(frozen=True, eq=False)
class PriorMean:
    """Prior mean ``m0`` of the mean process.

    Either a constant, or values tabulated on a grid; tabulated means are
    linearly interpolated and held constant outside their grid.
    """

    constant: float | None = 0.0
    grid: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=float).reshape(-1)
            v = np.asarray(self.values, dtype=float).reshape(-1)
            if g.size == 0 or g.shape != v.shape or np.any(np.diff(g) <= 0):
                raise ValueError("tabulated prior mean needs matching increasing grid/values")
            object.__setattr__(self, "grid", g)
            object.__setattr__(self, "values", v)
            object.__setattr__(self, "constant", None)
        elif self.constant is None:
            raise ValueError("prior mean needs a constant or a tabulated grid")

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float).reshape(-1)
        if self.grid is None:
            return np.full(t.size, float(self.constant))
        return np.interp(t, self.grid, self.values)

    def to_dict(self) -> dict:
        if self.grid is None:
            return {"kind": "constant", "value": float(self.constant)}
        return {"kind": "tabulated", "grid": self.grid.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorMean":
        if d["kind"] == "constant":
            return cls(float(d["value"]))
        if d["kind"] == "tabulated":
            return cls(None, np.array(d["grid"], dtype=float), np.array(d["values"], dtype=float))
        raise ValueError(f"unknown prior mean kind {d['kind']!r}")

    @classmethod
    def parse(cls, text: str) -> "PriorMean":
        """Parse the CLI form ``const:<c>``."""
        kind, _, value = text.partition(":")
        if kind != "const" or not value:
            raise ValueError(f"prior mean must look like 'const:<c>', got {text!r}")
        return cls(float(value))
