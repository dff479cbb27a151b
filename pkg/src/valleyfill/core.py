"""Discretized time grid, profile algebra, objectives and variance.

Units are fixed throughout the package: rates in kW, time in hours,
energy in kWh, squared norms in kW^2*h.  All integrals are discretized
as left-Riemann sums on a uniform grid, and every reduction runs in
ascending slot index order so results are bit-reproducible.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "GridMismatchError",
    "TimeGrid",
    "Profile",
    "ObjectiveKind",
    "Objective",
    "inner",
    "norm2",
    "norm",
    "aggregate",
    "objective_value",
    "variance",
    "mean_rate",
    "profile_to_csv",
    "profile_from_csv",
]


class GridMismatchError(ValueError):
    """Raised when profiles on different time grids are combined."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, T] into `slots` slots of width `dt` hours."""

    horizon_hours: float
    slots: int

    def __post_init__(self):
        if not (self.horizon_hours > 0 and math.isfinite(self.horizon_hours)):
            raise ValueError(f"horizon_hours must be positive, got {self.horizon_hours}")
        if self.slots < 1:
            raise ValueError(f"slots must be >= 1, got {self.slots}")

    @property
    def dt(self) -> float:
        """Slot width in hours."""
        return self.horizon_hours / self.slots

    def serialize(self) -> str:
        return f"{self.horizon_hours!r},{self.slots}"

    @classmethod
    def deserialize(cls, text: str) -> "TimeGrid":
        horizon, slots = text.strip().split(",")
        return cls(float(horizon), int(slots))


@dataclass(frozen=True)
class Profile:
    """Service/charging rate vector over a grid (kW per slot)."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != self.grid.slots:
            raise ValueError(
                f"profile has {arr.shape} values, grid has {self.grid.slots} slots"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("profile values must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, grid: TimeGrid) -> "Profile":
        return cls(np.zeros(grid.slots), grid)

    @classmethod
    def constant(cls, value: float, grid: TimeGrid) -> "Profile":
        return cls(np.full(grid.slots, float(value)), grid)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Profile):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.grid, self.values.tobytes()))


class ObjectiveKind(enum.Enum):
    FLATTEN = "flatten"
    TRACK = "track"


@dataclass(frozen=True)
class Objective:
    """Flatten the aggregate, or track a target profile (quadratic cost)."""

    kind: ObjectiveKind = ObjectiveKind.FLATTEN
    target: Optional[Profile] = None

    def __post_init__(self):
        if self.kind is ObjectiveKind.TRACK and self.target is None:
            raise ValueError("Track objective requires a target profile")

    def effective_base(self, b: Profile) -> Profile:
        """Base load with the target folded in; Track reduces to Flatten on b - target."""
        if self.kind is ObjectiveKind.FLATTEN:
            return b
        _check_same_grid(b, self.target)
        return Profile(b.values - self.target.values, b.grid)


def _check_same_grid(*profiles: Profile) -> TimeGrid:
    grid = profiles[0].grid
    for p in profiles[1:]:
        if p.grid != grid:
            raise GridMismatchError(f"grids differ: {p.grid} vs {grid}")
    return grid


def inner(f: Profile, g: Profile) -> float:
    """Discretized inner product dt * sum_t f_t g_t  (kW^2*h)."""
    _check_same_grid(f, g)
    return f.grid.dt * float(np.dot(f.values, g.values))


def norm2(f: Profile) -> float:
    """Squared l2 norm <f, f>  (kW^2*h)."""
    return inner(f, f)


def norm(f: Profile) -> float:
    """l2 norm sqrt(<f, f>)."""
    return math.sqrt(norm2(f))


def aggregate(b: Profile, xs: Sequence[Profile]) -> Profile:
    """Pointwise aggregate b + sum_i x_i, summed in load index order."""
    grid = b.grid
    total = b.values.copy()
    for x in xs:
        _check_same_grid(b, x)
        total += x.values
    return Profile(total, grid)


def mean_rate(d: Profile) -> float:
    """Time average (1/T) * dt * sum_t d_t  (kW)."""
    return d.grid.dt * float(np.sum(d.values)) / d.grid.horizon_hours


def objective_value(b: Profile, xs: Sequence[Profile], obj: Objective = Objective()) -> float:
    """Squared l2 norm of the aggregate (Flatten) or of aggregate - target (Track)."""
    return norm2(aggregate(obj.effective_base(b), xs))


def variance(d: Profile) -> float:
    """Time variance of a profile: (1/T) * norm2(d) - mean_rate(d)^2.

    Nonnegative, zero iff the profile is constant across slots.
    """
    mu = mean_rate(d)
    return norm2(d) / d.grid.horizon_hours - mu * mu


def profile_to_csv(p: Profile, path) -> None:
    """Write `slot,value_kw` rows; values round-trip 64-bit floats exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "value_kw"])
        for t, v in enumerate(p.values):
            w.writerow([t, repr(float(v))])


def profile_from_csv(path, grid: TimeGrid) -> Profile:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["slot", "value_kw"]:
            raise ValueError(f"unexpected header {header!r} in {path}")
        values = np.zeros(grid.slots)
        count = 0
        for row in r:
            slot = int(row[0])
            if not (0 <= slot < grid.slots):
                raise ValueError(f"slot {slot} out of range for grid with {grid.slots} slots")
            values[slot] = float(row[1])
            count += 1
    if count != grid.slots:
        raise ValueError(f"expected {grid.slots} rows, got {count} in {path}")
    return Profile(values, grid)
