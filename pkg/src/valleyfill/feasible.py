"""Constraint sets and the per-load solvers.

Two feasible-set representations: a convex box-and-energy polytope
(projection via dual bisection) and an explicit finite set of admissible
profiles (hull minimization via the min-norm-point active-set method,
plus inverse-CDF sampling over the resulting hull weights).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import GridMismatchError, Profile, TimeGrid

__all__ = [
    "InfeasibleSetError",
    "SolverError",
    "ConvexChargeSet",
    "FinitePulseSet",
    "Distribution",
    "ValidationReport",
    "make_pulse_set",
    "validate_A1A4",
    "project_convex",
    "hull_minimize",
    "sample",
    "stay_probability",
    "SNAP_TOLERANCE",
]

# Snap-to-vertex tolerance in profile norm: hull minimizers this close to a
# member collapse to the degenerate distribution on it, making stationary
# points exactly observable.
SNAP_TOLERANCE = 1e-7


class InfeasibleSetError(ValueError):
    """Raised when a constraint set is empty or a start slot is impossible."""


class SolverError(RuntimeError):
    """Raised when an iterative solver fails to reach its tolerance."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


@dataclass(frozen=True)
class ConvexChargeSet:
    """Box (per-slot caps, kW) intersected with a total-energy hyperplane (kWh)."""

    caps: Profile
    energy: float

    def __post_init__(self):
        if np.any(self.caps.values < 0):
            raise ValueError("caps must be nonnegative")
        max_energy = self.caps.grid.dt * float(np.sum(self.caps.values))
        if not (0 <= self.energy <= max_energy * (1 + 1e-12)):
            raise InfeasibleSetError(
                f"energy {self.energy} kWh outside [0, {max_energy}] kWh"
            )

    @property
    def grid(self) -> TimeGrid:
        return self.caps.grid

    def scaled(self, factor: float) -> "ConvexChargeSet":
        """The set {factor * x : x feasible}; models aggregated identical loads."""
        if factor <= 0:
            raise ValueError("factor must be positive")
        return ConvexChargeSet(Profile(self.caps.values * factor, self.grid),
                               self.energy * factor)

    def contains(self, x: Profile, tol: float = 1e-9) -> bool:
        if x.grid != self.grid:
            return False
        if np.any(x.values < -tol) or np.any(x.values > self.caps.values + tol):
            return False
        e = self.grid.dt * float(np.sum(x.values))
        return abs(e - self.energy) <= tol * (1 + abs(self.energy))


class FinitePulseSet:
    """Explicit finite set of admissible profiles with common energy and norm.

    `members` is an (m, S) array; every row is one admissible profile.
    `energy` (kWh), `sqnorm` (kW^2*h) and `rate_bound` (kW) record the
    common constants the members are supposed to share; conformance is
    checked by :func:`validate_A1A4`, not enforced at construction, so that
    deliberately perturbed sets can be built and reported on.
    """

    def __init__(self, members: np.ndarray, grid: TimeGrid, energy: float,
                 sqnorm: float, rate_bound: float):
        members = np.asarray(members, dtype=np.float64)
        if members.ndim != 2 or members.shape[1] != grid.slots:
            raise ValueError(f"members must be (m, {grid.slots}), got {members.shape}")
        if members.shape[0] < 1:
            raise ValueError("at least one member required")
        if not np.all(np.isfinite(members)):
            raise ValueError("member values must be finite")
        seen = set()
        for k in range(members.shape[0]):
            key = members[k].tobytes()
            if key in seen:
                raise ValueError(f"duplicate member at index {k}")
            seen.add(key)
        members = members.copy()
        members.flags.writeable = False
        self.members = members
        self.grid = grid
        self.energy = float(energy)
        self.sqnorm = float(sqnorm)
        self.rate_bound = float(rate_bound)

    @property
    def m(self) -> int:
        return self.members.shape[0]

    def member(self, k: int) -> Profile:
        return Profile(self.members[k], self.grid)

    def member_index(self, x: Profile, tol: float = 0.0) -> Optional[int]:
        """Index of the member equal to x (within tol in each slot), or None."""
        if x.grid != self.grid:
            return None
        for k in range(self.m):
            if np.all(np.abs(self.members[k] - x.values) <= tol):
                return k
        return None

    def scaled(self, factor: float) -> "FinitePulseSet":
        """The set {factor * y : y in members}; models aggregated identical loads."""
        return FinitePulseSet(
            self.members * factor, self.grid,
            energy=self.energy * factor,
            sqnorm=self.sqnorm * factor * factor,
            rate_bound=self.rate_bound * abs(factor),
        )

    def to_csv(self, members_path, meta_path) -> None:
        """Member matrix as CSV rows plus a sidecar metadata record."""
        with open(members_path, "w", newline="") as fh:
            w = csv.writer(fh)
            for k in range(self.m):
                w.writerow([repr(float(v)) for v in self.members[k]])
        with open(meta_path, "w") as fh:
            fh.write(f"grid={self.grid.serialize()}\n")
            fh.write(f"energy={self.energy!r}\n")
            fh.write(f"sqnorm={self.sqnorm!r}\n")
            fh.write(f"rate_bound={self.rate_bound!r}\n")

    @classmethod
    def from_csv(cls, members_path, meta_path) -> "FinitePulseSet":
        meta = {}
        with open(meta_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    key, _, value = line.partition("=")
                    meta[key] = value
        grid = TimeGrid.deserialize(meta["grid"])
        with open(members_path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows), grid, float(meta["energy"]),
                   float(meta["sqnorm"]), float(meta["rate_bound"]))


@dataclass(frozen=True)
class Distribution:
    """Dense probability weights over the members of a finite set."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] < 1:
            raise ValueError("weights must be a nonempty vector")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {np.sum(w)}, expected 1")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def degenerate(cls, m: int, k: int) -> "Distribution":
        w = np.zeros(m)
        w[k] = 1.0
        return cls(w)

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def is_degenerate_at(self, k: int) -> bool:
        return self.weights[k] == 1.0


@dataclass(frozen=True)
class ValidationReport:
    """Max deviations from A1/A3/A4 over all members; A2 is report-only."""

    ok: bool
    max_rate_excess: float       # A1: max |y_t| - rate_bound over members
    max_energy_deviation: float  # A3: max |dt*sum(y) - energy|, relative
    max_sqnorm_deviation: float  # A4: max |norm2(y) - sqnorm|, relative
    max_ramp_rate: float         # max slot-to-slot difference per hour (never enforced)


def make_pulse_set(rate: float, duration_hours: float,
                   allowed_start_slots: Sequence[int], grid: TimeGrid) -> FinitePulseSet:
    """Constant-rate pulse set: one member per allowed start slot.

    Each member charges at `rate` kW for `duration_hours` starting at the
    slot boundary of its start slot, zero elsewhere.  The duration must be
    a whole number of slots and must fit the horizon from every start.
    """
    starts = list(allowed_start_slots)
    if not starts:
        raise ValueError("allowed_start_slots must be nonempty")
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("allowed_start_slots must be strictly increasing")
    duration_slots = duration_hours / grid.dt
    n_slots = round(duration_slots)
    if abs(duration_slots - n_slots) > 1e-9 or n_slots < 1:
        raise ValueError(
            f"duration {duration_hours} h is not a whole number of {grid.dt} h slots"
        )
    members = np.zeros((len(starts), grid.slots))
    for k, start in enumerate(starts):
        if start < 0 or start + n_slots > grid.slots:
            raise InfeasibleSetError(
                f"pulse starting at slot {start} overruns the {grid.slots}-slot horizon"
            )
        members[k, start:start + n_slots] = rate
    return FinitePulseSet(
        members, grid,
        energy=rate * duration_hours,
        sqnorm=rate * rate * duration_hours,
        rate_bound=abs(rate),
    )


def validate_A1A4(pulse_set: FinitePulseSet, tol: float) -> ValidationReport:
    """Check A1/A3/A4 on every member within tol; report-only, never raises."""
    y = pulse_set.members
    dt = pulse_set.grid.dt
    rate_excess = float(np.max(np.abs(y)) - pulse_set.rate_bound)
    energies = dt * np.sum(y, axis=1)
    scale_e = 1 + abs(pulse_set.energy)
    energy_dev = float(np.max(np.abs(energies - pulse_set.energy))) / scale_e
    sqnorms = dt * np.sum(y * y, axis=1)
    scale_n = 1 + abs(pulse_set.sqnorm)
    sqnorm_dev = float(np.max(np.abs(sqnorms - pulse_set.sqnorm))) / scale_n
    if pulse_set.grid.slots > 1:
        ramp = float(np.max(np.abs(np.diff(y, axis=1)))) / dt
    else:
        ramp = 0.0
    ok = rate_excess <= tol and energy_dev <= tol and sqnorm_dev <= tol
    return ValidationReport(ok, rate_excess, energy_dev, sqnorm_dev, ramp)


def project_convex(z: Profile, charge_set: ConvexChargeSet) -> Profile:
    """Euclidean projection of z onto the box-and-energy set.

    KKT form: x_t = clip(z_t - lam, 0, caps_t) with the scalar dual lam
    found by bisection; the energy dt*sum(x) is monotone nonincreasing in
    lam, which makes bisection safe.
    """
    if z.grid != charge_set.grid:
        raise GridMismatchError("profile and constraint set on different grids")
    caps = charge_set.caps.values
    dt = charge_set.grid.dt
    zv = z.values
    target = charge_set.energy

    def energy_at(lam: float) -> float:
        return dt * float(np.sum(np.clip(zv - lam, 0.0, caps)))

    lo = float(np.min(zv) - np.max(caps) - 1.0)
    hi = float(np.max(zv) + 1.0)
    tol = 1e-12 * max(abs(target), 1.0)
    lam = 0.0
    for _ in range(200):
        lam = 0.5 * (lo + hi)
        e = energy_at(lam)
        if abs(e - target) <= tol:
            break
        if e > target:
            lo = lam
        else:
            hi = lam
    x = np.clip(zv - lam, 0.0, caps)
    # Exact energy: distribute the residual over the strictly interior slots.
    residual = target - dt * float(np.sum(x))
    interior = (x > 0) & (x < caps)
    n_int = int(np.sum(interior))
    if n_int > 0:
        x[interior] += residual / (dt * n_int)
        x = np.clip(x, 0.0, caps)
    return Profile(x, z.grid)


def _hull_objective(z: np.ndarray, h: np.ndarray, x_prev: np.ndarray,
                    c_i: float, dt: float) -> float:
    diff = z - x_prev
    return dt * (2.0 * c_i * float(np.dot(h, z)) + float(np.dot(diff, diff)))


def hull_minimize(h: Profile, x_prev: Profile, c_i: float,
                  pulse_set: FinitePulseSet, tol: float = None,
                  max_iterations: int = 10_000,
                  ) -> Tuple[Profile, Distribution]:
    """Minimize Q(z) = 2*c_i*<h, z> + norm2(z - x_prev) over the member hull.

    Completing the square turns this into projecting p = x_prev - c_i*h
    onto the hull, solved by the min-norm-point active-set method: grow a
    corral of members, minimize exactly over its affine hull, and drop
    members whose weight would go negative.  Vertex ties break toward the
    lowest index.  Stops when the duality gap drops below tol, default
    1e-8 * (1 + |Q|).  Returns the minimizer together with hull weights
    whose expectation realizes it; a minimizer within SNAP_TOLERANCE of a
    member in profile norm collapses to the degenerate distribution on the
    nearest member (equal member norms force degeneracy there).
    """
    if h.grid != pulse_set.grid or x_prev.grid != pulse_set.grid:
        raise GridMismatchError("profiles and pulse set on different grids")
    Y = pulse_set.members
    m = pulse_set.m
    dt = pulse_set.grid.dt
    hv, pv = h.values, x_prev.values
    A = Y - (pv - c_i * hv)         # minimize ||sum_k theta_k A_k||^2

    # Warm start: the previous profile's own vertex when it is a member
    # (fixed points then terminate in one gap evaluation), else the member
    # with the lowest Q value.
    start = pulse_set.member_index(x_prev)
    if start is None:
        start = int(np.argmin(np.einsum("ks,ks->k", A, A)))
    corral = [start]
    w = np.array([1.0])
    x = A[start].copy()

    def affine_min(idx):
        """Exact minimizer of ||u^T A[idx]||^2 with sum(u) = 1."""
        n = len(idx)
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = A[idx] @ A[idx].T
        K[:n, n] = 1.0
        K[n, :n] = 1.0
        rhs = np.zeros(n + 1)
        rhs[n] = 1.0
        u, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        return u[:n]

    gap = math.inf
    for _ in range(max_iterations):
        xx = float(np.dot(x, x))
        q = _hull_objective(x + (pv - c_i * hv), hv, pv, c_i, dt)
        gap_tol = tol if tol is not None else 1e-8 * (1.0 + abs(q))
        scores = A @ x
        j = int(np.argmin(scores))
        gap = 2.0 * dt * (xx - float(scores[j]))
        if gap <= gap_tol:
            break
        if j not in corral:
            corral.append(j)
            w = np.append(w, 0.0)
        # minor cycles: shrink the corral until the affine minimizer is
        # a proper convex combination
        while True:
            u = affine_min(corral)
            if np.all(u > 1e-12):
                w = u
                break
            shrink = u < w
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = np.where(shrink, w / (w - u), np.inf)
            t = min(1.0, float(np.min(steps)))
            w = (1.0 - t) * w + t * u
            keep = w > 1e-12
            if np.all(keep):
                w = np.maximum(w, 0.0)
                break
            corral = [k for k, kept in zip(corral, keep) if kept]
            w = w[keep]
        w = w / float(np.sum(w))
        x = w @ A[corral]
    else:
        raise SolverError(
            f"hull minimization did not converge in {max_iterations} iterations",
            gap=gap,
        )

    theta = np.zeros(m)
    theta[corral] = w
    z = theta @ Y

    # Snap to a vertex when the minimizer coincides with a member.
    dist2 = dt * np.einsum("ks,ks->k", Y - z, Y - z)
    nearest = int(np.argmin(dist2))
    if math.sqrt(max(float(dist2[nearest]), 0.0)) <= SNAP_TOLERANCE:
        theta = np.zeros(m)
        theta[nearest] = 1.0
        z = Y[nearest].copy()
    return Profile(z, pulse_set.grid), Distribution(theta)


def sample(theta: Distribution, u: float) -> int:
    """Inverse-CDF sample over cumulative weights in index order."""
    if not (0.0 <= u < 1.0):
        raise ValueError(f"u must be in [0, 1), got {u}")
    cum = np.cumsum(theta.weights)
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, theta.m - 1)


def stay_probability(theta: Distribution, prev_index: int) -> float:
    """Probability that a load keeps its previous member profile."""
    if not (0 <= prev_index < theta.m):
        raise IndexError(f"prev_index {prev_index} out of range for m={theta.m}")
    return float(theta.weights[prev_index])
