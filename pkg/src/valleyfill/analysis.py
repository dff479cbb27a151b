"""Theory-verification oracles: Nash checks, brute-force optimum, bounds.

All checks are read-only and exhaustive.  Tie-breaking is always toward
the lowest member index so equilibrium checks are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Objective, Profile, aggregate, norm2
from .feasible import FinitePulseSet

__all__ = [
    "OracleTooLargeError",
    "NashReport",
    "BoundReport",
    "best_response",
    "is_nash",
    "brute_force_optimum",
    "suboptimality_gap_check",
    "subopt_ratio_bound",
    "convex_stationarity_residual",
]

ENUMERATION_CAP = 10_000_000


class OracleTooLargeError(RuntimeError):
    """Product space exceeds the enumeration cap."""


@dataclass(frozen=True)
class NashReport:
    is_equilibrium: bool
    worst_violation: float       # kW^2*h; max positive best-response gap
    violating_load: Optional[int]

    def to_text(self) -> str:
        return (f"is_equilibrium={self.is_equilibrium}\n"
                f"worst_violation={self.worst_violation!r}\n"
                f"violating_load={self.violating_load}\n")


@dataclass(frozen=True)
class BoundReport:
    absolute_bound: float        # 2*sum(Y) for nonnegative members (4*sum(Y) signed)
    ratio_bound: float
    optimum_lower_bound: float   # flat-profile lower bound on norm2 of the optimum

    def to_text(self) -> str:
        return (f"absolute_bound={self.absolute_bound!r}\n"
                f"ratio_bound={self.ratio_bound!r}\n"
                f"optimum_lower_bound={self.optimum_lower_bound!r}\n")

    def csv_row(self) -> List[str]:
        return [repr(self.absolute_bound), repr(self.ratio_bound),
                repr(self.optimum_lower_bound)]


def _check_membership(xs: Sequence[Profile], sets: Sequence[FinitePulseSet]) -> None:
    for i, (x, s) in enumerate(zip(xs, sets)):
        if s.member_index(x) is None:
            raise ValueError(f"load {i}: profile is not a member of its set")


def best_response(i: int, xs: Sequence[Profile], b: Profile,
                  pulse_set: FinitePulseSet) -> Tuple[int, float]:
    """Exhaustive argmin over members y of <b + sum_{j != i} x_j, y>.

    Equal member energies make this equivalent to minimizing the full-game
    cost <b + sum_j x_j, x_i>.  Ties break toward the lowest index.
    """
    if pulse_set.member_index(xs[i]) is None:
        raise ValueError(f"load {i}: profile is not a member of its set")
    others = aggregate(b, [x for j, x in enumerate(xs) if j != i])
    dt = b.grid.dt
    scores = dt * (pulse_set.members @ others.values)
    idx = int(np.argmin(scores))
    return idx, float(scores[idx])


def is_nash(xs: Sequence[Profile], sets: Sequence[FinitePulseSet], b: Profile,
            tol: float) -> NashReport:
    """Check the best-response condition for every load within tol."""
    _check_membership(xs, sets)
    dt = b.grid.dt
    worst = 0.0
    violator = None
    for i, (x, s) in enumerate(zip(xs, sets)):
        others = aggregate(b, [y for j, y in enumerate(xs) if j != i])
        current = dt * float(np.dot(others.values, x.values))
        best = float(np.min(dt * (s.members @ others.values)))
        gap = current - best
        if gap > worst:
            worst = gap
            violator = i
    return NashReport(worst <= tol, worst, violator if worst > tol else None)


def brute_force_optimum(sets: Sequence[FinitePulseSet], b: Profile,
                        obj: Objective = Objective(),
                        cap: int = ENUMERATION_CAP,
                        ) -> Tuple[Tuple[int, ...], float]:
    """Exact global optimum of the load-balancing objective by enumeration."""
    total = 1
    for s in sets:
        total *= s.m
        if total > cap:
            raise OracleTooLargeError(
                f"product space has more than {cap} selections"
            )
    base = obj.effective_base(b)
    dt = b.grid.dt
    best_value = math.inf
    best_choice: Tuple[int, ...] = ()

    def recurse(level: int, partial: np.ndarray, choice: Tuple[int, ...]) -> None:
        nonlocal best_value, best_choice
        if level == len(sets) - 1:
            totals = partial[None, :] + sets[level].members
            values = dt * np.einsum("ks,ks->k", totals, totals)
            k = int(np.argmin(values))
            if values[k] < best_value:
                best_value = float(values[k])
                best_choice = choice + (k,)
            return
        for k in range(sets[level].m):
            recurse(level + 1, partial + sets[level].members[k], choice + (k,))

    if not sets:
        return (), norm2(base)
    recurse(0, base.values.copy(), ())
    return best_choice, best_value


def suboptimality_gap_check(x_s: Sequence[Profile], sets: Sequence[FinitePulseSet],
                            b: Profile, obj: Objective = Objective(),
                            ) -> Tuple[float, float, bool]:
    """Gap of a stationary profile against the enumerated optimum vs 2/4*sum(Y).

    The caller is responsible for stationarity of x_s (assert via is_nash).
    The bound is 2*sum(Y_i) when all members are nonnegative, 4*sum(Y_i)
    otherwise.
    """
    _check_membership(x_s, sets)
    _, optimum = brute_force_optimum(sets, b, obj)
    value = norm2(aggregate(obj.effective_base(b), list(x_s)))
    gap = value - optimum
    nonnegative = all(np.all(s.members >= 0) for s in sets)
    bound = (2.0 if nonnegative else 4.0) * sum(s.sqnorm for s in sets)
    return gap, bound, gap <= bound + 1e-9


def convex_stationarity_residual(loads, xs: Sequence[Profile], b: Profile) -> float:
    """First-order optimality residual for a convex-only profile.

    Each load's fixed-point condition is x_i = Proj_i(x_i - c_i * g) with
    g the broadcast signal at x; the residual is the root sum of squared
    per-load violations, zero exactly at stationary points.
    """
    from .engine import convex_load_update, coordinator_signal

    C = sum(spec.c for spec in loads)
    g = coordinator_signal(b, list(xs), C)
    total = 0.0
    for spec, x in zip(loads, xs):
        proj = convex_load_update(g, x, spec.constraint, spec.c)
        total += norm2(Profile(x.values - proj.values, b.grid))
    return math.sqrt(total)


def subopt_ratio_bound(sets: Sequence[FinitePulseSet], b: Profile) -> BoundReport:
    """Computable upper bound on the suboptimality ratio of stationary profiles.

    The unknown optimal objective in the denominator is replaced by the
    flat-profile lower bound T * mu_d^2 (Jensen), which only loosens the
    bound.  Requires nonnegative members; degenerate instances with zero
    mean aggregate are rejected.
    """
    for i, s in enumerate(sets):
        if np.any(s.members < 0):
            raise ValueError(f"set {i} has negative members; ratio bound needs nonnegative profiles")
    T = b.grid.horizon_hours
    total_energy = b.grid.dt * float(np.sum(b.values)) + sum(s.energy for s in sets)
    mu_d = total_energy / T
    if mu_d == 0:
        if not sets:
            return BoundReport(0.0, 0.0, 0.0)
        raise ValueError("mean aggregate rate is zero; ratio bound undefined")
    sum_y = sum(s.sqnorm for s in sets)
    denom = T * mu_d * mu_d
    return BoundReport(2.0 * sum_y, 2.0 * sum_y / denom, denom)
