"""Iterative coordinator/load protocol for both update rules.

One engine serves convex loads (projection update), finite loads
(hull-minimize, then sample) and mixed fleets; the coordinator step is
kind-agnostic.  Per-load randomness comes from a counter-based stream
keyed by (master_seed, load id, iteration), so trajectories are
bit-reproducible regardless of execution order and can be replayed by
networked agents.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (GridMismatchError, Objective, Profile, TimeGrid, aggregate,
                   norm, norm2)
from .feasible import (ConvexChargeSet, Distribution, FinitePulseSet,
                       hull_minimize, project_convex, sample,
                       stay_probability)

__all__ = [
    "ConfigurationError",
    "LoadSpec",
    "EngineConfig",
    "IterationRecord",
    "Termination",
    "Trajectory",
    "load_draw",
    "coordinator_signal",
    "convex_load_update",
    "finite_load_update",
    "escape_probability",
    "expected_next_objective",
    "run",
    "trajectory_to_csv",
]


class ConfigurationError(ValueError):
    """Invalid engine configuration, surfaced before iteration 1."""


@dataclass(frozen=True)
class LoadSpec:
    """One elastic load: its constraint set and update weight c_i.

    The default weight is the load's total energy request (c_i = X_i),
    which equalizes per-load convergence speed.
    """

    id: int
    constraint: Union[ConvexChargeSet, FinitePulseSet]
    c: Optional[float] = None

    def __post_init__(self):
        if self.c is None:
            object.__setattr__(self, "c", self.constraint.energy)
        if not (self.c > 0):
            raise ConfigurationError(f"load {self.id}: c must be positive, got {self.c}")

    @property
    def is_finite(self) -> bool:
        return isinstance(self.constraint, FinitePulseSet)

    @property
    def grid(self) -> TimeGrid:
        return self.constraint.grid


@dataclass(frozen=True)
class EngineConfig:
    epsilon: float = 1e-6
    max_iterations: int = 1000
    master_seed: int = 0
    record_diagnostics: bool = True
    # The signal-change rule can fire at a non-stationary state when two
    # consecutive iterations happen to leave all profiles unchanged; turn
    # it off to drive all-finite fleets to their exact fixed point.
    stop_on_epsilon: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")


@dataclass
class IterationRecord:
    k: int
    g: Profile
    objective: float
    escape_probability: float
    expected_next_objective: float
    profiles_changed: int


class Termination(enum.Enum):
    TOLERANCE = "tolerance"
    FIXED_POINT = "fixed_point"
    MAX_ITER = "max_iter"


@dataclass
class Trajectory:
    records: List[IterationRecord]
    final_profiles: List[Profile]
    terminated_by: Termination
    initial_objective: float


def load_draw(master_seed: int, load_id: int, k: int) -> float:
    """Uniform [0,1) draw for load `load_id` at iteration `k`.

    Keyed, not sequential: the same (seed, id, k) triple yields the same
    draw in-process and across networked agents.
    """
    return float(np.random.default_rng([master_seed & 0xFFFFFFFFFFFFFFFF,
                                        load_id, k]).random())


def coordinator_signal(b: Profile, xs: Sequence[Profile], C: float) -> Profile:
    """Broadcast signal g = (b + sum_i x_i) / C."""
    if C <= 0:
        raise ConfigurationError(f"C must be positive, got {C}")
    d = aggregate(b, xs)
    return Profile(d.values / C, b.grid)


def convex_load_update(g: Profile, x_prev: Profile, charge_set: ConvexChargeSet,
                       c_i: float) -> Profile:
    """argmin over the set of 2*c_i*<g, x> + norm2(x - x_prev).

    Completing the square reduces this to projecting x_prev - c_i*g.
    """
    z = Profile(x_prev.values - c_i * g.values, g.grid)
    return project_convex(z, charge_set)


def finite_load_update(g: Profile, C: float, x_prev: Profile,
                       pulse_set: FinitePulseSet, c_i: float, draw: float,
                       ) -> Tuple[Profile, Distribution]:
    """Randomized update: hull-minimize against the exact leave-one-out signal, then sample.

    h = (g*C - x_prev) / (C - c_i) equals (b + sum_{j != i} x_j) / sum_{j != i} c_j.
    """
    if C <= c_i:
        raise ConfigurationError(
            f"need C > c_i (got C={C}, c_i={c_i}); a single finite load is not schedulable"
        )
    h = Profile((g.values * C - x_prev.values) / (C - c_i), g.grid)
    _, theta = hull_minimize(h, x_prev, c_i, pulse_set)
    idx = sample(theta, draw)
    return pulse_set.member(idx), theta


def escape_probability(thetas: Sequence[Distribution],
                       prev_indices: Sequence[int]) -> float:
    """P{x^(k) != x^(k-1) | x^(k-1)} = 1 - prod_i theta_i[prev_i] (independent draws)."""
    if len(thetas) != len(prev_indices):
        raise ValueError("thetas and prev_indices must align")
    stay = 1.0
    for theta, prev in zip(thetas, prev_indices):
        stay *= stay_probability(theta, prev)
    return 1.0 - stay


def expected_next_objective(b: Profile, xs_prev: Sequence[Profile],
                            thetas: Sequence[Distribution],
                            sets: Sequence[FinitePulseSet]) -> float:
    """Exact conditional expectation E[L_k | x^(k-1)] for an all-finite fleet.

    Uses the decomposition over independent per-load moves:
    E[L_k] = norm2(d + sum_i mu_i) + sum_i (E[norm2(dx_i)] - norm2(mu_i)),
    where mu_i is the expected move and E[norm2(dx_i)] follows from the
    common member norm: E[norm2(x_i)] = Y_i.
    """
    if not (len(xs_prev) == len(thetas) == len(sets)):
        raise ValueError("xs_prev, thetas, sets must align")
    for i, (x, s) in enumerate(zip(xs_prev, sets)):
        if s.member_index(x) is None:
            raise ValueError(f"load {i}: previous profile is not a member of its set")
    d = aggregate(b, xs_prev)
    dt = b.grid.dt
    total = d.values.copy()
    correction = 0.0
    for x, theta, s in zip(xs_prev, thetas, sets):
        ex = theta.weights @ s.members          # E[x_i^(k)]
        mu = ex - x.values                      # expected move
        total += mu
        e_dx2 = s.sqnorm - 2.0 * dt * float(np.dot(ex, x.values)) \
            + dt * float(np.dot(x.values, x.values))
        correction += e_dx2 - dt * float(np.dot(mu, mu))
    return dt * float(np.dot(total, total)) + correction


def _mixed_expected_objective(b: Profile, prev: List[Profile],
                              new: List[Profile], loads: Sequence[LoadSpec],
                              thetas: Dict[int, Distribution]) -> float:
    """E[L_k | x^(k-1)] with convex moves deterministic and finite moves random."""
    dt = b.grid.dt
    total = aggregate(b, prev).values.copy()
    correction = 0.0
    for i, spec in enumerate(loads):
        if spec.is_finite:
            s = spec.constraint
            theta = thetas[i]
            ex = theta.weights @ s.members
            mu = ex - prev[i].values
            e_dx2 = s.sqnorm - 2.0 * dt * float(np.dot(ex, prev[i].values)) \
                + dt * float(np.dot(prev[i].values, prev[i].values))
            correction += e_dx2 - dt * float(np.dot(mu, mu))
        else:
            mu = new[i].values - prev[i].values
        total += mu
    return dt * float(np.dot(total, total)) + correction


def run(loads: Sequence[LoadSpec], b: Profile, cfg: EngineConfig,
        obj: Objective = Objective()) -> Trajectory:
    """Iterate the coordinator/load protocol until a stopping rule fires.

    Stops on the signal-change rule (k > 2 and ||g^(k-1) - g^(k-2)|| < eps),
    on an exact fixed point when every load is finite and every sampling
    distribution is degenerate at the previous profile, or at max_iterations.
    """
    if not loads:
        raise ConfigurationError("at least one load required")
    ids = [spec.id for spec in loads]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate load ids")
    grid = b.grid
    for spec in loads:
        if spec.grid != grid:
            raise GridMismatchError(f"load {spec.id} is on a different grid")
    C = sum(spec.c for spec in loads)
    finite_idx = [i for i, spec in enumerate(loads) if spec.is_finite]
    for i in finite_idx:
        if C <= loads[i].c:
            raise ConfigurationError(
                f"finite load {loads[i].id} needs C > c_i; add loads or reduce c"
            )
    b_eff = obj.effective_base(b)

    xs: List[Profile] = [Profile.zeros(grid) for _ in loads]
    member_idx: List[Optional[int]] = [None] * len(loads)
    records: List[IterationRecord] = []
    initial_objective = norm2(aggregate(b_eff, xs))
    g_prev: Optional[Profile] = None
    terminated = Termination.MAX_ITER

    for k in range(1, cfg.max_iterations + 1):
        g = coordinator_signal(b_eff, xs, C)
        new_xs: List[Profile] = list(xs)
        thetas: Dict[int, Distribution] = {}
        prev_idx = list(member_idx)
        all_degenerate = bool(finite_idx)
        # Loads sharing a constraint object and weight solve the same hull
        # problem whenever they start from the same member; memoize per
        # iteration (the signal is fixed within one iteration).
        memo: Dict[Tuple[int, float, Optional[int]], Distribution] = {}
        for i, spec in enumerate(loads):
            if spec.is_finite:
                draw = load_draw(cfg.master_seed, spec.id, k)
                key = (id(spec.constraint), spec.c, prev_idx[i])
                theta = memo.get(key)
                if theta is None:
                    _, theta = finite_load_update(g, C, xs[i], spec.constraint,
                                                  spec.c, draw)
                    memo[key] = theta
                idx_new = sample(theta, draw)
                x_new = spec.constraint.member(idx_new)
                thetas[i] = theta
                prev = prev_idx[i]
                if prev is None or not theta.is_degenerate_at(prev):
                    all_degenerate = False
                new_xs[i] = x_new
                member_idx[i] = idx_new
            else:
                new_xs[i] = convex_load_update(g, xs[i], spec.constraint, spec.c)
                all_degenerate = False

        changed = sum(1 for old, new in zip(xs, new_xs) if old != new)
        if cfg.record_diagnostics:
            # Stay probability uses the pre-update member indices; an
            # initialization profile that is not a member cannot be kept.
            stay = 1.0
            for i in finite_idx:
                prev = prev_idx[i]
                stay *= thetas[i].weights[prev] if prev is not None else 0.0
            escape = 1.0 - stay if finite_idx else (0.0 if changed == 0 else 1.0)
            expected = _mixed_expected_objective(b_eff, xs, new_xs, loads, thetas)
        else:
            escape = math.nan
            expected = math.nan

        xs = new_xs
        objective = norm2(aggregate(b_eff, xs))
        records.append(IterationRecord(k, g, objective, escape, expected, changed))

        fleet_all_finite = len(finite_idx) == len(loads)
        if fleet_all_finite and all_degenerate:
            terminated = Termination.FIXED_POINT
            break
        if cfg.stop_on_epsilon and k > 2 and g_prev is not None:
            if norm(Profile(g.values - g_prev.values, grid)) < cfg.epsilon:
                terminated = Termination.TOLERANCE
                break
        g_prev = g

    return Trajectory(records, xs, terminated, initial_objective)


def trajectory_to_csv(traj: Trajectory, path, g_dir=None) -> None:
    """One row per iteration; optionally dump each broadcast signal as CSV."""
    from .core import profile_to_csv
    import os

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "objective", "escape_probability",
                    "expected_next_objective", "profiles_changed", "g_file"])
        for rec in traj.records:
            g_file = ""
            if g_dir is not None:
                g_file = os.path.join(g_dir, f"g_{rec.k:05d}.csv")
                profile_to_csv(rec.g, g_file)
            w.writerow([rec.k, repr(rec.objective), repr(rec.escape_probability),
                        repr(rec.expected_next_objective), rec.profiles_changed,
                        g_file])
