"""Experiment inputs: EV fleets, base-load ingestion and synthesis.

The canonical case study uses a 24 h horizon in 96 slots of 15 minutes,
3.3 kW / 4 h charging pulses and start slots 0..80 (every 15 minutes from
the start of the horizon, latest start 4 h before the end).  The bundled
synthetic residential curve stands in for utility trace data; the CSV
loader accepts real per-household traces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Profile, TimeGrid
from .engine import LoadSpec
from .feasible import FinitePulseSet, make_pulse_set

__all__ = [
    "BaseLoadError",
    "HeterogeneitySpec",
    "FleetSpec",
    "SynthParams",
    "BaseLoadSpec",
    "CANONICAL_GRID",
    "synth_baseload",
    "default_baseload",
    "load_baseload_csv",
    "build_fleet",
    "build_case_study",
    "fleet_manifest_csv",
]

CANONICAL_GRID = TimeGrid(horizon_hours=24.0, slots=96)


class BaseLoadError(ValueError):
    """Malformed base-load file; the message names the offending line."""


@dataclass(frozen=True)
class HeterogeneitySpec:
    """Bounded per-EV jitter; multipliers are drawn uniformly per EV.

    Duration multipliers snap to a whole number of slots so A1-A4 stay
    exact for every EV.
    """

    rate_range: Tuple[float, float] = (1.0, 1.0)
    duration_range: Tuple[float, float] = (1.0, 1.0)


@dataclass(frozen=True)
class FleetSpec:
    households: int
    penetration: float
    ev_rate: float = 3.3               # kW
    ev_duration_hours: float = 4.0
    start_window: Tuple[int, int] = (0, 80)   # inclusive slot range
    heterogeneity: Optional[HeterogeneitySpec] = None

    def __post_init__(self):
        if self.penetration < 0:
            raise ValueError("penetration must be nonnegative")
        if self.households < 0:
            raise ValueError("households must be nonnegative")


@dataclass(frozen=True)
class SynthParams:
    evening_peak_kw: float = 1.1
    morning_peak_kw: float = 1.0
    valley_kw: float = 0.9
    # (evening peak slot, valley slot, morning peak slot) on the grid; the
    # horizon starts in the evening, so defaults put the valley before dawn.
    peak_slots: Tuple[int, int, int] = (4, 36, 52)


@dataclass(frozen=True)
class BaseLoadSpec:
    """Per-household base load source plus scaling (kW per household)."""

    csv_path: Optional[str] = None
    synth: Optional[SynthParams] = None
    per_household_scale: float = 1.0

    def __post_init__(self):
        if (self.csv_path is None) == (self.synth is None):
            raise ValueError("exactly one of csv_path or synth must be given")


def synth_baseload(grid: TimeGrid, evening_peak_kw: float, morning_peak_kw: float,
                   valley_kw: float, peak_slots: Tuple[int, int, int]) -> Profile:
    """Smooth double-hump curve via periodic cosine interpolation.

    Anchors the evening peak, the overnight valley and the morning peak at
    the given slots and interpolates between consecutive anchors with a
    half-cosine ramp; the curve wraps around the horizon seam.
    """
    if min(evening_peak_kw, morning_peak_kw, valley_kw) < 0:
        raise ValueError("anchor levels must be nonnegative")
    anchors = sorted(zip(peak_slots, (evening_peak_kw, valley_kw, morning_peak_kw)))
    slots = grid.slots
    values = np.zeros(slots)
    n = len(anchors)
    for a in range(n):
        s0, v0 = anchors[a]
        s1, v1 = anchors[(a + 1) % n]
        span = (s1 - s0) % slots
        if span == 0:
            span = slots
        for step in range(span):
            t = (s0 + step) % slots
            u = step / span
            values[t] = v0 + (v1 - v0) * 0.5 * (1.0 - np.cos(np.pi * u))
    return Profile(values, grid)


def default_baseload(grid: TimeGrid = CANONICAL_GRID) -> Profile:
    """Bundled synthetic residential curve (kW per household)."""
    p = SynthParams()
    if grid.slots != CANONICAL_GRID.slots:
        # Rescale anchor slots proportionally for non-canonical grids.
        scale = grid.slots / CANONICAL_GRID.slots
        p = SynthParams(peak_slots=tuple(int(round(s * scale)) for s in p.peak_slots))
    return synth_baseload(grid, p.evening_peak_kw, p.morning_peak_kw,
                          p.valley_kw, p.peak_slots)


def load_baseload_csv(path, grid: TimeGrid) -> Profile:
    """Read a per-household base load (`slot,kw_per_household`), validated."""
    values = np.zeros(grid.slots)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["slot", "kw_per_household"]:
            raise BaseLoadError(f"{path}: line 1: expected header slot,kw_per_household")
        line = 1
        count = 0
        for row in reader:
            line += 1
            if count >= grid.slots:
                raise BaseLoadError(f"{path}: line {line}: more rows than the {grid.slots}-slot grid")
            try:
                slot = int(row[0])
                kw = float(row[1])
            except (ValueError, IndexError):
                raise BaseLoadError(f"{path}: line {line}: unparsable row {row!r}") from None
            if slot != count:
                raise BaseLoadError(f"{path}: line {line}: expected slot {count}, got {slot}")
            if kw < 0:
                raise BaseLoadError(f"{path}: line {line}: negative value {kw}")
            values[count] = kw
            count += 1
    if count != grid.slots:
        raise BaseLoadError(f"{path}: line {line + 1}: expected {grid.slots} rows, got {count}")
    return Profile(values, grid)


def _ev_pulse_set(spec: FleetSpec, grid: TimeGrid, ev_index: int,
                  seed: int) -> FinitePulseSet:
    rate = spec.ev_rate
    duration = spec.ev_duration_hours
    if spec.heterogeneity is not None:
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, ev_index])
        lo, hi = spec.heterogeneity.rate_range
        rate *= float(rng.uniform(lo, hi))
        lo, hi = spec.heterogeneity.duration_range
        dur_slots = max(1, round(duration * float(rng.uniform(lo, hi)) / grid.dt))
        duration = dur_slots * grid.dt
    first, last = spec.start_window
    duration_slots = round(duration / grid.dt)
    if first < 0 or last < first:
        raise ValueError(f"start_window {spec.start_window} is invalid")
    # jittered durations may overrun the nominal window; shrink it per EV
    last = min(last, grid.slots - duration_slots)
    if last < first:
        raise ValueError(
            f"start_window first slot {first} leaves no room for a "
            f"{duration} h pulse on the {grid.slots}-slot grid"
        )
    starts = list(range(first, last + 1))
    return make_pulse_set(rate, duration, starts, grid)


def build_fleet(spec: FleetSpec, grid: TimeGrid = CANONICAL_GRID,
                seed: int = 0) -> List[LoadSpec]:
    """n = round(households * penetration) EVs with c_i = X_i."""
    n = round(spec.households * spec.penetration)
    if spec.heterogeneity is None:
        # identical EVs share one constraint object, letting the engine
        # reuse hull solutions across the fleet within an iteration
        if n == 0:
            return []
        shared = _ev_pulse_set(spec, grid, 0, seed)
        return [LoadSpec(id=i, constraint=shared) for i in range(n)]
    return [LoadSpec(id=i, constraint=_ev_pulse_set(spec, grid, i, seed))
            for i in range(n)]


def build_case_study(spec: FleetSpec, base: BaseLoadSpec,
                     grid: TimeGrid = CANONICAL_GRID, seed: int = 0,
                     ) -> Tuple[Profile, List[LoadSpec]]:
    """Base load scaled to the household count, plus the EV fleet."""
    if base.csv_path is not None:
        per_household = load_baseload_csv(base.csv_path, grid)
    else:
        p = base.synth
        per_household = synth_baseload(grid, p.evening_peak_kw, p.morning_peak_kw,
                                       p.valley_kw, p.peak_slots)
    b = Profile(per_household.values * spec.households * base.per_household_scale,
                grid)
    return b, build_fleet(spec, grid, seed)


def fleet_manifest_csv(loads: Sequence[LoadSpec], path) -> None:
    """Per-EV id, rate bound, duration, start window and member count."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "rate_kw", "duration_hours", "first_start_slot",
                    "last_start_slot", "members"])
        for spec in loads:
            s = spec.constraint
            duration = s.energy / s.rate_bound if s.rate_bound else 0.0
            nz = [int(np.flatnonzero(s.members[k])[0]) if np.any(s.members[k]) else 0
                  for k in (0, s.m - 1)]
            w.writerow([spec.id, repr(s.rate_bound), repr(duration),
                        nz[0], nz[1], s.m])
