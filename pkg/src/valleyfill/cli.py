"""Command-line entry point.

Commands: ``run``, ``experiment``, ``analyze``, ``coordinator``, ``agent``,
``fleet-gen``.  Configuration lives in a JSON manifest; common flags
(--seed, --iterations, --epsilon, --penetration, --out) override the
manifest one-to-one.  All outputs are CSV or key=value text; plotting is
left to external tools.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analysis, netsim
from .core import Objective, ObjectiveKind, Profile, TimeGrid, aggregate, norm2
from .engine import EngineConfig, LoadSpec, run, trajectory_to_csv
from .scenario import (BaseLoadSpec, FleetSpec, HeterogeneitySpec, SynthParams,
                       build_case_study, fleet_manifest_csv)

__all__ = ["main", "load_manifest", "cmd_run", "cmd_experiment", "cmd_analyze"]

DEFAULT_MANIFEST = {
    "grid": {"horizon_hours": 24.0, "slots": 96},
    "fleet": {"households": 1000, "penetration": 1.0},
    "baseload": {"synth": {}},
    "engine": {"epsilon": 1e-6, "max_iterations": 20, "master_seed": 0},
    "objective": {"kind": "flatten"},
    "out": "out",
    "emit": {"trajectory": True, "profiles": True, "report": True},
}


def load_manifest(path: Optional[str], overrides: argparse.Namespace) -> dict:
    manifest = json.loads(json.dumps(DEFAULT_MANIFEST))  # deep copy
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(manifest.get(key), dict):
                manifest[key].update(value)
            else:
                manifest[key] = value
    if getattr(overrides, "seed", None) is not None:
        manifest["engine"]["master_seed"] = overrides.seed
    if getattr(overrides, "iterations", None) is not None:
        manifest["engine"]["max_iterations"] = overrides.iterations
    if getattr(overrides, "epsilon", None) is not None:
        manifest["engine"]["epsilon"] = overrides.epsilon
    if getattr(overrides, "penetration", None) is not None:
        manifest["fleet"]["penetration"] = overrides.penetration
    if getattr(overrides, "out", None) is not None:
        manifest["out"] = overrides.out
    return manifest


def _grid(manifest: dict) -> TimeGrid:
    g = manifest["grid"]
    return TimeGrid(float(g["horizon_hours"]), int(g["slots"]))


def _fleet_spec(manifest: dict) -> FleetSpec:
    f = dict(manifest["fleet"])
    het = f.pop("heterogeneity", None)
    kwargs = {}
    for key in ("households", "penetration", "ev_rate", "ev_duration_hours"):
        if key in f:
            kwargs[key] = f[key]
    if "start_window" in f:
        kwargs["start_window"] = tuple(f["start_window"])
    if het:
        kwargs["heterogeneity"] = HeterogeneitySpec(
            rate_range=tuple(het.get("rate_range", (1.0, 1.0))),
            duration_range=tuple(het.get("duration_range", (1.0, 1.0))),
        )
    return FleetSpec(**kwargs)


def _baseload_spec(manifest: dict) -> BaseLoadSpec:
    b = manifest["baseload"]
    scale = float(b.get("per_household_scale", 1.0))
    if "csv" in b:
        return BaseLoadSpec(csv_path=b["csv"], per_household_scale=scale)
    synth = b.get("synth", {})
    params = SynthParams(**{k: (tuple(v) if k == "peak_slots" else v)
                            for k, v in synth.items()})
    return BaseLoadSpec(synth=params, per_household_scale=scale)


def _engine_config(manifest: dict) -> EngineConfig:
    e = manifest["engine"]
    return EngineConfig(epsilon=float(e.get("epsilon", 1e-6)),
                        max_iterations=int(e.get("max_iterations", 20)),
                        master_seed=int(e.get("master_seed", 0)))


def _objective(manifest: dict, grid: TimeGrid) -> Objective:
    o = manifest.get("objective", {"kind": "flatten"})
    if o.get("kind", "flatten") == "flatten":
        return Objective()
    target = Profile(np.array(o["target"], dtype=float), grid)
    return Objective(ObjectiveKind.TRACK, target)


def _build(manifest: dict):
    grid = _grid(manifest)
    seed = int(manifest["engine"].get("master_seed", 0))
    b, loads = build_case_study(_fleet_spec(manifest), _baseload_spec(manifest),
                                grid, seed=seed)
    return grid, b, loads


def profiles_to_csv(loads: Sequence[LoadSpec], profiles: Sequence[Profile],
                    path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for spec, p in zip(loads, profiles):
            w.writerow([spec.id] + [repr(float(v)) for v in p.values])


def profiles_from_csv(path, grid: TimeGrid) -> Dict[int, Profile]:
    out: Dict[int, Profile] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                out[int(row[0])] = Profile(np.array([float(v) for v in row[1:]]),
                                           grid)
    return out


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid, b, loads = _build(manifest)
    cfg = _engine_config(manifest)
    obj = _objective(manifest, grid)
    out = manifest["out"]
    os.makedirs(out, exist_ok=True)

    if loads:
        traj = run(loads, b, cfg, obj)
        final_objective = traj.records[-1].objective
        iterations = len(traj.records)
        terminated = traj.terminated_by.value
        escape_last = traj.records[-1].escape_probability
    else:
        traj = None
        final_objective = norm2(b)
        iterations = 0
        terminated = "no_loads"
        escape_last = 0.0

    emit = manifest.get("emit", {})
    if traj is not None and emit.get("trajectory", True):
        trajectory_to_csv(traj, os.path.join(out, "trajectory.csv"))
    if traj is not None and emit.get("profiles", True):
        profiles_to_csv(loads, traj.final_profiles,
                        os.path.join(out, "final_profiles.csv"))
    if emit.get("report", True):
        sets = [s.constraint for s in loads if s.is_finite]
        try:
            ratio = analysis.subopt_ratio_bound(sets, b).ratio_bound if sets else 0.0
        except ValueError:
            ratio = float("nan")
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(f"objective={final_objective!r}\n")
            fh.write(f"iterations={iterations}\n")
            fh.write(f"terminated_by={terminated}\n")
            fh.write(f"final_escape_probability={escape_last!r}\n")
            fh.write(f"ratio_bound={ratio!r}\n")
            fh.write(f"n_loads={len(loads)}\n")
    return 0


def _sweep_penetrations(args) -> List[float]:
    if args.penetrations:
        return [float(p) for p in args.penetrations.split(",")]
    return [0.2, 0.5, 1.0]


def cmd_experiment(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid = _grid(manifest)
    out = manifest["out"]
    os.makedirs(out, exist_ok=True)
    penetrations = _sweep_penetrations(args)
    seeds = list(range(args.seeds))
    base_spec = _baseload_spec(manifest)

    if args.name == "bound-sweep":
        rows = []
        for pen in penetrations:
            fleet = _fleet_spec(manifest)
            fleet = FleetSpec(fleet.households, pen, fleet.ev_rate,
                              fleet.ev_duration_hours, fleet.start_window,
                              fleet.heterogeneity)
            b, loads = build_case_study(fleet, base_spec, grid)
            report = analysis.subopt_ratio_bound(
                [s.constraint for s in loads], b)
            rows.append([repr(pen)] + report.csv_row())
        with open(os.path.join(out, "bound_sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["penetration", "absolute_bound", "ratio_bound",
                        "optimum_lower_bound"])
            w.writerows(rows)
        return 0

    if args.name in ("escape-sweep", "profile-sweep"):
        iterations = int(manifest["engine"].get("max_iterations", 20))
        cfg_base = _engine_config(manifest)
        results_escape: List[List[str]] = []
        profile_rows: Dict[float, np.ndarray] = {}
        for pen in penetrations:
            fleet = _fleet_spec(manifest)
            fleet = FleetSpec(fleet.households, pen, fleet.ev_rate,
                              fleet.ev_duration_hours, fleet.start_window,
                              fleet.heterogeneity)
            escapes = np.zeros((len(seeds), iterations))
            agg = np.zeros(grid.slots)
            for si, seed in enumerate(seeds):
                b, loads = build_case_study(fleet, base_spec, grid, seed=seed)
                cfg = EngineConfig(cfg_base.epsilon, iterations, seed)
                traj = run(loads, b, cfg) if loads else None
                if traj is None:
                    continue
                for rec in traj.records:
                    escapes[si, rec.k - 1] = rec.escape_probability
                # records may stop early at a fixed point: escape stays 0
                agg += aggregate(b, traj.final_profiles).values
            if args.name == "escape-sweep":
                mean = escapes.mean(axis=0)
                for k in range(iterations):
                    results_escape.append([repr(pen), str(k + 1), repr(float(mean[k]))])
            else:
                profile_rows[pen] = agg / max(len(seeds), 1)
        if args.name == "escape-sweep":
            with open(os.path.join(out, "escape_sweep.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["penetration", "k", "mean_escape_probability"])
                w.writerows(results_escape)
        else:
            with open(os.path.join(out, "profile_sweep.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["slot"] + [f"mean_aggregate_kw_pen_{p}" for p in penetrations])
                for t in range(grid.slots):
                    w.writerow([t] + [repr(float(profile_rows[p][t]))
                                      for p in penetrations])
        return 0

    print(f"unknown experiment {args.name!r}", file=sys.stderr)
    return 2


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid, b, loads = _build(manifest)
    profiles = profiles_from_csv(args.profiles, grid)
    checks = set(args.checks.split(",")) if args.checks else {"nash", "ratio"}
    sets = []
    xs = []
    status = 0
    for spec in loads:
        if spec.id not in profiles:
            print(f"load {spec.id}: missing profile", file=sys.stderr)
            return 2
        if not spec.is_finite:
            print(f"load {spec.id}: convex load, skipping membership checks")
            continue
        x = profiles[spec.id]
        if spec.constraint.member_index(x) is None:
            print(f"load {spec.id}: profile is not an admissible member",
                  file=sys.stderr)
            status = 1
            continue
        sets.append(spec.constraint)
        xs.append(x)
    if status:
        return status

    if "nash" in checks and sets:
        value = norm2(aggregate(b, xs))
        tol = 1e-9 * (1 + abs(value))
        report = analysis.is_nash(xs, sets, b, tol)
        print(report.to_text(), end="")
        if not report.is_equilibrium:
            status = 1
    if "gap" in checks and sets:
        try:
            gap, bound, ok = analysis.suboptimality_gap_check(xs, sets, b)
            print(f"gap={gap!r}\ngap_bound={bound!r}\ngap_ok={ok}")
            if not ok:
                status = 1
        except analysis.OracleTooLargeError:
            print("gap=skipped (instance too large to enumerate)")
    if "ratio" in checks and sets:
        print(analysis.subopt_ratio_bound(sets, b).to_text(), end="")
    return status


def cmd_coordinator(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid, b, loads = _build(manifest)
    cfg = _engine_config(manifest)
    roster = [netsim.RosterEntry(s.id, s.is_finite, s.c) for s in loads]
    host, port = args.endpoint.split(":")
    traj = netsim.serve_coordinator(b, roster, cfg, (host, int(port)))
    out = manifest["out"]
    os.makedirs(out, exist_ok=True)
    trajectory_to_csv(traj, os.path.join(out, "trajectory.csv"))
    profiles_to_csv(loads, traj.final_profiles,
                    os.path.join(out, "final_profiles.csv"))
    return 0


def cmd_agent(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid, b, loads = _build(manifest)
    spec = next((s for s in loads if s.id == args.load_id), None)
    if spec is None:
        print(f"load id {args.load_id} not in scenario", file=sys.stderr)
        return 2
    host, port = args.endpoint.split(":")
    seed = int(manifest["engine"].get("master_seed", 0))
    return netsim.run_agent(spec, seed, (host, int(port)))


def cmd_fleet_gen(args) -> int:
    manifest = load_manifest(args.manifest, args)
    grid, b, loads = _build(manifest)
    out = manifest["out"]
    os.makedirs(out, exist_ok=True)
    fleet_manifest_csv(loads, os.path.join(out, "fleet.csv"))
    from .core import profile_to_csv
    profile_to_csv(b, os.path.join(out, "baseload.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valleyfill")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", help="JSON manifest file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--penetration", type=float, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("run", help="run a scenario and emit artifacts")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("experiment", help="seeded sweeps producing CSV tables")
    p.add_argument("name", choices=["escape-sweep", "profile-sweep", "bound-sweep"])
    p.add_argument("--penetrations", help="comma-separated penetration levels")
    p.add_argument("--seeds", type=int, default=10)
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("analyze", help="check saved profiles against the theory")
    p.add_argument("profiles", help="final_profiles.csv from a run")
    p.add_argument("--checks", help="comma-separated subset of nash,gap,ratio")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("coordinator", help="serve the networked coordinator")
    p.add_argument("--endpoint", default="127.0.0.1:7421")
    common(p)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("agent", help="run one networked load agent")
    p.add_argument("--endpoint", default="127.0.0.1:7421")
    p.add_argument("--load-id", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("fleet-gen", help="emit the fleet manifest and base load")
    common(p)
    p.set_defaults(func=cmd_fleet_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
