import json

import pytest

from valleyfill.analysis import brute_force_optimum
from valleyfill.cli import main, profiles_from_csv
from valleyfill.core import TimeGrid, norm2
from valleyfill.scenario import (BaseLoadSpec, FleetSpec, SynthParams,
                                 build_case_study)

SMALL_MANIFEST = {
    "grid": {"horizon_hours": 24.0, "slots": 24},
    "fleet": {"households": 10, "penetration": 0.3,
              "start_window": [0, 20]},
    "engine": {"max_iterations": 15, "master_seed": 3},
}


def write_manifest(tmp_path, extra=None, name="manifest.json"):
    manifest = json.loads(json.dumps(SMALL_MANIFEST))
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(manifest.get(key), dict):
            manifest[key].update(value)
        else:
            manifest[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(manifest))
    return str(path)


def small_scenario(penetration=0.3, seed=3):
    grid = TimeGrid(24.0, 24)
    spec = FleetSpec(households=10, penetration=penetration,
                     start_window=(0, 20))
    return grid, build_case_study(spec, BaseLoadSpec(synth=SynthParams()),
                                  grid, seed=seed)


class TestRun:
    def test_artifacts(self, tmp_path):
        out = tmp_path / "out"
        manifest = write_manifest(tmp_path)
        assert main(["run", "--manifest", manifest, "--out", str(out)]) == 0
        assert (out / "trajectory.csv").exists()
        assert (out / "final_profiles.csv").exists()
        report = (out / "report.txt").read_text()
        assert "objective=" in report
        assert "terminated_by=" in report
        assert "n_loads=3" in report

    def test_zero_penetration_objective_is_base_norm(self, tmp_path):
        out = tmp_path / "out"
        manifest = write_manifest(tmp_path)
        assert main(["run", "--manifest", manifest, "--out", str(out),
                     "--penetration", "0"]) == 0
        report = dict(line.split("=", 1)
                      for line in (out / "report.txt").read_text().splitlines())
        _, (b, loads) = small_scenario(penetration=0.0)
        assert loads == []
        assert float(report["objective"]) == pytest.approx(norm2(b), rel=1e-12)
        assert report["terminated_by"] == "no_loads"

    def test_reruns_are_byte_identical(self, tmp_path):
        manifest = write_manifest(tmp_path)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["run", "--manifest", manifest, "--out", str(out)]) == 0
            outs.append(out)
        for artifact in ("trajectory.csv", "final_profiles.csv", "report.txt"):
            assert (outs[0] / artifact).read_bytes() == \
                (outs[1] / artifact).read_bytes()

    def test_seed_override_changes_trajectory(self, tmp_path):
        manifest = write_manifest(tmp_path)
        texts = []
        for seed in ("3", "4"):
            out = tmp_path / f"s{seed}"
            assert main(["run", "--manifest", manifest, "--out", str(out),
                         "--seed", seed]) == 0
            texts.append((out / "final_profiles.csv").read_text())
        assert texts[0] != texts[1]

    def test_missing_baseload_csv_is_reported(self, tmp_path):
        manifest = write_manifest(
            tmp_path, {"baseload": {"csv": str(tmp_path / "nope.csv")}})
        del_synth = json.loads((tmp_path / "manifest.json").read_text())
        del_synth["baseload"].pop("synth", None)
        (tmp_path / "manifest.json").write_text(json.dumps(del_synth))
        assert main(["run", "--manifest", manifest,
                     "--out", str(tmp_path / "o")]) == 1


class TestAnalyze:
    def write_profiles(self, path, rows):
        with open(path, "w", newline="") as fh:
            for load_id, values in rows:
                fh.write(",".join([str(load_id)] +
                                  [repr(float(v)) for v in values]) + "\n")

    def test_optimal_profiles_pass_all_checks(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path)
        grid, (b, loads) = small_scenario()
        sets = [spec.constraint for spec in loads]
        choice, _ = brute_force_optimum(sets, b)
        profiles = tmp_path / "profiles.csv"
        self.write_profiles(profiles,
                            [(spec.id, s.members[k])
                             for spec, s, k in zip(loads, sets, choice)])
        status = main(["analyze", str(profiles), "--manifest", manifest,
                       "--checks", "nash,gap,ratio"])
        captured = capsys.readouterr()
        assert status == 0, captured.err
        assert "is_equilibrium=True" in captured.out
        assert "gap_ok=True" in captured.out
        assert "ratio_bound=" in captured.out

    def test_non_member_profile_names_the_load(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path)
        grid, (b, loads) = small_scenario()
        rows = [(spec.id, spec.constraint.members[0]) for spec in loads]
        # corrupt the second load's profile so it is no longer a member
        rows[1] = (rows[1][0], rows[1][1] + 0.01)
        profiles = tmp_path / "profiles.csv"
        self.write_profiles(profiles, rows)
        status = main(["analyze", str(profiles), "--manifest", manifest])
        captured = capsys.readouterr()
        assert status == 1
        assert f"load {rows[1][0]}: profile is not an admissible member" \
            in captured.err

    def test_missing_profile_rejected(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path)
        grid, (b, loads) = small_scenario()
        profiles = tmp_path / "profiles.csv"
        self.write_profiles(profiles, [(loads[0].id,
                                        loads[0].constraint.members[0])])
        status = main(["analyze", str(profiles), "--manifest", manifest])
        assert status == 2

    def test_round_trip_of_run_output(self, tmp_path):
        out = tmp_path / "out"
        manifest = write_manifest(tmp_path)
        assert main(["run", "--manifest", manifest, "--out", str(out)]) == 0
        grid = TimeGrid(24.0, 24)
        profiles = profiles_from_csv(out / "final_profiles.csv", grid)
        assert sorted(profiles) == [0, 1, 2]
        # membership must round trip bit-exactly through the CSV
        _, (b, loads) = small_scenario()
        for spec in loads:
            assert spec.constraint.member_index(profiles[spec.id]) is not None


class TestExperiment:
    def test_bound_sweep(self, tmp_path):
        manifest = write_manifest(tmp_path)
        out = tmp_path / "out"
        assert main(["experiment", "bound-sweep", "--manifest", manifest,
                     "--out", str(out), "--penetrations", "0.3,0.6"]) == 0
        lines = (out / "bound_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "penetration,absolute_bound,ratio_bound,optimum_lower_bound"
        assert len(lines) == 3
        r1 = float(lines[1].split(",")[2])
        r2 = float(lines[2].split(",")[2])
        assert 0 < r1 < r2   # more EVs, larger bound at fixed base load

    def test_escape_sweep(self, tmp_path):
        manifest = write_manifest(tmp_path, {"engine": {"max_iterations": 5}})
        out = tmp_path / "out"
        assert main(["experiment", "escape-sweep", "--manifest", manifest,
                     "--out", str(out), "--penetrations", "0.3",
                     "--seeds", "2"]) == 0
        lines = (out / "escape_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "penetration,k,mean_escape_probability"
        assert len(lines) == 1 + 5
        for line in lines[1:]:
            escape = float(line.split(",")[2])
            assert 0.0 <= escape <= 1.0

    def test_profile_sweep(self, tmp_path):
        manifest = write_manifest(tmp_path, {"engine": {"max_iterations": 5}})
        out = tmp_path / "out"
        assert main(["experiment", "profile-sweep", "--manifest", manifest,
                     "--out", str(out), "--penetrations", "0.3",
                     "--seeds", "2"]) == 0
        lines = (out / "profile_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "slot,mean_aggregate_kw_pen_0.3"
        assert len(lines) == 1 + 24


class TestFleetGen:
    def test_artifacts(self, tmp_path):
        manifest = write_manifest(tmp_path)
        out = tmp_path / "out"
        assert main(["fleet-gen", "--manifest", manifest,
                     "--out", str(out)]) == 0
        fleet = (out / "fleet.csv").read_text().strip().splitlines()
        assert len(fleet) == 1 + 3
        base = (out / "baseload.csv").read_text().strip().splitlines()
        assert base[0] == "slot,value_kw"
        assert len(base) == 1 + 24
