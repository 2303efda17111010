from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import pytest
from click.testing import CliRunner

from nearcrash.cli import main
from nearcrash.config import ConfigError, PipelineConfig, load_config
from nearcrash.hotspot import ALL_PARTITIONS, ALL_TIME
from nearcrash.pipeline import histogram, read_manifest, run_all, run_analyze, run_detect, run_simulate
from nearcrash.simgen import read_ground_truth

HEADER = "datapoint_id,journey_id,timestamp,lat,lon,speed,heading,ignition_status\n"


def small(tmp_path: Path, **kw) -> PipelineConfig:
    base = {"output_dir": str(tmp_path / "out"), "seed": 4}
    base.update(kw)
    return load_config(None, **base)


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        th = cfg.thresholds
        assert (th.buffer_radius_m, th.buffer_window_s, th.ttc_threshold_s, th.sync_window_s) == (100, 10, 3.0, 1.5)
        assert (th.gi_cutoff_m, th.gi_d_floor_m, th.risk_boundary) == (1609.344, 100, 0.01)

    def test_ini_and_overrides(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[paths]\ntrajectories = data/t.csv\n[thresholds]\nttc_threshold_s = 2.5\n"
                     "[units]\nspeed_unit = kmh\ntimezone = -06:00\n[run]\nworkers = 3\n"
                     "[features]\nnumeric = roadbed_width, hpms_median_width\ncategorical = surface_type:6\n"
                     "[simulate]\njourneys = 12\nspeed_min = 5\n")
        cfg = load_config(p, buffer_radius_m=80)
        assert cfg.paths.trajectories == str((tmp_path / "data/t.csv").resolve())
        assert cfg.thresholds.ttc_threshold_s == 2.5
        assert cfg.thresholds.buffer_radius_m == 80
        assert cfg.units.speed_unit == "kmh"
        assert cfg.workers == 3
        assert cfg.features.numeric == ("roadbed_width", "hpms_median_width")
        assert dict(cfg.features.categorical) == {"surface_type": 6}
        assert cfg.simulate.journeys == 12
        assert cfg.simulate.speed_range[0] == 5.0

    @pytest.mark.parametrize("text", ["[thresholds]\nttc_threshold_s = -1\n", "[thresholds]\nrisk_boundary = 1.5\n",
                                      "[bogus]\na = 1\n", "[thresholds]\nunknown = 1\n", "[run]\nworkers = 0\n",
                                      "[units]\nspeed_unit = knots\n", "[simulate]\nseed = 3\n"])
    def test_invalid(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_digest_ignores_paths_and_workers(self):
        a = PipelineConfig()
        assert a.digest() == a.with_overrides(workers=4, output_dir="elsewhere").digest()
        assert a.digest() != a.with_overrides(ttc_threshold_s=2.0).digest()


class TestDetect:
    def test_two_injections_recovered(self, tmp_path):
        cfg = small(tmp_path)
        cfg = replace(cfg, simulate=replace(cfg.simulate, journeys=10, conflict_injections=2))
        paths = run_simulate(cfg, quiet=True)
        cfg = cfg.with_overrides(trajectories=str(paths["trajectories"]), network=str(paths["network"]))
        res = run_detect(cfg, quiet=True)
        with open(paths["ground_truth"], encoding="utf-8") as fh:
            truth = read_ground_truth(fh)
        pairs = {tuple(sorted((e.journey_a, e.journey_b))) for e in res.events}
        assert len(res.events) >= 2
        assert all(tuple(sorted((g.journey_a, g.journey_b))) in pairs for g in truth)

    def test_empty_input(self, tmp_path):
        traj = tmp_path / "empty.csv"
        traj.write_text(HEADER)
        cfg = small(tmp_path, trajectories=str(traj))
        res = run_detect(cfg, quiet=True)
        assert res.events == []
        out = tmp_path / "out" / "detect"
        assert (out / "events.csv").read_text().count("\n") == 1
        assert "note = input contains no records" in (out / "diagnostics.txt").read_text()

    def test_without_network_segment_blank(self, tmp_path):
        # simulate elsewhere so no network sits beside the detect output
        paths = run_simulate(small(tmp_path, output_dir=str(tmp_path / "sim")), quiet=True)
        res = run_detect(small(tmp_path, trajectories=str(paths["trajectories"])), quiet=True)
        rows = read_rows(tmp_path / "out" / "detect" / "events.csv")
        assert len(rows) == len(res.events) > 0
        assert all(r["segment_id"] == "" for r in rows)


class TestAnalyze:
    def test_outputs_and_rerun(self, tmp_path):
        cfg = run_all(small(tmp_path), quiet=True)
        out = tmp_path / "out"
        hot = sorted(p.name for p in (out / "analyze" / "hotspot").iterdir())
        assert hot == sorted([f"{p.label}.csv" for p in ALL_PARTITIONS] + [f"{ALL_TIME}.csv"])
        first = tree(out / "analyze")
        run_analyze(cfg, quiet=True)
        assert tree(out / "analyze") == first

    def test_single_class_skips_regression(self, tmp_path):
        cfg = small(tmp_path, risk_boundary=0.999, min_regression_segments=5)
        res = run_analyze(run_all(cfg, quiet=True), quiet=True)
        assert "SingleClass" in res.regression
        assert len(res.hotspots) == 9
        m = read_manifest(tmp_path / "out")
        assert m["stage.analyze.status"] == "incomplete"
        assert not (tmp_path / "out" / "analyze" / "regression.csv").exists()

    def test_assignment_conservation(self, tmp_path):
        run_all(small(tmp_path), quiet=True)
        text = (tmp_path / "out" / "analyze" / "assignment.txt").read_text()
        kv = dict(line.split(" = ") for line in text.splitlines() if " = " in line)
        filtered = sum(int(v) for k, v in kv.items() if k.startswith("filtered_"))
        assert int(kv["events"]) == int(kv["matched"]) + filtered


class TestReport:
    def test_speed_bins(self):
        assert histogram([10, 20, 30], 10) == [(10, 20, 1), (20, 30, 1), (30, 40, 1)]

    def test_empty(self):
        assert histogram([], 5) == []

    def test_float_edges(self):
        assert histogram([0.3], 0.1) == [(pytest.approx(0.3), pytest.approx(0.4), 1)]

    def test_files_and_conservation(self, tmp_path):
        run_all(small(tmp_path), quiet=True)
        rep = tmp_path / "out" / "report"
        events = read_rows(tmp_path / "out" / "detect" / "events.csv")
        dist = read_rows(rep / "hist_pair_distance_m.csv")
        assert sum(int(r["count"]) for r in dist) == len(events)
        assert {p.name for p in rep.iterdir()} == {
            "hist_event_speed_mph.csv", "hist_pair_distance_m.csv", "hist_segment_event_count.csv",
            "hist_segment_risk_ratio.csv", "partition_summary.txt"}
        summary = (rep / "partition_summary.txt").read_text().splitlines()
        assert summary[0].split()[0] == "Class"
        assert len(summary[0].split()) == 10

    def test_empty_events_give_header_only(self, tmp_path):
        traj = tmp_path / "empty.csv"
        traj.write_text(HEADER)
        cfg = small(tmp_path)
        paths = run_simulate(cfg, quiet=True)
        run_all(cfg.with_overrides(trajectories=str(traj), network=str(paths["network"])), quiet=True)
        text = (tmp_path / "out" / "report" / "hist_event_speed_mph.csv").read_text()
        assert text == "event_speed_mph_low,event_speed_mph_high,count\n"


class TestCommandLine:
    def test_version(self):
        res = CliRunner().invoke(main, ["--version"])
        assert res.exit_code == 0

    def test_missing_input_exit_code(self, tmp_path):
        res = CliRunner().invoke(main, ["detect", "--trajectories", str(tmp_path / "none.csv"),
                                        "--output-dir", str(tmp_path / "o"), "--quiet"])
        assert res.exit_code == 1
        assert "[detect]" in res.output
        assert "none.csv" in res.output

    def test_all_with_overrides(self, tmp_path):
        out = tmp_path / "o"
        res = CliRunner().invoke(main, ["all", "--output-dir", str(out), "--seed", "2", "--ttc-threshold", "2.5",
                                        "--journeys", "16", "--injections", "3", "--quiet"])
        assert res.exit_code == 0, res.output
        m = read_manifest(out)
        assert m["stage.report.status"] == "complete"
        assert all(k in m for k in ("config_hash", "stage.detect.version", "output.detect/events.csv"))
        assert len(read_rows(out / "simulate" / "ground_truth.csv")) == 3

    def test_infeasible_injection_is_reported(self, tmp_path):
        res = CliRunner().invoke(main, ["simulate", "--output-dir", str(tmp_path), "--journeys", "2",
                                        "--injections", "5", "--quiet"])
        assert res.exit_code == 1
        assert "injections" in res.output

    def test_bad_config_reported(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[thresholds]\nttc_threshold_s = 0\n")
        res = CliRunner().invoke(main, ["detect", "--config", str(p)])
        assert res.exit_code == 1
        assert "ttc_threshold_s" in res.output
