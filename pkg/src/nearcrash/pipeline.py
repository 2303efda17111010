"""Stage runners behind the command line: simulate, detect, analyze, report.

Each stage reads and writes plain files under the output directory and
records its status and output digests in ``manifest.txt``.  Wall-clock
timings go to stderr only, so the output tree depends on nothing but the
configuration and the inputs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
import sys
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .detect import (DetectParams, coalesce_events, number_events, read_events_csv, screen_pairs,
                     write_events_csv, write_events_geojson)
from .hotspot import (ALL_PARTITIONS, ALL_TIME, GiStarResult, HolidayCalendar, SpatialUnit, aggregate_zones,
                      build_weights, gi_star, partition_of, partition_periods, read_gi_csv, resolve_timezone,
                      summarize_partitions, write_gi_csv)
from .index import build_index, emit_candidate_pairs
from .ingest import (SPEED_FACTORS, IngestConfig, IngestDiagnostics, IngestError, PointTable, assemble_journeys,
                     filter_journeys, parse_records)
from .mapmatch import (RiskDiagnostics, assign_events, count_traversals, load_network, match_points,
                       read_risk_csv, risk_geojson, segment_risk_ratio, write_risk_csv)
from .simgen import generate_journeys, generate_network, write_ground_truth, write_network, write_trajectories
from .stats import (ConstantColumn, EmptyEligibleSet, ExactCollinearity, NotConvergedWarning, SeparationDetected,
                    encode_features, fit_logistic, model_report)

STAGE_VERSIONS = {"simulate": "1", "detect": "1", "analyze": "1", "report": "1"}
MANIFEST = "manifest.txt"


class StageError(RuntimeError):
    """Fatal stage failure naming the stage and the offending input."""

    def __init__(self, stage: str, path, message: str):
        self.stage = stage
        self.path = str(path) if path else ""
        super().__init__(f"[{stage}] {self.path + ': ' if self.path else ''}{message}")


# -- bookkeeping ------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_manifest(out: Path) -> dict[str, str]:
    path = Path(out) / MANIFEST
    if not path.exists():
        return {}
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition(" = ")
        if sep:
            entries[key] = value
    return entries


def _update_manifest(cfg: PipelineConfig, stage: str, status: str, inputs: dict[str, Path] | None = None,
                     notes: dict[str, str] | None = None) -> None:
    out = cfg.output_dir
    entries = {k: v for k, v in read_manifest(out).items()
               if not k.startswith((f"stage.{stage}.", f"output.{stage}/"))}
    entries["config_hash"] = cfg.digest()
    entries[f"stage.{stage}.version"] = STAGE_VERSIONS[stage]
    entries[f"stage.{stage}.status"] = status
    for role, p in (inputs or {}).items():
        if p and Path(p).is_file():
            entries[f"stage.{stage}.input.{role}"] = _sha256(Path(p))
    for k, v in (notes or {}).items():
        entries[f"stage.{stage}.{k}"] = v
    stage_dir = out / stage
    if stage_dir.is_dir():
        for f in sorted(stage_dir.rglob("*")):
            if f.is_file():
                entries[f"output.{f.relative_to(out).as_posix()}"] = _sha256(f)
    out.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k} = {entries[k]}\n" for k in sorted(entries))
    (out / MANIFEST).write_text(text, encoding="utf-8")


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


class _Timer:
    def __init__(self, stage: str, quiet: bool = False):
        self.stage = stage
        self.quiet = quiet
        self.t0 = time.perf_counter()
        self.last = self.t0

    def lap(self, label: str) -> None:
        now = time.perf_counter()
        if not self.quiet:
            print(f"[{self.stage}] {label}: {now - self.last:.2f} s", file=sys.stderr)
        self.last = now

    def done(self) -> None:
        if not self.quiet:
            print(f"[{self.stage}] total: {time.perf_counter() - self.t0:.2f} s", file=sys.stderr)


def _trajectory_path(cfg: PipelineConfig) -> Path:
    if cfg.paths.trajectories:
        return Path(cfg.paths.trajectories)
    return cfg.output_dir / "simulate" / "trajectories.csv"


def _network_path(cfg: PipelineConfig) -> Path | None:
    if cfg.paths.network:
        return Path(cfg.paths.network)
    sim = cfg.output_dir / "simulate" / "network.geojson"
    return sim if sim.exists() else None


def load_points(cfg: PipelineConfig, stage: str, diag: IngestDiagnostics | None = None) -> PointTable:
    """Parse, group and drift-filter the configured trajectory file."""
    path = _trajectory_path(cfg)
    diag = diag if diag is not None else IngestDiagnostics()
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            table = parse_records(fh, IngestConfig(cfg.units.delimiter, cfg.units.speed_unit), diag)
    except OSError as exc:
        raise StageError(stage, path, f"cannot read trajectories ({exc.strerror or exc})") from exc
    except IngestError as exc:
        raise StageError(stage, path, str(exc)) from exc
    journeys = assemble_journeys(table, diag)
    return filter_journeys(journeys, cfg.thresholds.drift_max_speed_ms, diag).table


def _load_network(cfg: PipelineConfig, stage: str, required: bool):
    path = _network_path(cfg)
    if path is None:
        if required:
            raise StageError(stage, "", "no road network configured")
        return None
    try:
        return load_network(path)
    except OSError as exc:
        raise StageError(stage, path, f"cannot read network ({exc.strerror or exc})") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise StageError(stage, path, str(exc)) from exc


# -- simulate ---------------------------------------------------------------

def run_simulate(cfg: PipelineConfig, quiet: bool = False) -> dict[str, Path]:
    timer = _Timer("simulate", quiet)
    sim = replace(cfg.simulate, seed=cfg.seed, speed_unit=cfg.units.speed_unit)
    out = _fresh_dir(cfg.output_dir / "simulate")
    network = generate_network(sim)
    points, truth = generate_journeys(sim, network)
    paths = {"trajectories": out / "trajectories.csv", "network": out / "network.geojson",
             "ground_truth": out / "ground_truth.csv"}
    write_trajectories(points, paths["trajectories"], sim.speed_unit)
    write_network(network, paths["network"])
    with open(paths["ground_truth"], "w", encoding="utf-8", newline="") as fh:
        write_ground_truth(truth, fh)
    timer.lap(f"{len(points)} points, {len(network)} segments, {len(truth)} injected conflicts")
    _update_manifest(cfg, "simulate", "complete")
    timer.done()
    return paths


# -- detect -----------------------------------------------------------------

@dataclass
class DetectResult:
    events: list
    diagnostics: str
    candidate_pairs: int


def detect_points(table: PointTable, cfg: PipelineConfig):
    """Candidate search, screening and coalescing over a cleaned point table."""
    th = cfg.thresholds
    params = DetectParams(th.ttc_threshold_s, th.sync_window_s, th.min_speed_ms, th.same_direction_deg,
                          th.coalesce_gap_s)
    idx = build_index(table, th.time_slice_s, cfg.workers)
    pairs = emit_candidate_pairs(idx, radius=th.buffer_radius_m, window=th.buffer_window_s, workers=cfg.workers)
    raw = screen_pairs(table, pairs, params)
    return number_events(coalesce_events(raw, th.coalesce_gap_s)), len(pairs), len(raw)


def run_detect(cfg: PipelineConfig, quiet: bool = False) -> DetectResult:
    timer = _Timer("detect", quiet)
    diag = IngestDiagnostics()
    table = load_points(cfg, "detect", diag)
    timer.lap(f"ingest {len(table)} points")
    events, n_pairs, n_raw = detect_points(table, cfg)
    timer.lap(f"detect {len(events)} events")

    network = _load_network(cfg, "detect", required=False)
    if network is not None and events:
        res = assign_events(events, network, cfg.thresholds.match_max_distance_m, cfg.thresholds.heading_tolerance_deg)
        seg = {e.event_id: e.matched_segment for e in res.matched}
        events = [replace(e, matched_segment=seg.get(e.event_id)) for e in events]

    out = _fresh_dir(cfg.output_dir / "detect")
    with open(out / "events.csv", "w", encoding="utf-8", newline="") as fh:
        write_events_csv(events, fh)
    with open(out / "events.geojson", "w", encoding="utf-8") as fh:
        write_events_geojson(events, fh)
    lines = [diag.as_text().rstrip("\n"), f"candidate_pairs = {n_pairs}", f"raw_detections = {n_raw}",
             f"events = {len(events)}"]
    if diag.rows_read == 0:
        lines.append("note = input contains no records")
    if network is None:
        lines.append("note = no road network; segment_id left blank")
    text = "\n".join(lines) + "\n"
    (out / "diagnostics.txt").write_text(text, encoding="utf-8")
    _update_manifest(cfg, "detect", "complete", {"trajectories": _trajectory_path(cfg)})
    timer.done()
    return DetectResult(events, text, n_pairs)


# -- analyze ----------------------------------------------------------------

def _read_events(cfg: PipelineConfig, stage: str):
    path = cfg.output_dir / "detect" / "events.csv"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return read_events_csv(fh)
    except OSError as exc:
        raise StageError(stage, path, "event file missing; run detect first") from exc
    except (KeyError, ValueError) as exc:
        raise StageError(stage, path, f"malformed event file ({exc})") from exc


def _calendar(cfg: PipelineConfig, stage: str) -> HolidayCalendar:
    if cfg.paths.holidays:
        try:
            return HolidayCalendar.from_file(cfg.paths.holidays)
        except (OSError, ValueError) as exc:
            raise StageError(stage, cfg.paths.holidays, f"bad holiday calendar ({exc})") from exc
    return HolidayCalendar(cfg.holiday_dates)


def _zones(cfg: PipelineConfig, stage: str) -> dict[str, str] | None:
    if not cfg.paths.zones:
        return None
    try:
        with open(cfg.paths.zones, encoding="utf-8", newline="") as fh:
            return {r["segment_id"]: r["zone_id"] for r in csv.DictReader(fh)}
    except (OSError, KeyError) as exc:
        raise StageError(stage, cfg.paths.zones, f"bad zone table ({exc})") from exc


def point_partitions(t: np.ndarray, calendar: HolidayCalendar, tz) -> np.ndarray:
    """Partition index (into ``ALL_PARTITIONS``) for each epoch time.

    UTC offsets are whole quarter hours, so partitions are constant within
    each UTC quarter hour and only one lookup per quarter is needed.
    """
    if len(t) == 0:
        return np.empty(0, dtype=np.int64)
    q = np.floor(np.asarray(t) / 900.0).astype(np.int64)
    uniq, inv = np.unique(q, return_inverse=True)
    pos = {p: k for k, p in enumerate(ALL_PARTITIONS)}
    lookup = np.array([pos[partition_of(float(u) * 900.0, calendar, tz)] for u in uniq], dtype=np.int64)
    return lookup[inv]


@dataclass
class AnalyzeResult:
    summaries: list
    regression: str
    hotspots: dict[str, list[GiStarResult]] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def _regression(cfg: PipelineConfig, summaries, network) -> tuple[str, str | None, str]:
    """Report text, CSV text (or None) and a status note."""
    attrs = {s.segment_id: s.attributes for s in network.segments}
    eligible = [s for s in summaries if attrs.get(s.segment_id) is not None]
    classes = {s.risk_class for s in eligible}
    if len(eligible) < cfg.min_regression_segments:
        note = f"skipped: TooFewSegments ({len(eligible)} eligible, need {cfg.min_regression_segments})"
        return f"Regression {note}\n", None, note
    if len(classes) < 2:
        note = f"skipped: SingleClass (all {len(eligible)} eligible segments are {next(iter(classes)).value})"
        return f"Regression {note}\n", None, note
    try:
        dm = encode_features(eligible, attrs, cfg.features)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NotConvergedWarning)
            model = fit_logistic(dm.X, dm.y, names=dm.names)
    except (ConstantColumn, ExactCollinearity, SeparationDetected, EmptyEligibleSet) as exc:
        note = f"skipped: {type(exc).__name__} ({exc})"
        return f"Regression {note}\n", None, note
    report = model_report(model)
    note = "fitted" if not caught else "fitted: NotConverged"
    return report.as_text(), report.as_csv(), note


def _hotspot_units(cfg, summaries, midpoints, zones):
    if zones is not None:
        return aggregate_zones(summaries, zones, midpoints, cfg.zone_value)
    return [SpatialUnit(s.segment_id, midpoints[s.segment_id], s.risk_ratio) for s in summaries]


def _hotspots_geojson(results: dict[str, list[GiStarResult]], points: dict) -> dict:
    ids = sorted({r.unit_id for res in results.values() for r in res})
    by_label = {lb: {r.unit_id: r for r in res} for lb, res in results.items()}
    feats = []
    for uid in ids:
        props = {"unit_id": uid}
        for lb in results:
            r = by_label[lb].get(uid)
            props[f"gi_{lb}"] = None if r is None or not math.isfinite(r.gi_star) else round(r.gi_star, 6)
            props[f"class_{lb}"] = None if r is None else r.classification.value
        p = points[uid]
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [round(p.lon_deg, 7), round(p.lat_deg, 7)]},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def run_analyze(cfg: PipelineConfig, quiet: bool = False) -> AnalyzeResult:
    timer = _Timer("analyze", quiet)
    th = cfg.thresholds
    events = _read_events(cfg, "analyze")
    network = _load_network(cfg, "analyze", required=True)
    points = load_points(cfg, "analyze")
    calendar = _calendar(cfg, "analyze")
    tz = resolve_timezone(cfg.units.timezone)
    zones = _zones(cfg, "analyze")
    timer.lap("load inputs")

    assignment = assign_events(events, network, th.match_max_distance_m, th.heading_tolerance_deg)
    seg_rows = match_points(points, network, th.match_max_distance_m, th.heading_tolerance_deg)
    risk_diag = RiskDiagnostics()
    vehicles = count_traversals(points, network, segment_per_row=seg_rows)
    counts = Counter(e.matched_segment for e in assignment.matched)
    summaries = segment_risk_ratio(counts, vehicles, th.risk_boundary, risk_diag)
    timer.lap(f"map matching: {len(assignment.matched)} of {len(events)} events kept")

    out = _fresh_dir(cfg.output_dir / "analyze")
    with open(out / "segment_risk.csv", "w", encoding="utf-8", newline="") as fh:
        write_risk_csv(summaries, network, fh)
    with open(out / "segment_risk.geojson", "w", encoding="utf-8") as fh:
        json.dump(risk_geojson(summaries, network), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    (out / "assignment.txt").write_text(assignment.as_text() + risk_diag.as_text(), encoding="utf-8")

    reg_text, reg_csv, reg_note = _regression(cfg, summaries, network)
    (out / "regression.txt").write_text(reg_text, encoding="utf-8")
    if reg_csv is not None:
        (out / "regression.csv").write_text(reg_csv, encoding="utf-8")
    timer.lap(f"regression {reg_note}")

    midpoints = {s.segment_id: s.midpoint() for s in network.segments}
    by_part = partition_periods(assignment.matched, calendar, tz)
    row_part = point_partitions(points.t, calendar, tz)
    hot_dir = out / "hotspot"
    hot_dir.mkdir()
    results: dict[str, list[GiStarResult]] = {}
    unit_points = {}
    jobs = [(p.label, by_part[p], row_part == k) for k, p in enumerate(ALL_PARTITIONS)]
    jobs.append((ALL_TIME, assignment.matched, None))
    for label, evs, rows in jobs:
        if rows is None:
            part_summaries = summaries
        else:
            sub = points.take(rows)
            part_vehicles = count_traversals(sub, network, segment_per_row=seg_rows[rows])
            part_summaries = segment_risk_ratio(Counter(e.matched_segment for e in evs), part_vehicles,
                                                th.risk_boundary)
        units = _hotspot_units(cfg, part_summaries, midpoints, zones)
        unit_points.update({u.unit_id: u.representative_point for u in units})
        w = build_weights(units, th.gi_cutoff_m, th.gi_d_floor_m, cfg.gi_self_weight)
        results[label] = gi_star(units, w, cfg.gi_star_variant)
        with open(hot_dir / f"{label}.csv", "w", encoding="utf-8", newline="") as fh:
            write_gi_csv(results[label], fh)
    with open(out / "hotspot.geojson", "w", encoding="utf-8") as fh:
        json.dump(_hotspots_geojson(results, unit_points), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    timer.lap(f"hotspots over {len(results)} partitions")

    notes = {"regression": reg_note}
    _update_manifest(cfg, "analyze", "complete" if reg_note.startswith("fitted") else "incomplete",
                     {"events": cfg.output_dir / "detect" / "events.csv", "network": _network_path(cfg),
                      "trajectories": _trajectory_path(cfg)}, notes)
    timer.done()
    return AnalyzeResult(summaries, reg_text, results, notes)


# -- report -----------------------------------------------------------------

def _num(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def histogram(values, width: float) -> list[tuple[float, float, int]]:
    """Contiguous ``[low, high)`` bins of ``width`` spanning the data."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return []
    # tolerate representation error such as 0.3 / 0.1 = 2.9999999999999996
    k = np.floor(v / width + 1e-9).astype(np.int64)
    lo = int(k.min())
    counts = np.bincount(k - lo)
    return [((lo + i) * width, (lo + i + 1) * width, int(c)) for i, c in enumerate(counts)]


def write_histogram(bins, stream, label: str) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow((f"{label}_low", f"{label}_high", "count"))
    for lo, hi, c in bins:
        w.writerow((_num(lo), _num(hi), c))


@dataclass
class ReportResult:
    histograms: dict[str, list]
    summary: str


def run_report(cfg: PipelineConfig, quiet: bool = False) -> ReportResult:
    timer = _Timer("report", quiet)
    events = _read_events(cfg, "report")
    risk_path = cfg.output_dir / "analyze" / "segment_risk.csv"
    try:
        with open(risk_path, encoding="utf-8", newline="") as fh:
            summaries = read_risk_csv(fh)
    except OSError as exc:
        raise StageError("report", risk_path, "segment summaries missing; run analyze first") from exc
    hot_dir = cfg.output_dir / "analyze" / "hotspot"
    labels = [p.label for p in ALL_PARTITIONS] + [ALL_TIME]
    results = {}
    for lb in labels:
        path = hot_dir / f"{lb}.csv"
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                results[lb] = read_gi_csv(fh)
        except OSError as exc:
            raise StageError("report", path, "hotspot output missing; run analyze first") from exc

    f = SPEED_FACTORS[cfg.units.report_speed_unit]
    unit = cfg.units.report_speed_unit
    rp = cfg.report
    hists = {
        f"event_speed_{unit}": histogram((max(e.p_a.speed, e.p_b.speed) / f for e in events), rp.speed_bin),
        "pair_distance_m": histogram((e.pair_distance for e in events), rp.distance_bin),
        "segment_event_count": histogram((s.event_count for s in summaries), rp.count_bin),
        "segment_risk_ratio": histogram((s.risk_ratio for s in summaries), rp.ratio_bin),
    }
    out = _fresh_dir(cfg.output_dir / "report")
    for name, bins in hists.items():
        with open(out / f"hist_{name}.csv", "w", encoding="utf-8", newline="") as fh:
            write_histogram(bins, fh, name)
    summary = summarize_partitions(results)
    (out / "partition_summary.txt").write_text(summary, encoding="utf-8")
    _update_manifest(cfg, "report", "complete")
    timer.done()
    return ReportResult(hists, summary)


def run_all(cfg: PipelineConfig, quiet: bool = False) -> PipelineConfig:
    """Every stage in order; simulates inputs when no trajectory file is set."""
    if not cfg.paths.trajectories:
        paths = run_simulate(cfg, quiet)
        cfg = replace(cfg, paths=replace(cfg.paths, trajectories=str(paths["trajectories"]),
                                         network=cfg.paths.network or str(paths["network"])))
    run_detect(cfg, quiet)
    run_analyze(cfg, quiet)
    run_report(cfg, quiet)
    return cfg
