"""Pipeline configuration: an INI file with sections, overridable per key."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from pathlib import Path

from .hotspot import DEFAULT_HOLIDAYS, MILE_M
from .ingest import SPEED_FACTORS
from .simgen import SimConfig
from .stats import FeatureSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    buffer_radius_m: float = 100.0
    buffer_window_s: float = 10.0
    time_slice_s: float = 10.0
    ttc_threshold_s: float = 3.0
    sync_window_s: float = 1.5
    min_speed_ms: float = 0.5
    same_direction_deg: float = 30.0
    coalesce_gap_s: float = 10.0
    match_max_distance_m: float = 30.0
    heading_tolerance_deg: float = 45.0
    drift_max_speed_ms: float = 75.0
    gi_cutoff_m: float = MILE_M
    gi_d_floor_m: float = 100.0
    risk_boundary: float = 0.01


@dataclass(frozen=True)
class Paths:
    trajectories: str = ""
    network: str = ""
    holidays: str = ""
    zones: str = ""
    output_dir: str = "out"


@dataclass(frozen=True)
class Units:
    speed_unit: str = "mph"
    delimiter: str = ","
    timezone: str = "UTC"
    report_speed_unit: str = "mph"


@dataclass(frozen=True)
class Report:
    speed_bin: float = 5.0
    distance_bin: float = 10.0
    count_bin: float = 1.0
    ratio_bin: float = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    thresholds: Thresholds = field(default_factory=Thresholds)
    units: Units = field(default_factory=Units)
    report: Report = field(default_factory=Report)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    simulate: SimConfig = field(default_factory=SimConfig)
    workers: int = 1
    seed: int = 0
    gi_star_variant: str = "standard"
    gi_self_weight: float | None = None
    zone_value: str = "ratio"
    min_regression_segments: int = 50
    holiday_dates: tuple[date, ...] = DEFAULT_HOLIDAYS

    def __post_init__(self):
        for f in fields(Thresholds):
            if not getattr(self.thresholds, f.name) > 0:
                raise ConfigError(f"threshold {f.name} must be positive")
        if not 0 < self.thresholds.risk_boundary < 1:
            raise ConfigError("risk_boundary must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for name in ("speed_unit", "report_speed_unit"):
            if getattr(self.units, name) not in SPEED_FACTORS:
                raise ConfigError(f"unknown {name} {getattr(self.units, name)!r}")
        if self.gi_star_variant not in ("standard", "as_printed"):
            raise ConfigError(f"unknown gi_star_variant {self.gi_star_variant!r}")
        if self.zone_value not in ("ratio", "count"):
            raise ConfigError(f"unknown zone_value {self.zone_value!r}")

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def digest(self) -> str:
        """Hash of every setting that can change outputs (paths and workers excluded)."""
        d = asdict(self)
        d.pop("paths")
        d.pop("workers")
        return hashlib.sha256(repr(sorted(_flatten(d).items())).encode()).hexdigest()

    def with_overrides(self, **kw) -> PipelineConfig:
        """Apply flat overrides such as ``ttc_threshold_s=2.5`` or ``output_dir="x"``."""
        cfg = self
        for key, value in kw.items():
            if value is None:
                continue
            cfg = _set(cfg, key, value)
        return cfg


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = repr(v)
    return out


_SECTIONS = {"paths": Paths, "thresholds": Thresholds, "units": Units, "report": Report}


def _coerce(current, text):
    if isinstance(current, bool):
        return str(text).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or current is None:
        return float(text)
    return str(text).strip()


def _set(cfg: PipelineConfig, key: str, value) -> PipelineConfig:
    for section, cls in _SECTIONS.items():
        if key in {f.name for f in fields(cls)}:
            sub = getattr(cfg, section)
            return replace(cfg, **{section: replace(sub, **{key: _coerce(getattr(sub, key), value)})})
    if key in ("workers", "seed", "min_regression_segments"):
        return replace(cfg, **{key: int(value)})
    if key == "gi_self_weight":
        return replace(cfg, gi_self_weight=None if value in ("", "none", None) else float(value))
    if key in ("gi_star_variant", "zone_value"):
        return replace(cfg, **{key: str(value).strip()})
    if key == "holiday_dates":
        items = value if isinstance(value, (list, tuple)) else str(value).replace(",", " ").split()
        return replace(cfg, holiday_dates=tuple(d if isinstance(d, date) else date.fromisoformat(d) for d in items))
    raise ConfigError(f"unknown setting {key!r}")


def _sim_from(section: configparser.SectionProxy, base: SimConfig) -> SimConfig:
    kw = {}
    for key, text in section.items():
        if key in ("speed_min", "speed_max"):
            lo, hi = kw.get("speed_range", base.speed_range)
            kw["speed_range"] = (float(text), hi) if key == "speed_min" else (lo, float(text))
        elif key in ("start_date", "end_date"):
            a, b = kw.get("day_span", base.day_span)
            d = date.fromisoformat(text.strip())
            kw["day_span"] = (d, b) if key == "start_date" else (a, d)
        elif key in ("origin_lat", "origin_lon"):
            lat, lon = kw.get("origin", base.origin)
            kw["origin"] = (float(text), lon) if key == "origin_lat" else (lat, float(text))
        elif key in ("seed", "speed_unit"):
            raise ConfigError(f"[simulate] {key} comes from [run] seed / [units] speed_unit")
        elif key in {f.name for f in fields(SimConfig)}:
            kw[key] = _coerce(getattr(base, key), text)
        else:
            raise ConfigError(f"unknown [simulate] key {key!r}")
    return replace(base, **kw)


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Read an INI file (sections ``paths``, ``thresholds``, ``units``,
    ``report``, ``features``, ``run``, ``simulate``) and apply overrides.

    Relative paths in ``[paths]`` resolve against the file's directory.
    """
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = set(_SECTIONS) | {"features", "run", "simulate"}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"{path}: unknown section [{section}]")
        for section in _SECTIONS:
            if parser.has_section(section):
                for key, text in parser.items(section):
                    if key not in {f.name for f in fields(_SECTIONS[section])}:
                        raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                    if section == "paths" and text.strip():
                        text = str((path.parent / text.strip()).resolve())
                    cfg = _set(cfg, key, text)
        if parser.has_section("run"):
            for key, text in parser.items("run"):
                cfg = _set(cfg, key, text)
        if parser.has_section("features"):
            sec = parser["features"]
            numeric = tuple(sec.get("numeric", ",".join(cfg.features.numeric)).replace(",", " ").split())
            cats = {}
            for item in sec.get("categorical", "").replace(",", " ").split():
                name, _, ref = item.partition(":")
                cats[name] = int(ref) if ref else None
            if "categorical" not in sec:
                cats = dict(cfg.features.categorical)
            cfg = replace(cfg, features=FeatureSpec(numeric, cats))
        if parser.has_section("simulate"):
            cfg = replace(cfg, simulate=_sim_from(parser["simulate"], cfg.simulate))
    try:
        return cfg.with_overrides(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
