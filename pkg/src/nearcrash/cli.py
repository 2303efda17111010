"""``nearcrash`` command line: simulate, detect, analyze, report, all."""
from __future__ import annotations

import functools
from dataclasses import fields, replace

import click

from .config import ConfigError, Thresholds, load_config
from .ingest import UnknownUnitError
from .pipeline import StageError, run_all, run_analyze, run_detect, run_report, run_simulate
from .simgen import InjectionInfeasible


def _flag(name: str) -> str:
    for suffix in ("_ms", "_deg", "_m", "_s"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return "--" + name.replace("_", "-")


_THRESHOLD_FLAGS = {_flag(f.name): f.name for f in fields(Thresholds)}
_SIM_FLAGS = {"--journeys": "journeys", "--injections": "conflict_injections",
              "--grid-rows": "grid_rows", "--grid-cols": "grid_cols"}


def _options(func):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI configuration file."),
        click.option("--output-dir", help="Directory receiving all stage outputs."),
        click.option("--workers", type=click.IntRange(min=1), help="Worker pool size."),
        click.option("--seed", type=int, help="Seed for simulation."),
        click.option("--trajectories", type=click.Path(dir_okay=False), help="Trajectory CSV/TSV."),
        click.option("--network", type=click.Path(dir_okay=False), help="Road network GeoJSON."),
        click.option("--holidays", type=click.Path(dir_okay=False),
                     help="File of ISO holiday dates."),
        click.option("--zones", type=click.Path(dir_okay=False), help="CSV mapping segment_id to zone_id."),
        click.option("--speed-unit", type=click.Choice(["mph", "kmh", "ms"]), help="Speed unit of the input."),
        click.option("--timezone", help="UTC offset or zone name for period bucketing."),
        click.option("--gi-star-variant", type=click.Choice(["standard", "as_printed"])),
        click.option("--quiet", is_flag=True, help="Suppress stage timings on stderr."),
    ]
    opts += [click.option(flag, key, type=float, help=f"Override {key}.") for flag, key in _THRESHOLD_FLAGS.items()]
    opts += [click.option(flag, "sim_" + key, type=int, help=f"Simulation {key}.") for flag, key in _SIM_FLAGS.items()]
    for opt in reversed(opts):
        func = opt(func)
    return func


def _build_config(kw: dict):
    sim = {k[4:]: kw.pop(k) for k in list(kw) if k.startswith("sim_")}
    cfg = load_config(kw.pop("config_path"), **kw)
    sim = {k: v for k, v in sim.items() if v is not None}
    if sim:
        cfg = replace(cfg, simulate=replace(cfg.simulate, **sim))
    return cfg


def _command(runner):
    def decorate(func):
        @_options
        @functools.wraps(func)
        def wrapper(quiet, **kw):
            try:
                cfg = _build_config(kw)
                runner(cfg, quiet=quiet)
            except (StageError, ConfigError, InjectionInfeasible, UnknownUnitError) as exc:
                raise click.ClickException(str(exc)) from exc
        return wrapper
    return decorate


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Near-crash detection and risk analysis over GPS trajectories."""


@main.command()
@_command(run_simulate)
def simulate():
    """Write a synthetic grid network, journeys and ground-truth conflicts."""


@main.command()
@_command(run_detect)
def detect():
    """Ingest trajectories and emit near-crash events."""


@main.command()
@_command(run_analyze)
def analyze():
    """Map-match events, compute risk ratios, fit the model and the hot spots."""


@main.command()
@_command(run_report)
def report():
    """Emit histogram tables and the partition summary."""


@main.command(name="all")
@_command(run_all)
def all_():
    """Run every stage, simulating inputs when none are configured."""


if __name__ == "__main__":
    main()
