from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from nearcrash.geo import GeoPoint, destination_point

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

# acceptance lines collected by test_acceptance.py, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []

ORIGIN = GeoPoint.from_degrees(29.4241, -98.4936)


def record(name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((name, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: _order(r[0])):
        tr.write_line(f"{'PASS' if ok else 'FAIL'} {name}" + (f"  [{detail}]" if detail else ""))


def _order(name: str):
    head = name.split()[0].rstrip(".:")
    parts = head.split(".")
    try:
        return (int(parts[0]), parts[1:] or [""], name)
    except ValueError:
        return (99, [head], name)


def grid_units(rows: int = 5, cols: int = 5, spacing: float = 500.0, origin: GeoPoint = ORIGIN):
    """Lat/lon degree arrays of a rows x cols lattice, row-major from the NW corner."""
    lat, lon = [], []
    for r in range(rows):
        west = destination_point(origin, 180.0, spacing * r)
        for c in range(cols):
            p = destination_point(west, 90.0, spacing * c)
            lat.append(p.lat_deg)
            lon.append(p.lon_deg)
    return np.array(lat), np.array(lon)


@pytest.fixture
def rng():
    return np.random.default_rng(20211101)
