from __future__ import annotations

import os
from datetime import datetime, timedelta

import pytest
from hypothesis import settings

from mobiscape.geo import GeoPoint, Zone, ZoneRegistry
from mobiscape.ingest import CheckIn, POICategory

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

M_PER_DEG_LAT = 6371000.0 * 3.141592653589793 / 180.0


def checkin(user="u1", ts="2012-03-05T10:30:00", venue="v1", lat=39.9, lon=116.4,
            cat=POICategory.OTHER, text=None) -> CheckIn:
    if isinstance(ts, str):
        ts = datetime.fromisoformat(ts)
    return CheckIn(user, ts, venue, GeoPoint(lat, lon), cat, text)


def daily(user, venue, start, n_days, hour, lat=39.9, lon=116.4, cat=POICategory.OTHER, text=None, step=1):
    """One check-in per day at ``hour`` for ``n_days`` days."""
    t0 = datetime.fromisoformat(start).replace(hour=hour)
    return [checkin(user, t0 + timedelta(days=step * i), venue, lat, lon, cat, text) for i in range(n_days)]


def east(lat, lon, metres):
    import math
    return lat, lon + metres / (M_PER_DEG_LAT * math.cos(math.radians(lat)))


@pytest.fixture
def grid2x2() -> ZoneRegistry:
    """Four 0.01-degree square zones with boundaries."""
    zones = []
    for i, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        lat0, lon0 = 40.0 + r * 0.01, 116.0 + c * 0.01
        ring = (GeoPoint(lat0, lon0), GeoPoint(lat0, lon0 + 0.01), GeoPoint(lat0 + 0.01, lon0 + 0.01),
                GeoPoint(lat0 + 0.01, lon0))
        zones.append(Zone(f"Z{i}", "Haidian" if c == 0 else "Chaoyang",
                          GeoPoint(lat0 + 0.005, lon0 + 0.005), ring))
    return ZoneRegistry(zones)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
