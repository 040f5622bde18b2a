"""Geodesic primitives, the zone registry and activity centers of gravity."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AllZeroCounts, FileUnreadable, HeaderMismatch

EARTH_RADIUS_KM = 6371.0

ZONE_HEADER = ["zone_id", "district", "centroid_lat", "centroid_lon", "boundary_wkt"]


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if math.isnan(self.lat) or math.isnan(self.lon):
            raise ValueError("GeoPoint coordinates must not be NaN")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


def haversine_km(p1: GeoPoint, p2: GeoPoint) -> float:
    """Great-circle distance in kilometres on a sphere of radius 6371 km."""
    phi1 = math.radians(p1.lat)
    phi2 = math.radians(p2.lat)
    d_phi = phi2 - phi1
    d_lam = math.radians(p2.lon - p1.lon)
    h = math.sin(d_phi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(d_lam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_km_arrays(lat1, lon1, lat2, lon2):
    """Vectorised :func:`haversine_km` over numpy arrays (degrees in, km out)."""
    import numpy as np

    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    d_phi = phi2 - phi1
    d_lam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(d_phi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(d_lam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass(frozen=True)
class Zone:
    zone_id: str
    district: str
    centroid: GeoPoint
    boundary: tuple[GeoPoint, ...] | None = None

    def contains(self, p: GeoPoint) -> bool:
        """Ray-casting point-in-polygon test; False when no boundary is known."""
        if not self.boundary:
            return False
        ring = self.boundary
        if ring[0] == ring[-1]:
            ring = ring[:-1]
        inside = False
        x, y = p.lon, p.lat
        n = len(ring)
        for i in range(n):
            a = ring[i]
            b = ring[(i + 1) % n]
            if (a.lat > y) != (b.lat > y):
                x_cross = a.lon + (y - a.lat) * (b.lon - a.lon) / (b.lat - a.lat)
                if x < x_cross:
                    inside = not inside
        return inside


class ZoneRegistry:
    """Zones keyed by ``zone_id``; iteration follows sorted zone_id order."""

    def __init__(self, zones: Iterable[Zone]):
        by_id: dict[str, Zone] = {}
        for z in zones:
            if z.zone_id in by_id:
                raise ValueError(f"duplicate zone_id {z.zone_id!r}")
            by_id[z.zone_id] = z
        if not by_id:
            raise ValueError("a ZoneRegistry needs at least one zone")
        self._zones = {k: by_id[k] for k in sorted(by_id)}
        self._with_boundary = [z for z in self._zones.values() if z.boundary]

    def __getitem__(self, zone_id: str) -> Zone:
        return self._zones[zone_id]

    def __contains__(self, zone_id: object) -> bool:
        return zone_id in self._zones

    def __iter__(self):
        return iter(self._zones.values())

    def __len__(self) -> int:
        return len(self._zones)

    @property
    def zone_ids(self) -> list[str]:
        return list(self._zones)

    def districts(self) -> list[str]:
        return sorted({z.district for z in self._zones.values()})


def assign_zone(p: GeoPoint, registry: ZoneRegistry) -> str:
    """Zone whose boundary contains ``p``; falls back to the nearest centroid.

    Containment is checked in zone_id order and the first hit wins. Centroid
    ties are resolved by zone_id as well.
    """
    for z in registry._with_boundary:
        if z.contains(p):
            return z.zone_id
    best_id = None
    best_d = math.inf
    for z in registry:
        d = haversine_km(p, z.centroid)
        if d < best_d:
            best_id, best_d = z.zone_id, d
    return best_id


def center_of_gravity(zone_counts: Mapping[str, float], registry: ZoneRegistry) -> GeoPoint:
    """Count-weighted mean of zone centroids in raw latitude/longitude."""
    total = math.fsum(zone_counts.values())
    if total <= 0:
        raise AllZeroCounts("center of gravity needs at least one positive count")
    cents = [(registry[z].centroid, n) for z, n in zone_counts.items() if n != 0]
    lat = math.fsum(c.lat * n for c, n in cents) / total
    lon = math.fsum(c.lon * n for c, n in cents) / total
    return GeoPoint(lat, lon)


# --- zone file I/O -------------------------------------------------------

_POLYGON_RE = re.compile(r"^\s*POLYGON\s*\(\(\s*(.*?)\s*\)\)\s*$", re.IGNORECASE)


def parse_polygon_wkt(text: str) -> tuple[GeoPoint, ...] | None:
    if not text or not text.strip():
        return None
    m = _POLYGON_RE.match(text)
    if not m:
        raise ValueError(f"unsupported boundary WKT: {text[:40]!r}")
    ring = []
    for pair in m.group(1).split(","):
        lon_s, lat_s = pair.split()
        ring.append(GeoPoint(float(lat_s), float(lon_s)))
    if len(ring) < 3:
        raise ValueError("polygon ring needs at least three vertices")
    return tuple(ring)


def format_polygon_wkt(ring: Sequence[GeoPoint] | None) -> str:
    if not ring:
        return ""
    pts = list(ring)
    if pts[0] != pts[-1]:
        pts.append(pts[0])
    return "POLYGON((" + ", ".join(f"{p.lon!r} {p.lat!r}" for p in pts) + "))"


def load_zones(path: str | Path) -> ZoneRegistry:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ZONE_HEADER[:4] or header[4:] not in ([], ZONE_HEADER[4:]):
            raise HeaderMismatch(f"{path}: expected header {','.join(ZONE_HEADER)}")
        zones = []
        for row in reader:
            if not row:
                continue
            wkt = row[4] if len(row) > 4 else ""
            zones.append(
                Zone(
                    zone_id=row[0],
                    district=row[1],
                    centroid=GeoPoint(float(row[2]), float(row[3])),
                    boundary=parse_polygon_wkt(wkt),
                )
            )
    return ZoneRegistry(zones)


def write_zones(registry: ZoneRegistry, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ZONE_HEADER)
    for z in registry:
        w.writerow([z.zone_id, z.district, repr(z.centroid.lat), repr(z.centroid.lon),
                    format_polygon_wkt(z.boundary)])
