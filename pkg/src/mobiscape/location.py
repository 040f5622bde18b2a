"""Per-user venue clustering and identification of home, work and other places.

The pipeline for one user is::

    stats, total_days = venue_stats(records)
    clusters = cluster_venues(stats, r)
    clusters = with_event_shares([compute_events(c, records) for c in clusters])
    home, work = identify_home_work(important_clusters(clusters, total_days, a, b), k1, k2)

:func:`build_clusters` runs the first three steps, :func:`identify_user` all of them.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import NoAnchor
from .fileio import fmt_float, open_csv, write_rows
from .geo import GeoPoint, ZoneRegistry, assign_zone, haversine_km
from .ingest import CheckIn, POICategory, group_by_user

PLACES_HEADER = ["user_id", "role", "lat", "lon", "zone_id"]
NONCOMMUTE_HEADER = ["user_id", "venue_id", "label", "lat", "lon", "days"]

ENTERTAINMENT = "entertainment"
OTHER = "other"
UNKNOWN = "unknown"


@dataclass(frozen=True)
class IdentParams:
    r: float  # metres
    a: float
    b: float
    k1: float
    k2: float

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise ValueError("clustering radius r must be positive")
        for name in ("a", "b", "k1", "k2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


# Calibrated values reported for Beijing at r = 300 m.
CALIBRATED_PARAMS = IdentParams(r=300.0, a=0.0093, b=0.0925, k1=0.061, k2=0.0192)


@dataclass(frozen=True)
class VenueStat:
    venue_id: str
    location: GeoPoint
    days: int
    category: POICategory = POICategory.UNKNOWN


@dataclass(frozen=True)
class Cluster:
    centroid: GeoPoint
    members: tuple[VenueStat, ...]
    cluster_days: int = 0
    timespan: int = 0
    work_events: int = 0
    home_events: int = 0
    work_pct: float = 0.0
    home_pct: float = 0.0

    @property
    def densest_venue(self) -> str:
        return min(self.members, key=lambda v: (-v.days, v.venue_id)).venue_id

    @property
    def venue_ids(self) -> frozenset[str]:
        return frozenset(v.venue_id for v in self.members)


@dataclass(frozen=True)
class PersonPlaces:
    user_id: str
    home: GeoPoint | None = None
    work: GeoPoint | None = None
    home_cluster: Cluster | None = None
    work_cluster: Cluster | None = None
    entertainment: tuple[VenueStat, ...] = ()
    other: tuple[VenueStat, ...] = ()
    unknown: tuple[VenueStat, ...] = ()

    @property
    def is_commuter(self) -> bool:
        return self.home is not None and self.work is not None

    def commute_km(self) -> float | None:
        if not self.is_commuter:
            return None
        return haversine_km(self.home, self.work)


def is_work_event(ts: datetime) -> bool:
    """Mon-Fri, local time in [09:00, 12:00) or [13:00, 18:00)."""
    return ts.weekday() < 5 and (9 <= ts.hour < 12 or 13 <= ts.hour < 18)


def is_home_event(ts: datetime) -> bool:
    """Any day, local time in [22:00, 24:00) or [00:00, 07:00)."""
    return ts.hour >= 22 or ts.hour < 7


def venue_stats(user_records: Sequence[CheckIn]) -> tuple[list[VenueStat], int]:
    if not user_records:
        raise ValueError("venue_stats needs at least one record")
    days: dict[str, set] = defaultdict(set)
    first: dict[str, CheckIn] = {}
    for r in user_records:
        days[r.venue_id].add(r.timestamp.date())
        first.setdefault(r.venue_id, r)
    dates = [r.timestamp.date() for r in user_records]
    total_days = (max(dates) - min(dates)).days + 1
    stats = [VenueStat(v, first[v].location, len(d), first[v].poi_category) for v, d in days.items()]
    return stats, total_days


def cluster_venues(stats: Iterable[VenueStat], r: float) -> list[Cluster]:
    """Greedy radius clustering over venues in days-descending order.

    A venue joins the first cluster (in creation order) whose current centroid
    lies within ``r`` metres; the centroid then moves to the days-weighted mean
    of its members. Otherwise the venue founds a new cluster.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    r_km = r / 1000.0
    members: list[list[VenueStat]] = []
    sums: list[list[float]] = []  # [weight, weight*lat, weight*lon]
    centroids: list[GeoPoint] = []
    for v in sorted(stats, key=lambda s: (-s.days, s.venue_id)):
        for i, c in enumerate(centroids):
            if haversine_km(c, v.location) <= r_km:
                members[i].append(v)
                s = sums[i]
                s[0] += v.days
                s[1] += v.days * v.location.lat
                s[2] += v.days * v.location.lon
                centroids[i] = GeoPoint(s[1] / s[0], s[2] / s[0])
                break
        else:
            members.append([v])
            sums.append([v.days, v.days * v.location.lat, v.days * v.location.lon])
            centroids.append(v.location)
    return [Cluster(c, tuple(m)) for c, m in zip(centroids, members)]


def compute_events(cluster: Cluster, user_records: Sequence[CheckIn]) -> Cluster:
    """Fill day counts, timespan and event counts; shares are left at zero."""
    ids = cluster.venue_ids
    dates = set()
    work = home = 0
    for r in user_records:
        if r.venue_id not in ids:
            continue
        dates.add(r.timestamp.date())
        if is_work_event(r.timestamp):
            work += 1
        if is_home_event(r.timestamp):
            home += 1
    timespan = (max(dates) - min(dates)).days + 1 if dates else 0
    return replace(cluster, cluster_days=len(dates), timespan=timespan,
                   work_events=work, home_events=home, work_pct=0.0, home_pct=0.0)


def with_event_shares(clusters: Sequence[Cluster]) -> list[Cluster]:
    """Each cluster's share of the user's total work and home events."""
    tw = sum(c.work_events for c in clusters)
    th = sum(c.home_events for c in clusters)
    return [
        replace(c, work_pct=c.work_events / tw if tw else 0.0,
                home_pct=c.home_events / th if th else 0.0)
        for c in clusters
    ]


def build_clusters(user_records: Sequence[CheckIn], r: float) -> tuple[list[Cluster], int]:
    """Cluster one user's venues and fill their event features.

    Same result as :func:`compute_events` per cluster, in a single pass over the records.
    """
    stats, total_days = venue_stats(user_records)
    clusters = cluster_venues(stats, r)
    owner = {v.venue_id: i for i, c in enumerate(clusters) for v in c.members}
    dates: list[set] = [set() for _ in clusters]
    work = [0] * len(clusters)
    home = [0] * len(clusters)
    for rec in user_records:
        i = owner[rec.venue_id]
        ts = rec.timestamp
        dates[i].add(ts.date())
        if is_work_event(ts):
            work[i] += 1
        if is_home_event(ts):
            home[i] += 1
    filled = [
        replace(c, cluster_days=len(d), timespan=(max(d) - min(d)).days + 1,
                work_events=w, home_events=h)
        for c, d, w, h in zip(clusters, dates, work, home)
    ]
    return with_event_shares(filled), total_days


def important_clusters(clusters: Sequence[Cluster], total_days: int, a: float, b: float) -> list[Cluster]:
    if total_days < 1:
        raise ValueError("total_days must be at least 1")
    return [c for c in clusters if c.cluster_days / total_days >= a and c.timespan / total_days >= b]


def home_rank_key(c: Cluster):
    return (-c.home_pct, -c.cluster_days, c.densest_venue)


def work_rank_key(c: Cluster):
    return (-(c.work_pct - c.home_pct), -c.cluster_days, c.densest_venue)


def identify_home_work(important: Sequence[Cluster], k1: float, k2: float) -> tuple[Cluster | None, Cluster | None]:
    """Home is the top home-share cluster if its share reaches ``k1``.

    Work is picked among the remaining clusters by the largest margin of work
    share over home share, and accepted if its work share reaches ``k2``.
    """
    home = None
    remaining = list(important)
    if remaining:
        best = min(remaining, key=home_rank_key)
        if best.home_pct >= k1:
            home = best
            remaining = [c for c in remaining if c is not best]
    work = None
    if remaining:
        best = min(remaining, key=work_rank_key)
        if best.work_pct >= k2:
            work = best
    return home, work


def noncommute_label(category: POICategory) -> str:
    if category is POICategory.ENTERTAINMENT:
        return ENTERTAINMENT
    if category is POICategory.UNKNOWN:
        return UNKNOWN
    return OTHER


def label_noncommute(user_records: Sequence[CheckIn], places: PersonPlaces) -> PersonPlaces:
    """Label venues outside the home/work clusters by their POI category."""
    if places.home_cluster is None and places.work_cluster is None:
        raise NoAnchor(f"user {places.user_id!r} has neither home nor work")
    excluded: set[str] = set()
    for c in (places.home_cluster, places.work_cluster):
        if c is not None:
            excluded |= c.venue_ids
    stats, _ = venue_stats(user_records)
    buckets: dict[str, list[VenueStat]] = {ENTERTAINMENT: [], OTHER: [], UNKNOWN: []}
    for v in sorted(stats, key=lambda s: s.venue_id):
        if v.venue_id not in excluded:
            buckets[noncommute_label(v.category)].append(v)
    return replace(places, entertainment=tuple(buckets[ENTERTAINMENT]),
                   other=tuple(buckets[OTHER]), unknown=tuple(buckets[UNKNOWN]))


def identify_user(user_id: str, user_records: Sequence[CheckIn], params: IdentParams) -> PersonPlaces | None:
    """Full identification for one user; None when no home or work is found."""
    clusters, total_days = build_clusters(user_records, params.r)
    imp = important_clusters(clusters, total_days, params.a, params.b)
    home, work = identify_home_work(imp, params.k1, params.k2)
    if home is None and work is None:
        return None
    places = PersonPlaces(
        user_id,
        home=home.centroid if home else None,
        work=work.centroid if work else None,
        home_cluster=home,
        work_cluster=work,
    )
    return label_noncommute(user_records, places)


def identify_all(records: Iterable[CheckIn], params: IdentParams) -> dict[str, PersonPlaces]:
    by_user = group_by_user(records)
    out: dict[str, PersonPlaces] = {}
    for user_id in sorted(by_user):
        p = identify_user(user_id, by_user[user_id], params)
        if p is not None:
            out[user_id] = p
    return out


# --- file I/O ------------------------------------------------------------

def write_places(places: Mapping[str, PersonPlaces], registry: ZoneRegistry, path: str | Path) -> None:
    rows = []
    for user_id in sorted(places):
        p = places[user_id]
        for role, pt in (("home", p.home), ("work", p.work)):
            if pt is not None:
                rows.append([user_id, role, fmt_float(pt.lat), fmt_float(pt.lon), assign_zone(pt, registry)])
    write_rows(path, PLACES_HEADER, rows)


def write_noncommute(places: Mapping[str, PersonPlaces], path: str | Path) -> None:
    rows = []
    for user_id in sorted(places):
        p = places[user_id]
        for label, venues in ((ENTERTAINMENT, p.entertainment), (OTHER, p.other), (UNKNOWN, p.unknown)):
            for v in venues:
                rows.append([user_id, v.venue_id, label, fmt_float(v.location.lat),
                             fmt_float(v.location.lon), str(v.days)])
    rows.sort(key=lambda row: (row[0], row[1]))
    write_rows(path, NONCOMMUTE_HEADER, rows)


def load_places(places_path: str | Path, noncommute_path: str | Path | None = None) -> dict[str, PersonPlaces]:
    """Rebuild PersonPlaces (points and venue lists, no clusters) from CSVs."""
    anchors: dict[str, dict[str, GeoPoint]] = defaultdict(dict)
    fh, reader = open_csv(places_path, PLACES_HEADER)
    with fh:
        for row in reader:
            if row:
                anchors[row[0]][row[1]] = GeoPoint(float(row[2]), float(row[3]))
    venues: dict[str, dict[str, list[VenueStat]]] = defaultdict(lambda: defaultdict(list))
    if noncommute_path is not None:
        fh, reader = open_csv(noncommute_path, NONCOMMUTE_HEADER)
        with fh:
            for row in reader:
                if row:
                    v = VenueStat(row[1], GeoPoint(float(row[3]), float(row[4])), int(row[5]))
                    venues[row[0]][row[2]].append(v)
    out = {}
    for user_id in sorted(anchors):
        a = anchors[user_id]
        vs = venues.get(user_id, {})
        out[user_id] = PersonPlaces(
            user_id, home=a.get("home"), work=a.get("work"),
            entertainment=tuple(vs.get(ENTERTAINMENT, ())),
            other=tuple(vs.get(OTHER, ())),
            unknown=tuple(vs.get(UNKNOWN, ())),
        )
    return out
