"""Labeled home and work places from POI-day filtering confirmed by keywords."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .fileio import fmt_float, open_csv, write_rows
from .geo import GeoPoint
from .ingest import CheckIn, POICategory, group_by_user

HOME = "Home"
WORK = "Work"

ROLE_CATEGORIES = {
    HOME: frozenset({POICategory.RESIDENTIAL}),
    WORK: frozenset({POICategory.CORPORATION, POICategory.SCHOOL, POICategory.INDUSTRIAL_PARK}),
}

MIN_CHECKIN_DAYS = 4

TRUTH_HEADER = ["user_id", "role", "venue_id", "lat", "lon", "checkin_days"]


@dataclass(frozen=True)
class KeywordConfig:
    home_keywords: frozenset[str]
    work_keywords: frozenset[str]

    def __post_init__(self) -> None:
        if not self.home_keywords or not self.work_keywords:
            raise ValueError("both keyword sets must be non-empty")
        shared = self.home_keywords & self.work_keywords
        if shared:
            raise ValueError(f"keywords listed for both roles: {sorted(shared)}")

    def for_role(self, role: str) -> frozenset[str]:
        return self.home_keywords if role == HOME else self.work_keywords

    @classmethod
    def load(cls, path: str | Path) -> "KeywordConfig":
        fh, reader = open_csv(path, ["role", "keyword"])
        sets: dict[str, set[str]] = {"home": set(), "work": set()}
        with fh:
            for row in reader:
                if not row:
                    continue
                role = row[0].strip().lower()
                if role not in sets:
                    raise ValueError(f"{path}:{reader.line_num}: unknown role {row[0]!r}")
                sets[role].add(row[1].strip())
        return cls(frozenset(sets["home"]), frozenset(sets["work"]))

    @classmethod
    def default(cls) -> "KeywordConfig":
        with resources.as_file(resources.files(__package__) / "data" / "keywords.csv") as p:
            return cls.load(p)


@dataclass(frozen=True)
class LabeledPlace:
    user_id: str
    role: str
    location: GeoPoint
    venue_id: str
    checkin_days: int


def poi_candidates(user_records: Sequence[CheckIn], role: str) -> list[tuple[str, int]]:
    """Venues of the role's POI type with at least four distinct check-in days.

    Sorted by day count descending, then venue_id ascending.
    """
    cats = ROLE_CATEGORIES[role]
    days: dict[str, set] = defaultdict(set)
    for r in user_records:
        if r.poi_category in cats:
            days[r.venue_id].add(r.timestamp.date())
    out = [(v, len(d)) for v, d in days.items() if len(d) >= MIN_CHECKIN_DAYS]
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def keyword_match(texts: Iterable[str], keywords: Iterable[str]) -> bool:
    keywords = list(keywords)
    return any(k in t for t in texts if t for k in keywords)


def build_ground_truth(records: Iterable[CheckIn], cfg: KeywordConfig) -> list[LabeledPlace]:
    """At most one Home and one Work label per user.

    The top POI candidate for each role is kept only if some text posted from
    that same venue contains one of the role's keywords.
    """
    out: list[LabeledPlace] = []
    by_user = group_by_user(records)
    for user_id in sorted(by_user):
        recs = by_user[user_id]
        for role in (HOME, WORK):
            cands = poi_candidates(recs, role)
            if not cands:
                continue
            venue_id, n_days = cands[0]
            at_venue = [r for r in recs if r.venue_id == venue_id]
            if keyword_match([r.text for r in at_venue if r.text], cfg.for_role(role)):
                out.append(LabeledPlace(user_id, role, at_venue[0].location, venue_id, n_days))
    return out


def truth_by_user(places: Iterable[LabeledPlace]) -> dict[str, dict[str, LabeledPlace]]:
    out: dict[str, dict[str, LabeledPlace]] = defaultdict(dict)
    for p in places:
        out[p.user_id][p.role] = p
    return dict(out)


def write_ground_truth(places: Iterable[LabeledPlace], path: str | Path) -> None:
    write_rows(path, TRUTH_HEADER, (
        [p.user_id, p.role, p.venue_id, fmt_float(p.location.lat), fmt_float(p.location.lon), str(p.checkin_days)]
        for p in places
    ))


def load_ground_truth(path: str | Path) -> list[LabeledPlace]:
    fh, reader = open_csv(path, TRUTH_HEADER)
    with fh:
        return [
            LabeledPlace(row[0], row[1], GeoPoint(float(row[3]), float(row[4])), row[2], int(row[5]))
            for row in reader if row
        ]
