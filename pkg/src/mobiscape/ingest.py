"""Parsing and validation of check-ins, user profiles and survey diaries."""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping

from .errors import OrphanTrip
from .fileio import atomic_write, fmt_float, open_csv, write_rows
from .geo import GeoPoint

log = logging.getLogger(__name__)

CHECKIN_HEADER = ["user_id", "timestamp", "venue_id", "lat", "lon", "poi_category", "text"]
PROFILE_HEADER = ["user_id", "gender", "age", "education"]
PERSON_HEADER = ["person_id", "gender", "age", "home_zone", "district", "is_commuter"]
TRIP_HEADER = ["person_id", "purpose", "dest_zone", "depart", "arrive"]

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"


class POICategory(str, enum.Enum):
    RESIDENTIAL = "Residential"
    CORPORATION = "Corporation"
    SCHOOL = "School"
    INDUSTRIAL_PARK = "IndustrialPark"
    ENTERTAINMENT = "Entertainment"
    OTHER = "Other"
    UNKNOWN = "Unknown"


class Purpose(str, enum.Enum):
    HOME = "Home"
    WORK = "Work"
    ENTERTAINMENT = "Entertainment"
    OTHER = "Other"


@dataclass(frozen=True, slots=True)
class CheckIn:
    user_id: str
    timestamp: datetime
    venue_id: str
    location: GeoPoint
    poi_category: POICategory
    text: str | None = None


@dataclass(frozen=True, slots=True)
class UserProfile:
    user_id: str
    gender: str | None = None
    age: int | None = None
    education: str | None = None


@dataclass(frozen=True, slots=True)
class SurveyPerson:
    person_id: str
    gender: str
    age: int
    home_zone: str
    district: str
    is_commuter: bool


@dataclass(frozen=True, slots=True)
class SurveyTrip:
    person_id: str
    purpose: Purpose
    dest_zone: str
    depart: datetime
    arrive: datetime


@dataclass(frozen=True, slots=True)
class RowError:
    line: int
    reason: str


def load_poi_mapping(path: str | Path) -> dict[str, POICategory]:
    """Read a ``raw,category`` CSV mapping source POI labels onto the enum."""
    fh, reader = open_csv(path, ["raw", "category"])
    with fh:
        return {row[0].strip().lower(): POICategory(row[1].strip()) for row in reader if row}


def parse_poi_category(raw: str, mapping: Mapping[str, POICategory] | None = None) -> POICategory:
    key = (raw or "").strip()
    if not key:
        return POICategory.UNKNOWN
    try:
        return POICategory(key)
    except ValueError:
        pass
    if mapping:
        hit = mapping.get(key.lower())
        if hit is not None:
            return hit
    return POICategory.UNKNOWN


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text.strip(), TIMESTAMP_FORMAT)


def format_timestamp(ts: datetime) -> str:
    return ts.strftime(TIMESTAMP_FORMAT)


def _parse_checkin(row: list[str], mapping) -> CheckIn:
    if len(row) not in (6, 7):
        raise ValueError(f"expected 6 or 7 fields, got {len(row)}")
    user_id, ts, venue_id, lat, lon, poi = (c.strip() for c in row[:6])
    if not user_id:
        raise ValueError("empty user_id")
    if not venue_id:
        raise ValueError("empty venue_id")
    text = row[6] if len(row) == 7 and row[6] != "" else None
    return CheckIn(
        user_id=user_id,
        timestamp=parse_timestamp(ts),
        venue_id=venue_id,
        location=GeoPoint(float(lat), float(lon)),
        poi_category=parse_poi_category(poi, mapping),
        text=text,
    )


def load_checkins(
    path: str | Path,
    poi_mapping: Mapping[str, POICategory] | None = None,
    rejected: list[RowError] | None = None,
) -> list[CheckIn]:
    """Load a check-in CSV, skipping malformed rows.

    Rejections are logged and, when ``rejected`` is given, appended to it.
    """
    fh, reader = open_csv(path, CHECKIN_HEADER)
    out: list[CheckIn] = []
    bad: list[RowError] = []
    with fh:
        for row in reader:
            if not row:
                continue
            try:
                out.append(_parse_checkin(row, poi_mapping))
            except ValueError as exc:
                bad.append(RowError(reader.line_num, str(exc)))
    if bad:
        log.warning("%s: rejected %d malformed check-in rows", path, len(bad))
    if rejected is not None:
        rejected.extend(bad)
    return out


def write_checkins(records: Iterable[CheckIn], path: str | Path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHECKIN_HEADER)
        for r in records:
            w.writerow([r.user_id, format_timestamp(r.timestamp), r.venue_id,
                        fmt_float(r.location.lat), fmt_float(r.location.lon),
                        r.poi_category.value, r.text or ""])


def filter_active_users(records: Iterable[CheckIn], min_checkins: int = 15) -> list[CheckIn]:
    """Keep only records of users with at least ``min_checkins`` records."""
    records = list(records)
    counts = Counter(r.user_id for r in records)
    return [r for r in records if counts[r.user_id] >= min_checkins]


def group_by_user(records: Iterable[CheckIn]) -> dict[str, list[CheckIn]]:
    by_user: dict[str, list[CheckIn]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    return by_user


def _opt_int(s: str) -> int | None:
    s = s.strip()
    return int(s) if s else None


def _opt(s: str) -> str | None:
    s = s.strip()
    return s or None


def load_profiles(path: str | Path) -> dict[str, UserProfile]:
    fh, reader = open_csv(path, PROFILE_HEADER)
    out: dict[str, UserProfile] = {}
    with fh:
        for row in reader:
            if not row:
                continue
            user_id, gender, age, edu = row
            if not user_id.strip():
                raise ValueError(f"{path}:{reader.line_num}: empty user_id")
            gender = _opt(gender)
            if gender is not None and gender not in ("M", "F"):
                raise ValueError(f"{path}:{reader.line_num}: gender must be M or F")
            age_v = _opt_int(age)
            if age_v is not None and age_v < 0:
                raise ValueError(f"{path}:{reader.line_num}: negative age")
            edu = _opt(edu)
            if edu is not None and edu not in ("Primary", "Secondary", "Tertiary"):
                raise ValueError(f"{path}:{reader.line_num}: unknown education {edu!r}")
            out[user_id] = UserProfile(user_id, gender, age_v, edu)
    return out


def write_profiles(profiles: Iterable[UserProfile], path: str | Path) -> None:
    write_rows(path, PROFILE_HEADER, (
        [p.user_id, p.gender or "", "" if p.age is None else str(p.age), p.education or ""]
        for p in profiles
    ))


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "y"):
        return True
    if s in ("0", "false", "no", "n"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_survey(persons_path: str | Path, trips_path: str | Path,
                zone_ids=None) -> tuple[list[SurveyPerson], list[SurveyTrip]]:
    """Load survey persons and trips, enforcing referential integrity.

    When ``zone_ids`` is given, every person's home zone must be in it.
    """
    persons: list[SurveyPerson] = []
    seen: set[str] = set()
    fh, reader = open_csv(persons_path, PERSON_HEADER)
    with fh:
        for row in reader:
            if not row:
                continue
            pid, gender, age, home_zone, district, commuter = (c.strip() for c in row)
            if pid in seen:
                raise ValueError(f"{persons_path}:{reader.line_num}: duplicate person_id {pid!r}")
            if gender not in ("M", "F"):
                raise ValueError(f"{persons_path}:{reader.line_num}: gender must be M or F")
            if zone_ids is not None and home_zone not in zone_ids:
                raise ValueError(f"{persons_path}:{reader.line_num}: unknown home_zone {home_zone!r}")
            seen.add(pid)
            persons.append(SurveyPerson(pid, gender, int(age), home_zone, district, _parse_bool(commuter)))

    trips: list[SurveyTrip] = []
    fh, reader = open_csv(trips_path, TRIP_HEADER)
    with fh:
        for row in reader:
            if not row:
                continue
            pid, purpose, dest, depart, arrive = (c.strip() for c in row)
            if pid not in seen:
                raise OrphanTrip(pid)
            t = SurveyTrip(pid, Purpose(purpose), dest, parse_timestamp(depart), parse_timestamp(arrive))
            if t.arrive < t.depart:
                raise ValueError(f"{trips_path}:{reader.line_num}: arrive precedes depart")
            trips.append(t)
    return persons, trips


def write_survey(persons: Iterable[SurveyPerson], trips: Iterable[SurveyTrip],
                 persons_path: str | Path, trips_path: str | Path) -> None:
    write_rows(persons_path, PERSON_HEADER, (
        [p.person_id, p.gender, str(p.age), p.home_zone, p.district, "1" if p.is_commuter else "0"]
        for p in persons
    ))
    write_rows(trips_path, TRIP_HEADER, (
        [t.person_id, t.purpose.value, t.dest_zone, format_timestamp(t.depart), format_timestamp(t.arrive)]
        for t in trips
    ))

