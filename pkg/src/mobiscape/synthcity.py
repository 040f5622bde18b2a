"""Deterministic toy city: zones, a travel survey and check-in streams.

Homes and workplaces are planted, so identification and reconstruction can be
scored against known truth. Commuting distance depends on age band, which is
what makes an age-skewed check-in sample visibly biased against the survey.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid
from .fileio import atomic_write, fmt_float, write_rows
from .geo import GeoPoint, Zone, ZoneRegistry, assign_zone, write_zones
from .ingest import (
    CheckIn,
    POICategory,
    Purpose,
    SurveyPerson,
    SurveyTrip,
    UserProfile,
    write_checkins,
    write_profiles,
    write_survey,
)
from .popsynth import DEFAULT_AGE_BANDS, DEFAULT_DISTRICTS

M_PER_DEG_LAT = 6371000.0 * math.pi / 180.0

# Share of adults per age band and the band-level behaviour model.
BASE_AGE_SHARES = (0.14, 0.05, 0.05, 0.05, 0.07, 0.13, 0.20, 0.31)
COMMUTER_PROB = (0.55, 0.85, 0.85, 0.85, 0.85, 0.85, 0.85, 0.35)
COMMUTE_MEDIAN_KM = (0.9, 1.3, 2.0, 2.8, 3.5, 3.5, 2.5, 1.0)
COMMUTE_SIGMA = 0.6
OLDEST_AGE = 70

HOME_TEXTS = ("晚安北京", "回家睡觉", "起床啦", "宿舍好冷", "早安")
WORK_TEXTS = ("又加班", "在办公室", "上班打卡", "公司楼下", "值班中")
NOISE_TEXTS = ("hello", "今天天气不错", "好吃", "周末愉快", "排队中")

WORK_CATEGORIES = (POICategory.CORPORATION, POICategory.SCHOOL, POICategory.INDUSTRIAL_PARK)
NOISE_CATEGORIES = (POICategory.ENTERTAINMENT, POICategory.ENTERTAINMENT, POICategory.OTHER, POICategory.UNKNOWN)


@dataclass(frozen=True)
class CityConfig:
    rng_seed: int
    n_zones: int = 100
    zone_size_km: float = 1.0
    origin: tuple[float, float] = (39.85, 116.30)  # south-west corner
    n_users: int = 500
    days_span: int = 120
    start: date = date(2012, 3, 1)
    checkins_per_user_range: tuple[int, int] = (15, 2000)
    home_event_rate: float = 0.6
    work_event_rate: float = 0.5
    noise_venue_rate: float = 0.3
    gps_jitter_m: float = 15.0
    work_spread_m: float = 60.0
    venues_per_home: int = 2
    venues_per_work: int = 3
    noise_venues_per_user: int = 6
    text_rate: float = 0.15
    labeled_category_rate: float = 0.8
    profile_missing_rate: float = 0.1
    survey_size: int = 2000
    bias_spec: tuple[float, ...] | None = None

    def validate(self) -> None:
        counts = ("n_zones", "n_users", "days_span", "survey_size",
                  "venues_per_home", "venues_per_work", "noise_venues_per_user")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        lo, hi = self.checkins_per_user_range
        if not 0 < lo <= hi:
            raise ConfigInvalid("checkins_per_user_range must satisfy 0 < lo <= hi")
        for name in ("home_event_rate", "work_event_rate", "noise_venue_rate", "text_rate",
                     "labeled_category_rate", "profile_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1]")
        if self.gps_jitter_m < 0 or self.work_spread_m < 0 or self.zone_size_km <= 0:
            raise ConfigInvalid("distances must be non-negative")
        if self.bias_spec is not None:
            if len(self.bias_spec) != len(DEFAULT_AGE_BANDS):
                raise ConfigInvalid(f"bias_spec needs {len(DEFAULT_AGE_BANDS)} weights")
            if any(w < 0 for w in self.bias_spec) or sum(self.bias_spec) <= 0:
                raise ConfigInvalid("bias_spec weights must be non-negative with a positive sum")


# Weights over age bands emulating a young-skewed social media sample.
YOUNG_BIAS = (6.0, 4.0, 1.0, 1.0, 0.6, 0.4, 0.2, 0.05)


@dataclass
class PlantedUser:
    user_id: str
    home: GeoPoint
    work: GeoPoint | None
    gender: str
    age: int
    education: str


@dataclass
class GeneratedCity:
    config: CityConfig
    registry: ZoneRegistry
    checkins: list[CheckIn]
    profiles: list[UserProfile]
    persons: list[SurveyPerson]
    trips: list[SurveyTrip]
    truth: dict[str, PlantedUser]
    venues: dict[str, tuple[GeoPoint, POICategory]] = field(default_factory=dict)


class _Grid:
    def __init__(self, cfg: CityConfig):
        self.rows = max(1, int(math.isqrt(cfg.n_zones)))
        self.cols = math.ceil(cfg.n_zones / self.rows)
        self.n = cfg.n_zones
        self.size_km = cfg.zone_size_km
        self.lat0, self.lon0 = cfg.origin
        self.m_per_deg_lon = M_PER_DEG_LAT * math.cos(math.radians(self.lat0 + self.rows * self.size_km / 222.0))

    def cell_origin_m(self, k: int) -> tuple[float, float]:
        row, col = divmod(k, self.cols)
        return col * self.size_km * 1000.0, row * self.size_km * 1000.0

    def to_point(self, x_m: float, y_m: float) -> GeoPoint:
        return GeoPoint(self.lat0 + y_m / M_PER_DEG_LAT, self.lon0 + x_m / self.m_per_deg_lon)

    def inside(self, x_m: float, y_m: float) -> bool:
        if x_m < 0 or y_m < 0:
            return False
        col = int(x_m // (self.size_km * 1000.0))
        row = int(y_m // (self.size_km * 1000.0))
        return col < self.cols and row < self.rows and row * self.cols + col < self.n

    def registry(self) -> ZoneRegistry:
        zones = []
        n_d = len(DEFAULT_DISTRICTS)
        s = self.size_km * 1000.0
        width = len(str(self.n - 1))
        for k in range(self.n):
            x, y = self.cell_origin_m(k)
            ring = (self.to_point(x, y), self.to_point(x + s, y), self.to_point(x + s, y + s),
                    self.to_point(x, y + s), self.to_point(x, y))
            zones.append(Zone(
                zone_id=f"Z{k:0{width}d}",
                district=DEFAULT_DISTRICTS[k * n_d // self.n],
                centroid=self.to_point(x + s / 2, y + s / 2),
                boundary=ring,
            ))
        return ZoneRegistry(zones)


def _draw_age(rng: np.random.Generator, shares: np.ndarray) -> tuple[int, int]:
    band = int(rng.choice(len(shares), p=shares))
    lo, hi = DEFAULT_AGE_BANDS[band]
    hi = OLDEST_AGE if hi is None else hi
    return band, int(rng.integers(lo, hi + 1))


def _offset(rng: np.random.Generator, sigma_m: float) -> tuple[float, float]:
    if sigma_m == 0:
        return 0.0, 0.0
    dx, dy = rng.normal(0.0, sigma_m, size=2)
    return float(dx), float(dy)


class _Person:
    """Shared demographic and spatial draws for survey persons and users."""

    def __init__(self, rng, grid: _Grid, shares: np.ndarray):
        self.band, self.age = _draw_age(rng, shares)
        self.gender = "F" if rng.random() < 0.5 else "M"
        self.education = ("Primary", "Secondary", "Tertiary")[int(rng.integers(3))]
        self.home_zone = int(rng.integers(grid.n))
        x0, y0 = grid.cell_origin_m(self.home_zone)
        s = grid.size_km * 1000.0
        self.hx = x0 + float(rng.random()) * s
        self.hy = y0 + float(rng.random()) * s
        self.commuter = bool(rng.random() < COMMUTER_PROB[self.band])
        self.wx = self.wy = None
        if self.commuter:
            self.wx, self.wy = self._work_location(rng, grid)

    def _work_location(self, rng, grid: _Grid) -> tuple[float, float]:
        median_m = COMMUTE_MEDIAN_KM[self.band] * 1000.0
        x = y = 0.0
        for _ in range(50):
            d = median_m * math.exp(COMMUTE_SIGMA * float(rng.normal()))
            theta = float(rng.random()) * 2 * math.pi
            x, y = self.hx + d * math.cos(theta), self.hy + d * math.sin(theta)
            if grid.inside(x, y) and d > 50.0:
                return x, y
        # every draw left the city: settle for a 200 m hop that stays inside
        x = self.hx + 200.0 if grid.inside(self.hx + 200.0, self.hy) else self.hx - 200.0
        return x, self.hy


def _biased_shares(bias: tuple[float, ...] | None) -> np.ndarray:
    base = np.array(BASE_AGE_SHARES, dtype=float)
    if bias is not None:
        base = base * np.array(bias, dtype=float)
    return base / base.sum()


def _clock(day: date, hour: int, rng) -> datetime:
    return datetime(day.year, day.month, day.day, hour, int(rng.integers(60)), int(rng.integers(60)))


_HOME_HOURS = (22, 23, 0, 1, 2, 3, 4, 5, 6)
_WORK_HOURS = (9, 10, 11, 13, 14, 15, 16, 17)


def generate(cfg: CityConfig) -> GeneratedCity:
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    grid = _Grid(cfg)
    registry = grid.registry()
    zone_ids = registry.zone_ids

    # survey ------------------------------------------------------------
    persons: list[SurveyPerson] = []
    trips: list[SurveyTrip] = []
    survey_day = cfg.start + timedelta(days=7)
    while survey_day.weekday() >= 5:
        survey_day += timedelta(days=1)
    unbiased = _biased_shares(None)
    for n in range(cfg.survey_size):
        pid = f"s{n:05d}"
        p = _Person(rng, grid, unbiased)
        zid = zone_ids[p.home_zone]
        persons.append(SurveyPerson(pid, p.gender, p.age, zid, registry[zid].district, p.commuter))
        t = datetime(survey_day.year, survey_day.month, survey_day.day, 7, 30)
        if p.commuter:
            wz = assign_zone(grid.to_point(p.wx, p.wy), registry)
            trips.append(SurveyTrip(pid, Purpose.WORK, wz, t, t + timedelta(minutes=40)))
            t = t.replace(hour=17, minute=30)
            trips.append(SurveyTrip(pid, Purpose.HOME, zid, t, t + timedelta(minutes=40)))
            t = t.replace(hour=19, minute=0)
        for _ in range(int(rng.integers(0, 3))):
            purpose = Purpose.ENTERTAINMENT if rng.random() < 0.5 else Purpose.OTHER
            d = 1500.0 * math.exp(0.7 * float(rng.normal()))
            theta = float(rng.random()) * 2 * math.pi
            x, y = p.hx + d * math.cos(theta), p.hy + d * math.sin(theta)
            if not grid.inside(x, y):
                x, y = p.hx, p.hy
            trips.append(SurveyTrip(pid, purpose, assign_zone(grid.to_point(x, y), registry),
                                    t, t + timedelta(minutes=30)))
            t = t + timedelta(hours=2)
            trips.append(SurveyTrip(pid, Purpose.HOME, zid, t, t + timedelta(minutes=30)))
            t = t + timedelta(hours=1)

    # check-in users ------------------------------------------------------
    shares = _biased_shares(cfg.bias_spec)
    checkins: list[CheckIn] = []
    profiles: list[UserProfile] = []
    truth: dict[str, PlantedUser] = {}
    venues: dict[str, tuple[GeoPoint, POICategory]] = {}
    days = [cfg.start + timedelta(days=i) for i in range(cfg.days_span)]
    vcount = 0

    def new_venue(x: float, y: float, cat: POICategory) -> str:
        nonlocal vcount
        vid = f"v{vcount:07d}"
        vcount += 1
        venues[vid] = (grid.to_point(x, y), cat)
        return vid

    for n in range(cfg.n_users):
        uid = f"u{n:05d}"
        p = _Person(rng, grid, shares)
        home_pt = grid.to_point(p.hx, p.hy)
        work_pt = grid.to_point(p.wx, p.wy) if p.commuter else None
        truth[uid] = PlantedUser(uid, home_pt, work_pt, p.gender, p.age, p.education)

        missing = rng.random() < cfg.profile_missing_rate
        profiles.append(UserProfile(uid, p.gender, None if missing else p.age, p.education))

        home_cat = POICategory.RESIDENTIAL if rng.random() < cfg.labeled_category_rate else POICategory.UNKNOWN
        home_v = []
        for _ in range(cfg.venues_per_home):
            dx, dy = _offset(rng, cfg.gps_jitter_m)
            home_v.append(new_venue(p.hx + dx, p.hy + dy, home_cat))
        work_v = []
        if p.commuter:
            if rng.random() < cfg.labeled_category_rate:
                work_cat = POICategory.SCHOOL if p.band == 0 else WORK_CATEGORIES[int(rng.integers(3))]
            else:
                work_cat = POICategory.UNKNOWN
            for _ in range(cfg.venues_per_work):
                sx, sy = _offset(rng, cfg.work_spread_m)
                dx, dy = _offset(rng, cfg.gps_jitter_m)
                work_v.append(new_venue(p.wx + sx + dx, p.wy + sy + dy, work_cat))
        noise_v = []
        for _ in range(cfg.noise_venues_per_user):
            d = 2000.0 * math.exp(0.7 * float(rng.normal()))
            theta = float(rng.random()) * 2 * math.pi
            x, y = p.hx + d * math.cos(theta), p.hy + d * math.sin(theta)
            if not grid.inside(x, y):
                x, y = p.hx - d * math.cos(theta), p.hy - d * math.sin(theta)
                if not grid.inside(x, y):
                    x, y = p.hx + 500.0, p.hy
            noise_v.append(new_venue(x, y, NOISE_CATEGORIES[int(rng.integers(len(NOISE_CATEGORIES)))]))

        def pick(vs: list[str]) -> str:
            # first venue of an anchor carries most of its check-ins
            if len(vs) == 1 or rng.random() < 0.6:
                return vs[0]
            return vs[1 + int(rng.integers(len(vs) - 1))]

        def text(pool) -> str | None:
            if rng.random() < cfg.text_rate:
                return pool[int(rng.integers(len(pool)))]
            return None

        recs: list[CheckIn] = []

        def emit(ts: datetime, vid: str, txt: str | None) -> None:
            loc, cat = venues[vid]
            recs.append(CheckIn(uid, ts, vid, loc, cat, txt))

        for day in days:
            if rng.random() < cfg.home_event_rate:
                emit(_clock(day, _HOME_HOURS[int(rng.integers(len(_HOME_HOURS)))], rng), pick(home_v),
                     text(HOME_TEXTS))
            if work_v and day.weekday() < 5 and rng.random() < cfg.work_event_rate:
                emit(_clock(day, _WORK_HOURS[int(rng.integers(len(_WORK_HOURS)))], rng), pick(work_v),
                     text(WORK_TEXTS))
            if rng.random() < cfg.noise_venue_rate:
                emit(_clock(day, int(rng.integers(24)), rng), noise_v[int(rng.integers(len(noise_v)))],
                     text(NOISE_TEXTS))

        lo, hi = cfg.checkins_per_user_range
        while len(recs) < lo:
            day = days[int(rng.integers(len(days)))]
            emit(_clock(day, _HOME_HOURS[int(rng.integers(len(_HOME_HOURS)))], rng), pick(home_v), None)
        if len(recs) > hi:
            keep = np.sort(rng.choice(len(recs), size=hi, replace=False))
            recs = [recs[i] for i in keep]
        recs.sort(key=lambda r: (r.timestamp, r.venue_id))
        checkins.extend(recs)

    return GeneratedCity(cfg, registry, checkins, profiles, persons, trips, truth, venues)


TRUTH_HEADER = ["user_id", "role", "lat", "lon"]


def write_city(city: GeneratedCity, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "zones": out / "zones.csv",
        "checkins": out / "checkins.csv",
        "profiles": out / "profiles.csv",
        "survey_persons": out / "survey_persons.csv",
        "survey_trips": out / "survey_trips.csv",
        "truth": out / "truth.csv",
    }
    with atomic_write(paths["zones"]) as fh:
        write_zones(city.registry, fh)
    write_checkins(city.checkins, paths["checkins"])
    write_profiles(city.profiles, paths["profiles"])
    write_survey(city.persons, city.trips, paths["survey_persons"], paths["survey_trips"])
    rows = []
    for uid in sorted(city.truth):
        t = city.truth[uid]
        rows.append([uid, "home", fmt_float(t.home.lat), fmt_float(t.home.lon)])
        if t.work is not None:
            rows.append([uid, "work", fmt_float(t.work.lat), fmt_float(t.work.lon)])
    write_rows(paths["truth"], TRUTH_HEADER, rows)
    return paths
