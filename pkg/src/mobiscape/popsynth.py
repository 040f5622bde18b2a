"""Sample reconstruction by per-zone simulated annealing.

Survey persons give zone-level target tabulations (gender, age band,
age-by-gender, home district). Check-in users with known demographics are
cloned into each zone until the clone tabulations match the targets, measured
by Total Absolute Error (TAE). Mobility attributes are then attached to the
clones through the source person's id.
"""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import DanglingPersonId, DegenerateGroups, SchemeMismatch, UnmappablePerson
from .fileio import fmt_float, open_csv, write_rows
from .geo import ZoneRegistry, assign_zone, haversine_km
from .ingest import Purpose, SurveyPerson, SurveyTrip, UserProfile
from .location import PersonPlaces

TABULATIONS = ("district", "age", "gender", "age_by_gender")
TABULATION_TITLES = {"district": "District", "age": "Age", "gender": "Gender", "age_by_gender": "Age by Gender"}

DEFAULT_AGE_BANDS = ((15, 24), (25, 26), (27, 28), (29, 30), (31, 33), (34, 39), (40, 49), (50, None))
DEFAULT_DISTRICTS = ("Dongcheng", "Xicheng", "Chaoyang", "Haidian", "Fengtai",
                     "Shijingshan", "Changping", "Shunyi", "Tongzhou", "Daxing")

COMMUTER = "commuter"
NONCOMMUTER = "noncommuter"
ALL = "all"

CONSTRAINT_HEADER = ["zone_id", "tabulation", "cell", "target"]
POPULATION_HEADER = ["clone_id", "person_id", "zone_id", "gender", "age", "district", "commuter"]
FIT_HEADER = ["stratum", "tabulation", "tae", "cpe_pct"]


@dataclass(frozen=True)
class CategoryScheme:
    age_bands: tuple[tuple[int, int | None], ...] = DEFAULT_AGE_BANDS
    genders: tuple[str, ...] = ("F", "M")
    districts: tuple[str, ...] = DEFAULT_DISTRICTS

    def __post_init__(self) -> None:
        prev_hi = None
        for i, (lo, hi) in enumerate(self.age_bands):
            if hi is not None and hi < lo:
                raise ValueError(f"age band {lo}-{hi} is empty")
            if hi is None and i != len(self.age_bands) - 1:
                raise ValueError("only the last age band may be open-ended")
            if prev_hi is not None and lo != prev_hi + 1:
                raise ValueError("age bands must be contiguous and ordered")
            prev_hi = hi
        cells = self.cells()
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(cells)})

    @staticmethod
    def band_label(band: tuple[int, int | None]) -> str:
        lo, hi = band
        return f"{lo}+" if hi is None else f"{lo}-{hi}"

    @property
    def age_labels(self) -> list[str]:
        return [self.band_label(b) for b in self.age_bands]

    def age_band(self, age: int) -> str:
        for band in self.age_bands:
            lo, hi = band
            if age >= lo and (hi is None or age <= hi):
                return self.band_label(band)
        raise UnmappablePerson(f"age {age} falls outside the age bands")

    def cells(self) -> list[tuple[str, str]]:
        out: list[tuple[str, str]] = []
        out += [("district", d) for d in self.districts]
        out += [("age", a) for a in self.age_labels]
        out += [("gender", g) for g in self.genders]
        out += [("age_by_gender", f"{a}-{g}") for g in self.genders for a in self.age_labels]
        return out

    @property
    def n_cells(self) -> int:
        return len(self._index)

    def index(self, tabulation: str, cell: str) -> int:
        return self._index[(tabulation, cell)]

    def tabulation_slices(self) -> dict[str, np.ndarray]:
        cells = self.cells()
        return {t: np.array([i for i, c in enumerate(cells) if c[0] == t]) for t in TABULATIONS}

    def person_cells(self, gender: str, age: int, district: str) -> tuple[int, int, int, int]:
        if gender not in self.genders:
            raise UnmappablePerson(f"gender {gender!r} not in scheme")
        if district not in self.districts:
            raise UnmappablePerson(f"district {district!r} not in scheme")
        band = self.age_band(age)
        return (self.index("district", district), self.index("age", band),
                self.index("gender", gender), self.index("age_by_gender", f"{band}-{gender}"))


@dataclass
class ConstraintTable:
    scheme: CategoryScheme
    zones: tuple[str, ...]
    targets: np.ndarray  # (n_zones, n_cells) integer counts

    def zone_targets(self, zone_id: str) -> np.ndarray:
        return self.targets[self.zones.index(zone_id)]

    def zone_population(self, zone_id: str) -> int:
        g = self.scheme.tabulation_slices()["gender"]
        return int(self.zone_targets(zone_id)[g].sum())

    def check(self) -> None:
        """Raise ValueError unless every zone's tabulations are consistent."""
        sl = self.scheme.tabulation_slices()
        n_age = len(self.scheme.age_bands)
        for zi, z in enumerate(self.zones):
            row = self.targets[zi]
            totals = {t: int(row[sl[t]].sum()) for t in TABULATIONS}
            if len(set(totals.values())) != 1:
                raise ValueError(f"zone {z}: tabulation totals differ {totals}")
            ag = row[sl["age_by_gender"]].reshape(len(self.scheme.genders), n_age)
            if not (np.array_equal(ag.sum(axis=0), row[sl["age"]])
                    and np.array_equal(ag.sum(axis=1), row[sl["gender"]])):
                raise ValueError(f"zone {z}: age-by-gender margins disagree")

    def rows(self) -> list[list[str]]:
        cells = self.scheme.cells()
        return [[z, t, c, str(int(self.targets[zi, ci]))]
                for zi, z in enumerate(self.zones) for ci, (t, c) in enumerate(cells)]


def build_constraints(persons: Iterable[SurveyPerson], scheme: CategoryScheme | None = None,
                      commuter_split: bool = True,
                      zones: Sequence[str] | None = None) -> dict[str, ConstraintTable]:
    """Zone-level target tabulations, per commuter stratum when split."""
    scheme = scheme or CategoryScheme()
    persons = list(persons)
    universe = tuple(zones) if zones is not None else tuple(sorted({p.home_zone for p in persons}))
    zpos = {z: i for i, z in enumerate(universe)}
    strata = (COMMUTER, NONCOMMUTER) if commuter_split else (ALL,)
    tables = {s: np.zeros((len(universe), scheme.n_cells), dtype=np.int64) for s in strata}
    for p in persons:
        if p.home_zone not in zpos:
            raise UnmappablePerson(f"person {p.person_id!r}: home zone {p.home_zone!r} not in zone universe")
        try:
            cells = scheme.person_cells(p.gender, p.age, p.district)
        except UnmappablePerson as exc:
            raise UnmappablePerson(f"person {p.person_id!r}: {exc}") from None
        s = ALL if not commuter_split else (COMMUTER if p.is_commuter else NONCOMMUTER)
        tables[s][zpos[p.home_zone], list(cells)] += 1
    return {s: ConstraintTable(scheme, universe, t) for s, t in tables.items()}


def write_constraints(table: ConstraintTable, path: str | Path) -> None:
    write_rows(path, CONSTRAINT_HEADER, table.rows())


def load_constraints(path: str | Path, scheme: CategoryScheme | None = None) -> ConstraintTable:
    scheme = scheme or CategoryScheme()
    fh, reader = open_csv(path, CONSTRAINT_HEADER)
    entries: dict[str, dict[int, int]] = defaultdict(dict)
    with fh:
        for row in reader:
            if not row:
                continue
            try:
                ci = scheme.index(row[1], row[2])
            except KeyError:
                raise SchemeMismatch(f"{path}: cell {row[1]}/{row[2]} not in scheme") from None
            entries[row[0]][ci] = int(row[3])
    zones = tuple(sorted(entries))
    t = np.zeros((len(zones), scheme.n_cells), dtype=np.int64)
    for zi, z in enumerate(zones):
        for ci, v in entries[z].items():
            t[zi, ci] = v
    return ConstraintTable(scheme, zones, t)


# --- candidates and annealing --------------------------------------------

@dataclass(frozen=True)
class Candidate:
    person_id: str
    gender: str
    age: int
    home_district: str
    home_zone: str
    commuter: bool


def candidates_from_places(places: Mapping[str, PersonPlaces], profiles: Mapping[str, UserProfile],
                           registry: ZoneRegistry, scheme: CategoryScheme | None = None) -> list[Candidate]:
    """Users with gender, a mappable age and an identified home in a scheme district.

    The commuter flag is whether a work place was identified.
    """
    scheme = scheme or CategoryScheme()
    out = []
    for uid in sorted(places):
        p = places[uid]
        prof = profiles.get(uid)
        if p.home is None or prof is None or prof.gender is None or prof.age is None:
            continue
        zone_id = assign_zone(p.home, registry)
        district = registry[zone_id].district
        try:
            scheme.person_cells(prof.gender, prof.age, district)
        except UnmappablePerson:
            continue
        out.append(Candidate(uid, prof.gender, prof.age, district, zone_id, p.work is not None))
    return out


@dataclass(frozen=True)
class AnnealSchedule:
    alpha: float = 0.999
    max_steps: int = 50_000
    t0_divisor: float = 10.0
    t0_floor: float = 1.0

    def initial_temperature(self, tae0: int) -> float:
        return max(self.t0_floor, tae0 / self.t0_divisor)


@dataclass
class AnnealResult:
    members: list[int]  # indices into the candidate pool, sorted
    tae: int
    best_trace: list[int]
    steps: int


_CHUNK = 4096


def anneal_zone(cand_cells: np.ndarray, targets: np.ndarray, schedule: AnnealSchedule,
                rng_seed, zone_population: int | None = None) -> AnnealResult:
    """Anneal one zone.

    ``cand_cells`` is an ``(n_candidates, k)`` array of the cell indices each
    candidate increments; ``targets`` the zone's target count per cell. A move
    replaces a random member with a random candidate; worse moves pass with
    probability ``exp(-dTAE / T)`` under geometric cooling. The best multiset
    seen is returned, so ``best_trace`` never increases.
    """
    target = [int(x) for x in targets]
    n_cand = len(cand_cells)
    pop = zone_population
    if pop is None:
        raise ValueError("zone_population is required")
    if pop == 0:
        tae0 = sum(abs(t) for t in target)
        return AnnealResult([], tae0, [tae0], 0)
    if n_cand == 0:
        raise ValueError("candidate pool is empty")
    cells = [tuple(int(c) for c in row) for row in cand_cells]
    rng = np.random.default_rng(rng_seed)
    members = [int(x) for x in rng.integers(n_cand, size=pop)]
    dev = [-t for t in target]
    for m in members:
        for c in cells[m]:
            dev[c] += 1
    tae = sum(abs(d) for d in dev)
    best_tae = tae
    best_members = list(members)
    trace = [tae]
    trace_append = trace.append
    temp = schedule.initial_temperature(tae)
    alpha = schedule.alpha
    step = 0
    while step < schedule.max_steps and tae > 0:
        n = min(_CHUNK, schedule.max_steps - step)
        slots = rng.integers(pop, size=n).tolist()
        picks = rng.integers(n_cand, size=n).tolist()
        coins = rng.random(n).tolist()
        for i, j, u in zip(slots, picks, coins):
            step += 1
            old = members[i]
            if old != j:
                # |d - 1| - |d| is -1 for d >= 1, else +1; |d + 1| - |d| is +1 for d >= 0, else -1
                delta = 0
                for c in cells[old]:
                    d = dev[c]
                    delta += -1 if d >= 1 else 1
                    dev[c] = d - 1
                for c in cells[j]:
                    d = dev[c]
                    delta += 1 if d >= 0 else -1
                    dev[c] = d + 1
                if delta <= 0 or u < math.exp(-delta / temp):
                    members[i] = j
                    tae += delta
                    if tae < best_tae:
                        best_tae = tae
                        best_members = members.copy()
                else:
                    for c in cells[j]:
                        dev[c] -= 1
                    for c in cells[old]:
                        dev[c] += 1
            temp *= alpha
            trace_append(best_tae)
            if tae == 0:
                break
    return AnnealResult(sorted(best_members), best_tae, trace, step)


def zone_seed(master_seed: int, stratum: str, zone_id: str) -> int:
    h = hashlib.sha256(f"{int(master_seed)}|{stratum}|{zone_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class ZoneResult:
    stratum: str
    zone_id: str
    members: list[Candidate]
    tae: int
    steps: int


@dataclass
class SyntheticPopulation:
    scheme: CategoryScheme
    constraints: dict[str, ConstraintTable]
    zones: list[ZoneResult] = field(default_factory=list)

    @property
    def tae(self) -> int:
        return sum(z.tae for z in self.zones)

    def clones(self):
        """Yield ``(clone_id, stratum, zone_id, candidate)`` in a stable order."""
        n = 0
        for z in self.zones:
            for c in z.members:
                yield f"c{n:07d}", z.stratum, z.zone_id, c
                n += 1

    def fit_report(self) -> list[tuple[str, str, int, float]]:
        """Per stratum and tabulation: TAE and cell percentage error."""
        sl = self.scheme.tabulation_slices()
        out = []
        for stratum, table in self.constraints.items():
            achieved = tabulate(self, stratum)
            for t in TABULATIONS:
                tae_t = int(np.abs(table.targets[:, sl[t]] - achieved[:, sl[t]]).sum())
                n = int(table.targets[:, sl[t]].sum())
                cpe = 100.0 * tae_t / n if n else 0.0
                out.append((stratum, t, tae_t, cpe))
        return out


def tabulate(population: SyntheticPopulation, stratum: str) -> np.ndarray:
    table = population.constraints[stratum]
    zpos = {z: i for i, z in enumerate(table.zones)}
    out = np.zeros_like(table.targets)
    for zr in population.zones:
        if zr.stratum != stratum:
            continue
        if zr.zone_id not in zpos:
            raise SchemeMismatch(f"zone {zr.zone_id!r} has no targets")
        for c in zr.members:
            out[zpos[zr.zone_id], list(population.scheme.person_cells(c.gender, c.age, c.home_district))] += 1
    return out


def tae(population: SyntheticPopulation, targets: Mapping[str, ConstraintTable] | None = None) -> int:
    """Sum of |target - achieved| over every zone and cell of every stratum."""
    targets = targets if targets is not None else population.constraints
    if set(targets) != set(population.constraints):
        raise SchemeMismatch("strata differ between population and targets")
    total = 0
    for stratum, table in targets.items():
        ref = population.constraints[stratum]
        if table.scheme != population.scheme or table.zones != ref.zones:
            raise SchemeMismatch(f"stratum {stratum}: zone set or category scheme differs")
        total += int(np.abs(table.targets - tabulate(population, stratum)).sum())
    return total


@dataclass(frozen=True)
class SynthConfig:
    """``noncommuter_pool``: "stratum" keeps the non-commuter pool strict,
    "all" always draws non-commuters from every candidate, and "auto" does so
    only when the non-commuter pool misses a cell that has a positive target."""

    rng_seed: int
    schedule: AnnealSchedule = AnnealSchedule()
    workers: int = 1
    noncommuter_pool: str = "auto"

    def __post_init__(self) -> None:
        if self.noncommuter_pool not in ("stratum", "all", "auto"):
            raise ValueError(f"noncommuter_pool must be stratum, all or auto, not {self.noncommuter_pool!r}")


def _zone_job(args):
    stratum, zone_id, cand_cells, target, pop, schedule, seed = args
    res = anneal_zone(cand_cells, target, schedule, seed, zone_population=pop)
    res.best_trace = res.best_trace[-1:]
    return stratum, zone_id, res


def _covers(pool: Sequence[Candidate], table: ConstraintTable) -> bool:
    """True when every cell with a positive target holds at least one pool member."""
    scheme = table.scheme
    have = np.zeros(table.targets.shape[1], dtype=bool)
    for c in pool:
        have[list(scheme.person_cells(c.gender, c.age, c.home_district))] = True
    need = table.targets.sum(axis=0) > 0
    return bool(np.all(have[need]))


def synthesize(candidates: Sequence[Candidate], constraints: Mapping[str, ConstraintTable],
               cfg: SynthConfig) -> SyntheticPopulation:
    """Anneal every zone of every stratum against its own candidate pool.

    Pools are stratum-wide (commuter flag), not restricted to the zone.
    Per-zone seeds derive from (seed, stratum, zone_id), so serial and
    parallel runs agree.
    """
    if not constraints:
        raise ValueError("no constraint tables given")
    scheme = next(iter(constraints.values())).scheme
    pools: dict[str, list[Candidate]] = {}
    for stratum in constraints:
        if stratum == ALL:
            pool = list(candidates)
        else:
            want = stratum == COMMUTER
            pool = [c for c in candidates if c.commuter == want]
            if stratum == NONCOMMUTER and (
                    cfg.noncommuter_pool == "all"
                    or (cfg.noncommuter_pool == "auto" and not _covers(pool, constraints[stratum]))):
                pool = list(candidates)
        pools[stratum] = pool

    jobs = []
    for stratum, table in constraints.items():
        if table.scheme != scheme:
            raise SchemeMismatch("constraint tables use different schemes")
        pool = pools[stratum]
        cc = np.array([scheme.person_cells(c.gender, c.age, c.home_district) for c in pool],
                      dtype=np.int64).reshape(len(pool), 4)
        for zi, z in enumerate(table.zones):
            pop = table.zone_population(z)
            if pop > 0 and not pool:
                raise ValueError(f"stratum {stratum}: zone {z} needs {pop} persons but the pool is empty")
            jobs.append((stratum, z, cc, table.targets[zi], pop, cfg.schedule,
                         zone_seed(cfg.rng_seed, stratum, z)))

    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_zone_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        results = [_zone_job(j) for j in jobs]

    out = SyntheticPopulation(scheme, dict(constraints))
    for stratum, z, res in results:
        pool = pools[stratum]
        out.zones.append(ZoneResult(stratum, z, [pool[i] for i in res.members], res.tae, res.steps))
    return out


def write_population(population: SyntheticPopulation, path: str | Path) -> None:
    write_rows(path, POPULATION_HEADER, (
        [cid, c.person_id, zone_id, c.gender, str(c.age), c.home_district, "1" if stratum == COMMUTER or
         (stratum == ALL and c.commuter) else "0"]
        for cid, stratum, zone_id, c in population.clones()
    ))


def write_fit_report(population: SyntheticPopulation, path: str | Path) -> None:
    write_rows(path, FIT_HEADER, (
        [s, TABULATION_TITLES[t], str(v), fmt_float(cpe)] for s, t, v, cpe in population.fit_report()
    ))


@dataclass(frozen=True)
class PopulationRow:
    clone_id: str
    person_id: str
    zone_id: str
    gender: str
    age: int
    district: str
    commuter: bool


def load_population(path: str | Path) -> list[PopulationRow]:
    fh, reader = open_csv(path, POPULATION_HEADER)
    with fh:
        return [PopulationRow(r[0], r[1], r[2], r[3], int(r[4]), r[5], r[6] == "1") for r in reader if r]


# --- mobility attachment --------------------------------------------------

@dataclass(frozen=True)
class EnrichedClone:
    clone_id: str
    person_id: str
    zone_id: str
    places: PersonPlaces

    def commute_km(self) -> float | None:
        return self.places.commute_km()


def attach_mobility(clones: Iterable, places: Mapping[str, PersonPlaces]) -> list[EnrichedClone]:
    """Give each clone its source person's identified places.

    ``clones`` may be :meth:`SyntheticPopulation.clones` tuples or
    :class:`PopulationRow` records.
    """
    out = []
    for item in clones:
        if isinstance(item, PopulationRow):
            cid, pid, zone = item.clone_id, item.person_id, item.zone_id
        else:
            cid, _, zone, cand = item
            pid = cand.person_id
        p = places.get(pid)
        if p is None:
            raise DanglingPersonId(f"clone {cid}: no places for person {pid!r}")
        out.append(EnrichedClone(cid, pid, zone, p))
    return out


# --- attribute screening ---------------------------------------------------

@dataclass(frozen=True)
class KruskalResult:
    h: float
    p_value: float
    df: int
    group_sizes: dict[str, int]
    group_means: dict[str, float]


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    ranks = np.empty(len(values))
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def kruskal_wallis(*groups: Sequence[float]) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-square p-value."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    groups = [g for g in groups if g.size]
    if len(groups) < 2:
        raise DegenerateGroups("Kruskal-Wallis needs at least two non-empty groups")
    allv = np.concatenate(groups)
    n = allv.size
    ranks = average_ranks(allv)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(allv, return_counts=True)
    ties = float((counts ** 3 - counts).sum())
    correction = 1.0 - ties / (n ** 3 - n)
    if correction == 0:
        return math.nan, math.nan
    h /= correction
    return h, float(stats.chi2.sf(h, len(groups) - 1))


def survey_commutes(persons: Sequence[SurveyPerson], trips: Sequence[SurveyTrip],
                    registry: ZoneRegistry) -> dict[str, float]:
    """Commuting distance per commuter: home zone to first work destination, centroid to centroid."""
    work_zone: dict[str, str] = {}
    for t in trips:
        if t.purpose is Purpose.WORK:
            work_zone.setdefault(t.person_id, t.dest_zone)
    out = {}
    for p in persons:
        if p.is_commuter and p.person_id in work_zone:
            out[p.person_id] = haversine_km(registry[p.home_zone].centroid,
                                            registry[work_zone[p.person_id]].centroid)
    return out


def screen_attributes(persons: Sequence[SurveyPerson], trips: Sequence[SurveyTrip], registry: ZoneRegistry,
                      attrs: Sequence[str] = ("age", "gender", "district"),
                      scheme: CategoryScheme | None = None) -> dict[str, KruskalResult]:
    """Kruskal-Wallis test of commuting distance across each attribute's groups."""
    scheme = scheme or CategoryScheme()
    dist = survey_commutes(persons, trips, registry)
    labelers = {
        "age": lambda p: scheme.age_band(p.age),
        "gender": lambda p: p.gender,
        "district": lambda p: p.district,
    }
    out = {}
    for attr in attrs:
        if attr not in labelers:
            raise ValueError(f"unknown attribute {attr!r}")
        groups: dict[str, list[float]] = defaultdict(list)
        for p in persons:
            if p.person_id in dist:
                try:
                    groups[labelers[attr](p)].append(dist[p.person_id])
                except UnmappablePerson:
                    continue
        keys = sorted(groups)
        if len([k for k in keys if groups[k]]) < 2:
            raise DegenerateGroups(f"attribute {attr!r} has fewer than two non-empty groups")
        h, pv = kruskal_wallis(*(groups[k] for k in keys))
        out[attr] = KruskalResult(h, pv, len(keys) - 1, {k: len(groups[k]) for k in keys},
                                  {k: float(np.mean(groups[k])) for k in keys})
    return out

