import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from mobiscape.errors import DanglingPersonId, DegenerateGroups, SchemeMismatch, UnmappablePerson
from mobiscape.geo import GeoPoint, Zone, ZoneRegistry
from mobiscape.ingest import Purpose, SurveyPerson, SurveyTrip, UserProfile
from mobiscape.location import PersonPlaces
from mobiscape.popsynth import (
    ALL, COMMUTER, NONCOMMUTER, AnnealSchedule, Candidate, CategoryScheme, SynthConfig, anneal_zone,
    attach_mobility, average_ranks, build_constraints, candidates_from_places, kruskal_wallis,
    load_constraints, load_population, screen_attributes, survey_commutes, synthesize, tabulate, tae,
    write_constraints, write_fit_report, write_population, zone_seed,
)

from . import oracles

SCHEME = CategoryScheme()
DISTRICTS = SCHEME.districts


def _person(pid, gender, age, zone="Z1", district="Haidian", commuter=True):
    return SurveyPerson(pid, gender, age, zone, district, commuter)


def test_scheme_cells():
    assert SCHEME.age_labels == ["15-24", "25-26", "27-28", "29-30", "31-33", "34-39", "40-49", "50+"]
    assert SCHEME.n_cells == 10 + 8 + 2 + 16
    assert SCHEME.age_band(50) == "50+" and SCHEME.age_band(24) == "15-24"
    with pytest.raises(UnmappablePerson):
        SCHEME.age_band(14)
    with pytest.raises(UnmappablePerson):
        SCHEME.person_cells("X", 30, "Haidian")
    with pytest.raises(ValueError):
        CategoryScheme(age_bands=((15, 20), (22, None)))


def test_constraint_examples():
    tables = build_constraints([_person("a", "F", 20), _person("b", "M", 35)], zones=["Z1", "Z2"])
    t = tables[COMMUTER]
    row = t.zone_targets("Z1")
    assert row[SCHEME.index("gender", "F")] == 1 and row[SCHEME.index("gender", "M")] == 1
    assert row[SCHEME.index("age", "15-24")] == 1 and row[SCHEME.index("age", "34-39")] == 1
    assert row[SCHEME.index("age_by_gender", "15-24-F")] == 1
    assert row[SCHEME.index("age_by_gender", "34-39-M")] == 1
    assert row[SCHEME.index("district", "Haidian")] == 2
    assert not t.zone_targets("Z2").any()
    assert not tables[NONCOMMUTER].targets.any()
    t.check()
    one = build_constraints([_person("c", "M", 50)], commuter_split=False)
    assert set(one) == {ALL}
    assert one[ALL].zone_targets("Z1")[SCHEME.index("age", "50+")] == 1


def test_constraints_round_trip(tmp_path):
    t = build_constraints([_person("a", "F", 20), _person("b", "M", 35, zone="Z2")])[COMMUTER]
    write_constraints(t, tmp_path / "c.csv")
    back = load_constraints(tmp_path / "c.csv")
    assert back.zones == t.zones and np.array_equal(back.targets, t.targets)


def _cand(i, gender, age, district="Haidian", commuter=True):
    return Candidate(f"p{i}", gender, age, district, "Z1", commuter)


def _cells(cands):
    return np.array([SCHEME.person_cells(c.gender, c.age, c.home_district) for c in cands])


def _targets_from(cands, picks):
    t = np.zeros(SCHEME.n_cells, dtype=np.int64)
    for i in picks:
        t[list(SCHEME.person_cells(cands[i].gender, cands[i].age, cands[i].home_district))] += 1
    return t


def test_anneal_examples():
    pool = [_cand(0, "F", 20), _cand(1, "M", 60, "Chaoyang"), _cand(2, "F", 45)]
    t = _targets_from(pool, [0, 1, 1, 2])
    res = anneal_zone(_cells(pool), t, AnnealSchedule(), 1, zone_population=4)
    assert res.tae == 0 and sorted(res.members) == [0, 1, 1, 2]

    empty = anneal_zone(_cells(pool), np.zeros(SCHEME.n_cells, int), AnnealSchedule(), 1, zone_population=0)
    assert empty.members == [] and empty.tae == 0

    solo = [_cand(0, "M", 30)]
    res = anneal_zone(_cells(solo), _targets_from(solo, [0, 0, 0]), AnnealSchedule(), 1, zone_population=3)
    assert res.members == [0, 0, 0] and res.tae == 0


def test_anneal_trace_nonincreasing():
    rng = np.random.default_rng(0)
    pool = [_cand(i, rng.choice(["F", "M"]), int(rng.integers(15, 80)), rng.choice(DISTRICTS)) for i in range(40)]
    picks = rng.integers(0, 40, 25)
    t = _targets_from(pool, picks)
    t[SCHEME.index("district", "Haidian")] += 3  # make it infeasible so the trace is long
    res = anneal_zone(_cells(pool), t, AnnealSchedule(max_steps=3000), 7, zone_population=25)
    assert np.all(np.diff(res.best_trace) <= 0)
    assert res.best_trace[-1] == res.tae and len(res.members) == 25
    assert res.steps == 3000


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_anneal_reaches_bruteforce_optimum_on_tiny_cases(seed):
    r = random.Random(seed)
    pool = [_cand(i, r.choice("FM"), r.choice([20, 25, 30, 60]), r.choice(DISTRICTS[:3])) for i in range(4)]
    pop = r.randint(1, 3)
    t = np.zeros(SCHEME.n_cells, dtype=np.int64)
    for _ in range(pop):  # possibly infeasible targets drawn independently per tabulation
        t[SCHEME.index("district", r.choice(DISTRICTS[:3]))] += 1
        g, a = r.choice("FM"), r.choice(["15-24", "29-30", "50+"])
        t[SCHEME.index("age", a)] += 1
        t[SCHEME.index("gender", g)] += 1
        t[SCHEME.index("age_by_gender", f"{a}-{g}")] += 1
    cells = _cells(pool)
    res = anneal_zone(cells, t, AnnealSchedule(max_steps=4000), seed, zone_population=pop)
    assert res.tae == oracles.min_tae_bruteforce([tuple(c) for c in cells], list(t), pop)


def _instance(seed, n_zones=3, n_pool=60):
    rng = np.random.default_rng(seed)
    pool = [Candidate(f"p{i:03d}", str(rng.choice(["F", "M"])), int(rng.integers(15, 75)),
                      str(rng.choice(DISTRICTS)), "Zx", bool(rng.random() < 0.6)) for i in range(n_pool)]
    persons = []
    for z in range(n_zones):
        for k in range(int(rng.integers(0, 30))):
            c = pool[int(rng.integers(n_pool))]
            persons.append(SurveyPerson(f"s{z}-{k}", c.gender, c.age, f"Z{z}", c.home_district, c.commuter))
    return pool, build_constraints(persons, zones=[f"Z{z}" for z in range(n_zones)])


def test_synthesize_satisfiable_and_invariants(tmp_path):
    pool, cons = _instance(3)
    pop = synthesize(pool, cons, SynthConfig(rng_seed=5, noncommuter_pool="stratum"))
    assert pop.tae == 0 and tae(pop) == 0
    assert all(cpe == 0 for *_, cpe in pop.fit_report())
    combos = {(c.gender, c.age, c.home_district) for c in pool}
    for z in pop.zones:
        table = cons[z.stratum]
        assert len(z.members) == table.zone_population(z.zone_id)
        assert all((c.gender, c.age, c.home_district) in combos for c in z.members)
        assert all(c.commuter == (z.stratum == COMMUTER) for c in z.members)
    for s, table in cons.items():
        assert np.array_equal(tabulate(pop, s), table.targets)
    write_population(pop, tmp_path / "a.csv")
    write_fit_report(pop, tmp_path / "f.csv")
    rows = load_population(tmp_path / "a.csv")
    assert len(rows) == sum(len(z.members) for z in pop.zones)
    assert (tmp_path / "f.csv").read_text().splitlines()[1] == "commuter,District,0,0.0"


def test_synthesize_deterministic_and_parallel_equal(tmp_path):
    pool, cons = _instance(8, n_zones=4)
    a = synthesize(pool, cons, SynthConfig(rng_seed=1))
    b = synthesize(pool, cons, SynthConfig(rng_seed=1, workers=3))
    write_population(a, tmp_path / "a.csv")
    write_population(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_shuffled_pool_same_tae():
    pool, cons = _instance(11)
    shuffled = pool[:]
    random.Random(0).shuffle(shuffled)
    a = synthesize(pool, cons, SynthConfig(rng_seed=2))
    b = synthesize(shuffled, cons, SynthConfig(rng_seed=2))
    assert a.tae == b.tae == 0


def test_tae_arithmetic():
    pool = [_cand(0, "F", 20), _cand(1, "M", 20)]
    persons = [_person("s", "F", 20)]
    cons = build_constraints(persons, commuter_split=False)
    pop = synthesize(pool[1:], cons, SynthConfig(rng_seed=0))
    # wrong gender: 2 in gender, 2 in age_by_gender
    rows = {t: v for s, t, v, _ in pop.fit_report()}
    assert rows == {"district": 0, "age": 0, "gender": 2, "age_by_gender": 2}
    assert tae(pop) == 4
    doubled = build_constraints(persons * 2, commuter_split=False)
    assert tae(synthesize(pool[1:], doubled, SynthConfig(rng_seed=0))) == 8


def test_noncommuter_pool_fallback():
    pool = [_cand(0, "F", 20), _cand(1, "M", 60, commuter=False)]
    cons = build_constraints([_person("s", "F", 20, commuter=False)])
    assert synthesize(pool, cons, SynthConfig(rng_seed=0)).tae == 0  # auto widens: stratum lacks the cells
    assert synthesize(pool, cons, SynthConfig(rng_seed=0, noncommuter_pool="stratum")).tae > 0
    with pytest.raises(ValueError):
        SynthConfig(rng_seed=0, noncommuter_pool="some")


def test_scheme_mismatch():
    cons = build_constraints([_person("s", "F", 20)])
    other = build_constraints([_person("s", "F", 20)], scheme=CategoryScheme(districts=("Haidian",)))
    mixed = {COMMUTER: cons[COMMUTER], NONCOMMUTER: other[NONCOMMUTER]}
    with pytest.raises(SchemeMismatch):
        synthesize([_cand(0, "F", 20)], mixed, SynthConfig(rng_seed=0))


def test_zone_seed_stable():
    assert zone_seed(1, "commuter", "Z1") == zone_seed(1, "commuter", "Z1")
    assert zone_seed(1, "commuter", "Z1") != zone_seed(1, "noncommuter", "Z1")
    assert zone_seed(0, "all", "Z") == 9688830141901291496


def test_candidates_from_places():
    reg = ZoneRegistry([Zone("Z1", "Haidian", GeoPoint(40.0, 116.0)), Zone("Z2", "Nowhere", GeoPoint(41.0, 116.0))])
    places = {
        "a": PersonPlaces("a", home=GeoPoint(40.0, 116.0), work=GeoPoint(40.1, 116.0)),
        "b": PersonPlaces("b", home=GeoPoint(40.0, 116.0)),
        "c": PersonPlaces("c", home=GeoPoint(41.0, 116.0)),
        "d": PersonPlaces("d", work=GeoPoint(40.0, 116.0)),
        "e": PersonPlaces("e", home=GeoPoint(40.0, 116.0)),
    }
    profiles = {"a": UserProfile("a", "F", 22), "b": UserProfile("b", "M", 31), "c": UserProfile("c", "M", 31),
                "d": UserProfile("d", "M", 31), "e": UserProfile("e", None, 40)}
    cands = candidates_from_places(places, profiles, reg)
    assert [(c.person_id, c.commuter, c.home_zone) for c in cands] == [("a", True, "Z1"), ("b", False, "Z1")]


def test_attach_mobility_examples():
    home, work = GeoPoint(40.0, 116.0), GeoPoint(40.0 + 4.2 / 111.19492664455873, 116.0)
    places = {"p": PersonPlaces("p", home=home, work=work), "q": PersonPlaces("q", home=home)}
    cons = build_constraints([_person(f"s{i}", "F", 20) for i in range(3)], commuter_split=False)
    pop = synthesize([Candidate("p", "F", 20, "Haidian", "Z1", True)], cons, SynthConfig(rng_seed=0))
    enriched = attach_mobility(pop.clones(), places)
    assert len(enriched) == 3 and len({e.clone_id for e in enriched}) == 3
    assert all(e.places is places["p"] for e in enriched)
    assert enriched[0].commute_km() == pytest.approx(4.2, abs=1e-9)
    noncomm = build_constraints([_person("s", "F", 20)], commuter_split=False)
    pop = synthesize([Candidate("q", "F", 20, "Haidian", "Z1", False)], noncomm, SynthConfig(rng_seed=0))
    assert attach_mobility(pop.clones(), places)[0].commute_km() is None
    with pytest.raises(DanglingPersonId):
        attach_mobility(pop.clones(), {})


# --- Kruskal-Wallis ---------------------------------------------------------

def test_kruskal_examples():
    h, p = kruskal_wallis([1, 2, 3], [10, 11, 12])
    assert h == pytest.approx(27 / 7, abs=1e-12)
    assert round(h, 3) == 3.857
    rng = np.random.default_rng(0)
    g = rng.normal(size=500)
    h0, p0 = kruskal_wallis(g, g.copy())
    assert h0 == pytest.approx(0.0, abs=1e-9) and p0 > 0.9
    with pytest.raises(DegenerateGroups):
        kruskal_wallis([1, 2, 3])


def test_average_ranks():
    assert list(average_ranks(np.array([3.0, 1.0, 3.0, 2.0]))) == [3.5, 1.0, 3.5, 2.0]


groups_st = st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=2, max_size=4)


@settings(max_examples=100)
@given(groups_st)
def test_kruskal_matches_oracles(groups):
    values = [v for g in groups for v in g]
    if len(set(values)) < 2:
        return
    h, p = kruskal_wallis(*groups)
    assert h == pytest.approx(oracles.kruskal_h(groups), rel=1e-9, abs=1e-9)
    ref = sps.kruskal(*groups)
    assert h == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-12)


def test_screening_on_survey():
    reg = ZoneRegistry([Zone(f"Z{i}", "Haidian" if i < 2 else "Chaoyang", GeoPoint(40.0 + 0.01 * i, 116.0))
                        for i in range(4)])
    persons, trips = [], []
    from datetime import datetime
    t0 = datetime(2012, 3, 1, 8)
    for i in range(40):
        young = i % 2 == 0
        p = SurveyPerson(f"p{i}", "F" if i % 4 < 2 else "M", 20 if young else 55, "Z0", "Haidian", True)
        persons.append(p)
        trips.append(SurveyTrip(p.person_id, Purpose.WORK, "Z1" if young else "Z3", t0, t0))
    persons.append(SurveyPerson("idle", "F", 30, "Z0", "Haidian", False))
    assert len(survey_commutes(persons, trips, reg)) == 40
    res = screen_attributes(persons, trips, reg, attrs=("age", "gender"))
    assert res["age"].p_value < 1e-6 and res["gender"].p_value > 0.5
    assert res["age"].group_sizes == {"15-24": 20, "50+": 20}
    with pytest.raises(DegenerateGroups):
        screen_attributes(persons, trips, reg, attrs=("district",))
