"""Command line entry point: ``mobiscape <stage> [flags]``.

Stages talk to each other only through the files they read and write. Every
option can also come from a ``key=value`` config file passed with
``--config``; explicit flags win over the file, the file wins over defaults.
Randomized stages (gen, calibrate, synthesize) refuse to run without a seed.

Exit status is 0 on success, 1 for a runtime failure (one JSON line on
stderr) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import calibration, ground_truth, ingest, location, metrics, popsynth, synthcity
from .errors import MobiscapeError, NoCommuters, ZeroVector
from .fileio import fmt_float, write_rows
from .geo import ZoneRegistry, assign_zone, load_zones

log = logging.getLogger("mobiscape")

METRICS_HEADER = ["metric", "activity", "value"]
HISTOGRAM_HEADER = ["bin_lo_km", "fraction_c", "fraction_s"]
SCREENING_HEADER = ["attribute", "h", "p_value", "df", "n"]

SEEDED = ("gen", "calibrate", "synthesize")


def thread_cap() -> int:
    """Worker processes for a stage: ``MOBISCAPE_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("MOBISCAPE_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MOBISCAPE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MOBISCAPE_THREADS must be at least 1")
    return n


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bias(text: str) -> tuple[float, ...] | None:
    if text == "none":
        return None
    if text == "young":
        return synthcity.YOUNG_BIAS
    return tuple(_float_list(text))


# --- stages --------------------------------------------------------------

def cmd_gen(args) -> None:
    cfg = synthcity.CityConfig(
        rng_seed=args.seed, n_zones=args.n_zones, n_users=args.n_users, days_span=args.days_span,
        survey_size=args.survey_size, noise_venue_rate=args.noise_venue_rate,
        gps_jitter_m=args.gps_jitter_m, bias_spec=args.bias,
    )
    city = synthcity.generate(cfg)
    paths = synthcity.write_city(city, args.out)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def _active_checkins(args) -> list[ingest.CheckIn]:
    mapping = ingest.load_poi_mapping(args.poi_mapping) if args.poi_mapping else None
    records = ingest.load_checkins(args.checkins, poi_mapping=mapping)
    return ingest.filter_active_users(records, args.min_checkins)


def cmd_ground_truth(args) -> None:
    kw = ground_truth.KeywordConfig.load(args.keywords) if args.keywords else ground_truth.KeywordConfig.default()
    truth = ground_truth.build_ground_truth(_active_checkins(args), kw)
    ground_truth.write_ground_truth(truth, args.out)
    roles = Counter(lp.role for lp in truth)
    log.info("labeled %d homes and %d works", roles[ground_truth.HOME], roles[ground_truth.WORK])


def cmd_calibrate(args) -> None:
    truth = ground_truth.load_ground_truth(args.truth)
    bounds = calibration.ParamBounds()
    cfg = calibration.CrsConfig(p=args.crs_points, n_iter=args.crs_iterations, rng_seed=args.seed)
    reports = calibration.sweep_radius(args.radii, _active_checkins(args), truth, bounds, cfg,
                                       workers=thread_cap())
    calibration.write_report(reports, args.report)
    chosen = calibration.select_report(reports, args.radius)
    calibration.write_params(chosen.top200_mean, args.params)
    log.info("adopted r=%s with f=%.6g", chosen.radius, chosen.f)


def cmd_identify(args) -> None:
    params = calibration.load_params(args.params)
    registry = load_zones(args.zones)
    places = location.identify_all(_active_checkins(args), params)
    location.write_places(places, registry, args.places)
    location.write_noncommute(places, args.noncommute)
    log.info("identified places for %d users", len(places))


def cmd_synthesize(args) -> None:
    registry = load_zones(args.zones)
    persons, trips = ingest.load_survey(args.survey_persons, args.survey_trips, zone_ids=registry.zone_ids)
    profiles = ingest.load_profiles(args.profiles)
    places = location.load_places(args.places)
    scheme = popsynth.CategoryScheme()
    out = Path(args.out)

    screening = popsynth.screen_attributes(persons, trips, registry, scheme=scheme)
    write_rows(out / "screening.csv", SCREENING_HEADER, (
        [attr, fmt_float(r.h), fmt_float(r.p_value), str(r.df), str(sum(r.group_sizes.values()))]
        for attr, r in screening.items()
    ))

    constraints = popsynth.build_constraints(persons, scheme, commuter_split=not args.no_commuter_split,
                                             zones=registry.zone_ids)
    for stratum, table in constraints.items():
        popsynth.write_constraints(table, out / f"constraints_{stratum}.csv")

    candidates = popsynth.candidates_from_places(places, profiles, registry, scheme)
    schedule = popsynth.AnnealSchedule(alpha=args.alpha, max_steps=args.max_steps)
    cfg = popsynth.SynthConfig(rng_seed=args.seed, schedule=schedule, workers=thread_cap(),
                               noncommuter_pool=args.noncommuter_pool)
    population = popsynth.synthesize(candidates, constraints, cfg)
    popsynth.attach_mobility(population.clones(), places)  # fails fast on dangling ids
    popsynth.write_population(population, out / "population.csv")
    popsynth.write_fit_report(population, out / "fit_report.csv")
    log.info("%d clones from %d candidates, TAE %d", sum(len(z.members) for z in population.zones),
             len(candidates), population.tae)


def _survey_counts(persons, trips) -> dict[str, Counter]:
    counts = {a: Counter() for a in ("home", "work", "entertainment", "other")}
    for p in persons:
        counts["home"][p.home_zone] += 1
    seen_work = set()
    for t in trips:
        if t.purpose is ingest.Purpose.WORK:
            if t.person_id not in seen_work:
                seen_work.add(t.person_id)
                counts["work"][t.dest_zone] += 1
        elif t.purpose is ingest.Purpose.ENTERTAINMENT:
            counts["entertainment"][t.dest_zone] += 1
        elif t.purpose is ingest.Purpose.OTHER:
            counts["other"][t.dest_zone] += 1
    return counts


def _checkin_counts(members, registry: ZoneRegistry) -> dict[str, Counter]:
    """Zone counts per activity; one unit per anchor, days-weighted for venues."""
    counts = {a: Counter() for a in ("home", "work", "entertainment", "other")}
    zone_of: dict[tuple[float, float], str] = {}

    def zone(pt):
        key = (pt.lat, pt.lon)
        if key not in zone_of:
            zone_of[key] = assign_zone(pt, registry)
        return zone_of[key]

    for p in members:
        if p.home is not None:
            counts["home"][zone(p.home)] += 1
        if p.work is not None:
            counts["work"][zone(p.work)] += 1
        for label, venues in (("entertainment", p.entertainment), ("other", p.other)):
            for v in venues:
                counts[label][zone(v.location)] += v.days
    return counts


def cmd_validate(args) -> None:
    registry = load_zones(args.zones)
    persons, trips = ingest.load_survey(args.survey_persons, args.survey_trips, zone_ids=registry.zone_ids)
    places = location.load_places(args.places, args.noncommute)
    if args.population:
        rows = popsynth.load_population(args.population)
        members = [e.places for e in popsynth.attach_mobility(rows, places)]
    else:
        members = [places[u] for u in sorted(places)]

    c_counts = _checkin_counts(members, registry)
    s_counts = _survey_counts(persons, trips)
    zones = registry.zone_ids
    rows = []
    for activity in ("home", "work", "entertainment", "other"):
        c, s = c_counts[activity], s_counts[activity]
        try:
            cs = metrics.cosine_similarity(metrics.ZoneDistribution.from_counts(c, zones),
                                           metrics.ZoneDistribution.from_counts(s, zones))
        except ZeroVector:
            log.warning("no %s observations on one side; skipping", activity)
            continue
        rows.append(["CS", activity, fmt_float(cs)])
        rows.append(["DC_km", activity, fmt_float(metrics.gravity_distance(c, s, registry))])

    hist_s = metrics.DistanceHistogram.from_distances(popsynth.survey_commutes(persons, trips, registry).values())
    try:
        hist_c = metrics.commute_histogram(members)
    except NoCommuters:
        log.warning("check-in side has no commuters; CR skipped")
    else:
        rows.append(["CR", "commute", fmt_float(metrics.coincidence_ratio(hist_c, hist_s))])
        if args.histogram:
            write_rows(args.histogram, HISTOGRAM_HEADER, (
                [fmt_float(lo), fmt_float(fc), fmt_float(fs)]
                for lo, fc, fs in zip(hist_c.bin_edges_lo(), hist_c.fractions, hist_s.fractions)
            ))
    write_rows(args.metrics, METRICS_HEADER, rows)


# --- argument parsing ----------------------------------------------------

def _checkin_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkins", required=True, help="check-in CSV")
    p.add_argument("--poi-mapping", default=None, help="raw,category CSV mapping POI labels")
    p.add_argument("--min-checkins", type=int, default=15, help="activity filter threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobiscape", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="stage", metavar="stage", required=True)

    def stage(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key=value file with defaults for this stage")
        p.set_defaults(func=func)
        if name in SEEDED:
            p.add_argument("--seed", type=int, default=None, help="master random seed (required)")
        return p

    p = stage("gen", cmd_gen, "Generate a synthetic city with planted homes and works.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-zones", type=int, default=100)
    p.add_argument("--n-users", type=int, default=500)
    p.add_argument("--days-span", type=int, default=120)
    p.add_argument("--survey-size", type=int, default=2000)
    p.add_argument("--noise-venue-rate", type=float, default=0.3)
    p.add_argument("--gps-jitter-m", type=float, default=15.0)
    p.add_argument("--bias", type=_bias, default=None,
                   help="age-band weights for check-in users: none, young, or 8 comma-separated numbers")

    p = stage("ground-truth", cmd_ground_truth, "Label homes and works from POI days and keywords.")
    _checkin_flags(p)
    p.add_argument("--keywords", default=None, help="role,keyword CSV (default: bundled list)")
    p.add_argument("--out", required=True, help="labeled places CSV")

    p = stage("calibrate", cmd_calibrate, "Fit a, b, k1, k2 per radius by controlled random search.")
    _checkin_flags(p)
    p.add_argument("--truth", required=True, help="labeled places CSV from ground-truth")
    p.add_argument("--radii", type=_float_list, default=list(calibration.DEFAULT_RADII))
    p.add_argument("--radius", type=float, default=None, help="adopt this radius instead of the lowest f")
    p.add_argument("--crs-points", type=int, default=200)
    p.add_argument("--crs-iterations", type=int, default=20000)
    p.add_argument("--report", required=True, help="per-radius report CSV")
    p.add_argument("--params", required=True, help="adopted parameters JSON")

    p = stage("identify", cmd_identify, "Identify home, work and non-commute places for every user.")
    _checkin_flags(p)
    p.add_argument("--params", required=True, help="parameters JSON from calibrate")
    p.add_argument("--zones", required=True)
    p.add_argument("--places", required=True, help="home/work output CSV")
    p.add_argument("--noncommute", required=True, help="labeled non-commute venues output CSV")

    p = stage("synthesize", cmd_synthesize, "Rebuild the population to match survey tabulations.")
    p.add_argument("--zones", required=True)
    p.add_argument("--survey-persons", required=True)
    p.add_argument("--survey-trips", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--places", required=True, help="home/work CSV from identify")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=0.999, help="cooling factor per step")
    p.add_argument("--max-steps", type=int, default=50_000, help="annealing budget per zone")
    p.add_argument("--no-commuter-split", action="store_true", help="one stratum instead of two")
    p.add_argument("--noncommuter-pool", choices=("auto", "stratum", "all"), default="auto")

    p = stage("validate", cmd_validate, "Compare identified places with the survey (CS, DC, CR).")
    p.add_argument("--zones", required=True)
    p.add_argument("--survey-persons", required=True)
    p.add_argument("--survey-trips", required=True)
    p.add_argument("--places", required=True)
    p.add_argument("--noncommute", required=True)
    p.add_argument("--population", default=None, help="population CSV; compare clones instead of raw users")
    p.add_argument("--metrics", required=True, help="metric,activity,value CSV")
    p.add_argument("--histogram", default=None, help="commute histogram CSV")
    return parser


def read_config(path: str) -> dict[str, str]:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _peek(argv: list[str]) -> tuple[str | None, str | None]:
    """Stage name and ``--config`` value, found without a full parse."""
    stage = config = None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif stage is None and not tok.startswith("-"):
            stage = tok
    return stage, config


def _stage_parsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _install_config(sub: argparse.ArgumentParser, stage: str, path: str) -> None:
    """Make config values the stage defaults; explicit flags still override them."""
    values = read_config(path)
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"config keys not understood by {stage}: {', '.join(unknown)}")
    for dest, raw in values.items():
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            flag = raw.lower()
            if flag not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {dest} expects a boolean")
            action.default = flag in ("true", "1", "yes")
        else:
            action.default = raw  # argparse applies ``type`` to string defaults
        action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    stage, config = _peek(argv)
    subs = _stage_parsers(parser)
    try:
        if config is not None and stage in subs:
            _install_config(subs[stage], stage, config)
        args = parser.parse_args(argv)
        if args.stage in SEEDED and args.seed is None:
            raise UsageError(f"{args.stage} requires --seed")
        thread_cap()  # reject a bad MOBISCAPE_THREADS before any work
    except UsageError as exc:
        subs.get(stage, parser).error(str(exc))

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (MobiscapeError, OSError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": code, "stage": args.stage, "message": msg}, ensure_ascii=False),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
