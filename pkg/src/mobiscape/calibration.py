"""Calibration of the identification thresholds by Controlled Random Search.

The objective mixes accuracy and coverage: for the M identified homes and N
identified works among labeled users,

    f = 1/2 * ( sum(d_h / max d_h) / M**2 + sum(d_w / max d_w) / N**2 )

with distances in km between identified and labeled locations.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InfeasibleBounds
from .fileio import atomic_write, fmt_float, write_rows
from .geo import haversine_km
from .ground_truth import HOME, WORK, LabeledPlace, truth_by_user
from .ingest import CheckIn, group_by_user
from .location import (
    IdentParams,
    PersonPlaces,
    build_clusters,
    home_rank_key,
    identify_user,
    work_rank_key,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("a", "b", "k1", "k2")
DEFAULT_RADII = (20.0, 50.0, 70.0, 100.0, 200.0, 300.0, 500.0)
QUANTILES = (25.0, 50.0, 75.0, 97.5)
REPORT_HEADER = ["radius", "a", "b", "k1", "k2", "f", "home_p50_km", "work_p50_km", "home_cov", "work_cov"]


@dataclass(frozen=True)
class ParamBounds:
    a: tuple[float, float] = (0.0, 1.0)
    b: tuple[float, float] = (0.0, 1.0)
    k1: tuple[float, float] = (0.0, 1.0)
    k2: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not (0.0 <= lo and hi <= 1.0):
                raise ValueError(f"bounds for {name} must lie within [0, 1]")

    def as_list(self) -> list[tuple[float, float]]:
        return [getattr(self, n) for n in PARAM_NAMES]


@dataclass(frozen=True)
class CrsConfig:
    p: int = 200
    n_iter: int = 20_000
    m: int = 4
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.p <= self.m + 1:
            raise ValueError("storage size p must exceed m + 1")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")
        if self.m < 1:
            raise ValueError("m must be at least 1")


@dataclass
class CrsResult:
    best_point: np.ndarray
    best_f: float
    top_mean: np.ndarray
    points: np.ndarray
    values: np.ndarray
    n_evals: int
    n_rejected: int
    f_min_trace: np.ndarray
    f_max_trace: np.ndarray


def crs_minimize(func: Callable[[np.ndarray], float], bounds, cfg: CrsConfig, top: int = 200) -> CrsResult:
    """Minimise ``func`` over a box with Controlled Random Search.

    ``bounds`` is a :class:`ParamBounds` or a sequence of ``(lo, hi)`` pairs.
    Each iteration draws ``m + 1`` distinct stored points, reflects one of them
    (chosen uniformly) through the centroid of the others, and replaces the
    worst stored point when the reflection improves on it. Reflections leaving
    the box are discarded; they still consume an iteration.
    """
    pairs = bounds.as_list() if isinstance(bounds, ParamBounds) else list(bounds)
    lo = np.array([float(p[0]) for p in pairs])
    hi = np.array([float(p[1]) for p in pairs])
    if np.any(lo > hi):
        bad = [i for i in range(len(lo)) if lo[i] > hi[i]]
        raise InfeasibleBounds(f"empty interval for dimension(s) {bad}")
    dim = len(lo)
    if cfg.m + 1 > cfg.p:
        raise ValueError("subset size exceeds storage")

    rng = np.random.default_rng(cfg.rng_seed)
    pts = lo + (hi - lo) * rng.random((cfg.p, dim))
    vals = np.array([float(func(x)) for x in pts])
    n_evals = cfg.p
    n_rejected = 0
    worst = int(np.argmax(vals))
    best = int(np.argmin(vals))
    f_min_trace = np.empty(cfg.n_iter)
    f_max_trace = np.empty(cfg.n_iter)

    for it in range(cfg.n_iter):
        subset = rng.choice(cfg.p, size=cfg.m + 1, replace=False)
        k = int(rng.integers(cfg.m + 1))
        refl = subset[k]
        others = np.delete(subset, k)
        trial = 2.0 * pts[others].mean(axis=0) - pts[refl]
        if np.any(trial < lo) or np.any(trial > hi):
            n_rejected += 1
        else:
            f_trial = float(func(trial))
            n_evals += 1
            if f_trial < vals[worst]:
                pts[worst] = trial
                vals[worst] = f_trial
                if f_trial < vals[best]:
                    best = worst
                worst = int(np.argmax(vals))
        f_min_trace[it] = vals[best]
        f_max_trace[it] = vals[worst]

    order = np.argsort(vals, kind="stable")
    top_mean = pts[order[: min(top, cfg.p)]].mean(axis=0)
    return CrsResult(
        best_point=pts[best].copy(),
        best_f=float(vals[best]),
        top_mean=top_mean,
        points=pts,
        values=vals,
        n_evals=n_evals,
        n_rejected=n_rejected,
        f_min_trace=f_min_trace,
        f_max_trace=f_max_trace,
    )


# --- objective -----------------------------------------------------------

def _role_term(errors: Sequence[float]) -> float:
    n = len(errors)
    if n == 0:
        return 1.0
    d_max = max(errors)
    if d_max == 0:
        return 0.0
    return sum(e / d_max for e in errors) / (n * n)


def objective_from_errors(home_errors: Sequence[float], work_errors: Sequence[float]) -> float:
    """Combine per-user distance errors (km) into the calibration objective.

    An empty role contributes 1 (nobody identified); a role whose errors are
    all zero contributes 0.
    """
    return 0.5 * (_role_term(home_errors) + _role_term(work_errors))


def match_errors(identified: Mapping[str, PersonPlaces], truth: Iterable[LabeledPlace]) -> dict[str, list[float]]:
    """Distance errors of identified vs labeled places, in truth order."""
    out: dict[str, list[float]] = {HOME: [], WORK: []}
    for lp in truth:
        p = identified.get(lp.user_id)
        if p is None:
            continue
        pt = p.home if lp.role == HOME else p.work
        if pt is not None:
            out[lp.role].append(haversine_km(pt, lp.location))
    return out


def identify_labeled(params: IdentParams, truth: Sequence[LabeledPlace],
                     records: Iterable[CheckIn]) -> dict[str, PersonPlaces]:
    users = {lp.user_id for lp in truth}
    by_user = group_by_user(r for r in records if r.user_id in users)
    out = {}
    for u in sorted(by_user):
        p = identify_user(u, by_user[u], params)
        if p is not None:
            out[u] = p
    return out


def objective(params: IdentParams, truth: Sequence[LabeledPlace], records: Iterable[CheckIn]) -> float:
    """Reference objective: full identification of every labeled user."""
    errs = match_errors(identify_labeled(params, truth, records), truth)
    return objective_from_errors(errs[HOME], errs[WORK])


class CalibrationProblem:
    """Fast objective for a fixed radius.

    Clusters depend only on ``r``, so they are built once. The winning home
    and work cluster for any thresholds is then the first eligible cluster in
    a precomputed per-user ranking, which vectorises across users.
    """

    def __init__(self, records_by_user: Mapping[str, Sequence[CheckIn]],
                 truth: Sequence[LabeledPlace], r: float):
        self.r = r
        labels = truth_by_user(truth)
        self.users = sorted(u for u in labels if u in records_by_user)
        cd, ts, hp, wp, dh, dw = [], [], [], [], [], []
        home_order, work_order, offsets = [], [], []
        self._home_labeled, self._work_labeled = [], []
        base = 0
        for ui, u in enumerate(self.users):
            clusters, total_days = build_clusters(records_by_user[u], r)
            lab = labels[u]
            for c in clusters:
                cd.append(c.cluster_days / total_days)
                ts.append(c.timespan / total_days)
                hp.append(c.home_pct)
                wp.append(c.work_pct)
                dh.append(haversine_km(c.centroid, lab[HOME].location) if HOME in lab else math.nan)
                dw.append(haversine_km(c.centroid, lab[WORK].location) if WORK in lab else math.nan)
            idx = list(range(len(clusters)))
            offsets.append(len(home_order))
            home_order += [base + i for i in sorted(idx, key=lambda i: home_rank_key(clusters[i]))]
            work_order += [base + i for i in sorted(idx, key=lambda i: work_rank_key(clusters[i]))]
            if HOME in lab:
                self._home_labeled.append(ui)
            if WORK in lab:
                self._work_labeled.append(ui)
            base += len(clusters)
        self.n_clusters = base
        self.cd = np.array(cd)
        self.ts = np.array(ts)
        self.home_pct = np.array(hp)
        self.work_pct = np.array(wp)
        self.dist_home = np.array(dh)
        self.dist_work = np.array(dw)
        self.home_order = np.array(home_order, dtype=np.int64)
        self.work_order = np.array(work_order, dtype=np.int64)
        self.offsets = np.array(offsets, dtype=np.int64)
        self.home_labeled = np.array(self._home_labeled, dtype=np.int64)
        self.work_labeled = np.array(self._work_labeled, dtype=np.int64)
        self._pos = np.arange(self.n_clusters)

    def _first(self, order: np.ndarray, mask: np.ndarray) -> np.ndarray:
        pos = np.where(mask[order], self._pos, self.n_clusters)
        first = np.minimum.reduceat(pos, self.offsets)
        hit = first < self.n_clusters
        out = np.full(len(self.users), -1, dtype=np.int64)
        out[hit] = order[first[hit]]
        return out

    def select(self, a: float, b: float, k1: float, k2: float) -> tuple[np.ndarray, np.ndarray]:
        """Global cluster index of each user's home and work (-1 when absent)."""
        if not self.users:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty
        important = (self.cd >= a) & (self.ts >= b)
        home = self._first(self.home_order, important)
        ok = home >= 0
        ok[ok] = self.home_pct[home[ok]] >= k1
        home[~ok] = -1
        eligible = important.copy()
        eligible[home[home >= 0]] = False
        work = self._first(self.work_order, eligible)
        ok = work >= 0
        ok[ok] = self.work_pct[work[ok]] >= k2
        work[~ok] = -1
        return home, work

    def errors(self, a: float, b: float, k1: float, k2: float) -> tuple[np.ndarray, np.ndarray]:
        home, work = self.select(a, b, k1, k2)
        if not self.users:
            return np.empty(0), np.empty(0)
        h = home[self.home_labeled]
        w = work[self.work_labeled]
        return self.dist_home[h[h >= 0]], self.dist_work[w[w >= 0]]

    def __call__(self, theta) -> float:
        eh, ew = self.errors(*(float(t) for t in theta))
        return 0.5 * (_array_term(eh) + _array_term(ew))


def _array_term(errors: np.ndarray) -> float:
    n = errors.size
    if n == 0:
        return 1.0
    d_max = errors.max()
    if d_max == 0:
        return 0.0
    return float((errors / d_max).sum() / (n * n))


# --- reporting -----------------------------------------------------------

@dataclass(frozen=True)
class ErrorSummary:
    quantiles: dict[float, float]
    mean: float
    std: float
    coverage: float
    n_matched: int
    n_labeled: int


def summarize_errors(errors: Sequence[float], n_labeled: int) -> ErrorSummary:
    arr = np.sort(np.asarray(errors, dtype=float))
    if arr.size:
        qs = {q: float(np.percentile(arr, q)) for q in QUANTILES}
        mean, std = float(arr.mean()), float(arr.std())
    else:
        qs = {q: math.nan for q in QUANTILES}
        mean = std = math.nan
    cov = arr.size / n_labeled if n_labeled else 0.0
    return ErrorSummary(qs, mean, std, cov, int(arr.size), n_labeled)


def error_quantiles(identified: Mapping[str, PersonPlaces], truth: Sequence[LabeledPlace]) -> dict[str, ErrorSummary]:
    """Per-role error percentiles (linear interpolation) and coverage."""
    errs = match_errors(identified, truth)
    n_lab = {HOME: 0, WORK: 0}
    for lp in truth:
        n_lab[lp.role] += 1
    return {role: summarize_errors(errs[role], n_lab[role]) for role in (HOME, WORK)}


@dataclass
class CalibrationReport:
    radius: float
    best_params: IdentParams
    best_f: float
    top200_mean: IdentParams
    f: float  # objective at top200_mean, the adopted estimate
    home: ErrorSummary
    work: ErrorSummary
    crs: CrsResult | None = field(default=None, repr=False)

    @property
    def coverage_home(self) -> float:
        return self.home.coverage

    @property
    def coverage_work(self) -> float:
        return self.work.coverage

    def csv_row(self) -> list[str]:
        p = self.top200_mean
        return [fmt_float(self.radius), fmt_float(p.a), fmt_float(p.b), fmt_float(p.k1), fmt_float(p.k2),
                fmt_float(self.f), fmt_float(self.home.quantiles[50.0]), fmt_float(self.work.quantiles[50.0]),
                fmt_float(self.home.coverage), fmt_float(self.work.coverage)]


def _params(r: float, theta) -> IdentParams:
    a, b, k1, k2 = (min(1.0, max(0.0, float(t))) for t in theta)
    return IdentParams(r=r, a=a, b=b, k1=k1, k2=k2)


def radius_seed(seed: int, r: float) -> list[int]:
    return [int(seed), int(round(r * 1000))]


def calibrate_radius(records_by_user: Mapping[str, Sequence[CheckIn]], truth: Sequence[LabeledPlace], r: float,
                     bounds: ParamBounds, cfg: CrsConfig) -> CalibrationReport:
    problem = CalibrationProblem(records_by_user, truth, r)
    res = crs_minimize(problem, bounds, cfg)
    adopted = _params(r, res.top_mean)
    eh, ew = problem.errors(adopted.a, adopted.b, adopted.k1, adopted.k2)
    n_home = len(problem.home_labeled)
    n_work = len(problem.work_labeled)
    return CalibrationReport(
        radius=r,
        best_params=_params(r, res.best_point),
        best_f=res.best_f,
        top200_mean=adopted,
        f=problem(res.top_mean),
        home=summarize_errors(eh, n_home),
        work=summarize_errors(ew, n_work),
        crs=res,
    )


def _calibrate_job(args) -> CalibrationReport:
    records_by_user, truth, r, bounds, cfg = args
    rep = calibrate_radius(records_by_user, truth, r, bounds, cfg)
    rep.crs = None
    return rep


def sweep_radius(radii: Sequence[float], records: Iterable[CheckIn], truth: Sequence[LabeledPlace],
                 bounds: ParamBounds | None = None, cfg: CrsConfig | None = None,
                 workers: int = 1) -> list[CalibrationReport]:
    """Run CRS once per radius; each radius gets its own derived seed."""
    if not radii:
        raise ValueError("at least one radius is required")
    bounds = bounds or ParamBounds()
    cfg = cfg or CrsConfig()
    users = {lp.user_id for lp in truth}
    by_user = group_by_user(r for r in records if r.user_id in users)
    jobs = []
    for r in radii:
        c = CrsConfig(p=cfg.p, n_iter=cfg.n_iter, m=cfg.m, rng_seed=radius_seed(cfg.rng_seed, r))
        jobs.append((by_user, truth, float(r), bounds, c))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            return list(ex.map(_calibrate_job, jobs))
    return [_calibrate_job(j) for j in jobs]


def write_report(reports: Sequence[CalibrationReport], path: str | Path) -> None:
    write_rows(path, REPORT_HEADER, (rep.csv_row() for rep in reports))


def select_report(reports: Sequence[CalibrationReport], radius: float | None = None) -> CalibrationReport:
    if radius is not None:
        for rep in reports:
            if rep.radius == radius:
                return rep
        raise ValueError(f"radius {radius} was not calibrated")
    return min(reports, key=lambda rep: (rep.f, rep.radius))


def write_params(params: IdentParams, path: str | Path) -> None:
    with atomic_write(path) as fh:
        json.dump(asdict(params), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path: str | Path) -> IdentParams:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return IdentParams(**{k: float(data[k]) for k in ("r", "a", "b", "k1", "k2")})
    except KeyError as exc:
        raise ValueError(f"{path}: missing parameter {exc.args[0]!r}") from None
