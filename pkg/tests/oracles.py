"""Independent reference computations used to cross-check the package.

These deliberately avoid the package's own helpers and numpy vector tricks:
plain loops, exact fractions where convenient, and textbook formulas.
"""

from __future__ import annotations

import math
from fractions import Fraction

R_KM = 6371.0


def haversine(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * R_KM * math.asin(math.sqrt(min(1.0, a)))


def cosine(c, s):
    num = math.fsum(x * y for x, y in zip(c, s))
    return num / (math.sqrt(math.fsum(x * x for x in c)) * math.sqrt(math.fsum(y * y for y in s)))


def gravity(counts, centroids):
    """Weighted mean of (lat, lon) centroids; counts and centroids keyed alike."""
    total = math.fsum(counts.values())
    lat = math.fsum(centroids[z][0] * n for z, n in counts.items()) / total
    lon = math.fsum(centroids[z][1] * n for z, n in counts.items()) / total
    return lat, lon


def gravity_distance(c, s, centroids):
    a = gravity(c, centroids)
    b = gravity(s, centroids)
    return haversine(a[0], a[1], b[0], b[1])


def coincidence(c, s):
    lo = math.fsum(min(x, y) for x, y in zip(c, s))
    hi = math.fsum(max(x, y) for x, y in zip(c, s))
    return lo / hi


def objective(home_errors, work_errors):
    """The calibration objective evaluated in exact rational arithmetic."""
    def term(errs):
        if not errs:
            return Fraction(1)
        fr = [Fraction(e) for e in errs]
        dmax = max(fr)
        if dmax == 0:
            return Fraction(0)
        return sum(e / dmax for e in fr) / (len(fr) ** 2)
    return float((term(home_errors) + term(work_errors)) / 2)


def kruskal_h(groups):
    """H from ranks assigned by counting, with the tie correction."""
    values = [v for g in groups for v in g]
    n = len(values)

    def rank(v):
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        return below + (equal + 1) / 2

    h = 12.0 / (n * (n + 1)) * sum(sum(rank(v) for v in g) ** 2 / len(g) for g in groups) - 3 * (n + 1)
    ties = 0
    for v in set(values):
        t = values.count(v)
        ties += t ** 3 - t
    return h / (1 - ties / (n ** 3 - n))


def min_tae_bruteforce(cands, targets, pop):
    """Smallest TAE over every multiset of ``pop`` candidates (tiny cases only)."""
    from itertools import combinations_with_replacement
    best = None
    for combo in combinations_with_replacement(range(len(cands)), pop):
        got = [0] * len(targets)
        for i in combo:
            for c in cands[i]:
                got[c] += 1
        t = sum(abs(a - b) for a, b in zip(got, targets))
        best = t if best is None else min(best, t)
    return best


__all__ = ["haversine", "cosine", "gravity", "gravity_distance", "coincidence", "objective",
           "kruskal_h", "min_tae_bruteforce"]
