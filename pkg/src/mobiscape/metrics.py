"""Spatial validation measures between check-in-derived and survey data.

* cosine similarity of zone share vectors,
* distance between count-weighted centers of gravity,
* coincidence ratio of commuting-distance histograms (sum of minima over
  sum of maxima across bins).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BinningMismatch, NoCommuters, ZeroVector, ZoneMismatch
from .geo import ZoneRegistry, center_of_gravity, haversine_km

BIN_WIDTH_KM = 0.24
N_BINS = 500


@dataclass(frozen=True)
class ZoneDistribution:
    zones: tuple[str, ...]
    shares: np.ndarray

    def __post_init__(self) -> None:
        if len(self.zones) != len(self.shares):
            raise ValueError("one share per zone is required")
        if np.any(self.shares < 0):
            raise ValueError("shares must be non-negative")
        total = float(self.shares.sum())
        if total == 0:
            raise ZeroVector("zone distribution is all zero")
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"shares sum to {total}, expected 1")

    @classmethod
    def from_counts(cls, counts: Mapping[str, float], zones: Sequence[str] | None = None) -> "ZoneDistribution":
        """Normalise counts by their own total; zones missing from ``counts`` get 0."""
        universe = tuple(zones) if zones is not None else tuple(sorted(counts))
        unknown = set(counts) - set(universe)
        if unknown:
            raise ZoneMismatch(f"counts for zones outside the universe: {sorted(unknown)[:5]}")
        v = np.array([float(counts.get(z, 0.0)) for z in universe])
        total = v.sum()
        if total <= 0:
            raise ZeroVector("cannot normalise all-zero counts")
        return cls(universe, v / total)


def cosine_similarity(c: ZoneDistribution, s: ZoneDistribution) -> float:
    if c.zones != s.zones:
        raise ZoneMismatch("distributions are defined over different zone universes")
    nc = math.sqrt(float(np.dot(c.shares, c.shares)))
    ns = math.sqrt(float(np.dot(s.shares, s.shares)))
    if nc == 0 or ns == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.dot(c.shares, s.shares)) / (nc * ns)


def gravity_distance(c: Mapping[str, float], s: Mapping[str, float], registry: ZoneRegistry) -> float:
    """Kilometres between the two count maps' centers of gravity."""
    return haversine_km(center_of_gravity(c, registry), center_of_gravity(s, registry))


@dataclass(frozen=True)
class DistanceHistogram:
    width_km: float
    fractions: np.ndarray

    def __post_init__(self) -> None:
        if not self.width_km > 0:
            raise ValueError("bin width must be positive")
        total = float(self.fractions.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fractions sum to {total}, expected 1")

    @property
    def n_bins(self) -> int:
        return len(self.fractions)

    def bin_edges_lo(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.width_km

    @classmethod
    def from_distances(cls, distances_km: Iterable[float], width_km: float = BIN_WIDTH_KM,
                       n_bins: int = N_BINS) -> "DistanceHistogram":
        """Bin index is floor(d / width), clamped into the last bin."""
        d = np.asarray(list(distances_km), dtype=float)
        if d.size == 0:
            raise NoCommuters("no commuting distances to bin")
        if np.any(d < 0) or np.any(~np.isfinite(d)):
            raise ValueError("distances must be finite and non-negative")
        idx = np.minimum(np.floor(d / width_km).astype(np.int64), n_bins - 1)
        counts = np.bincount(idx, minlength=n_bins).astype(float)
        return cls(width_km, counts / d.size)


def coincidence_ratio(c: DistanceHistogram, s: DistanceHistogram) -> float:
    if c.n_bins != s.n_bins or c.width_km != s.width_km:
        raise BinningMismatch(
            f"histograms differ: {c.n_bins}x{c.width_km} km vs {s.n_bins}x{s.width_km} km")
    num = float(np.minimum(c.fractions, s.fractions).sum())
    den = float(np.maximum(c.fractions, s.fractions).sum())
    return num / den


def commute_histogram(population, width_km: float = BIN_WIDTH_KM, n_bins: int = N_BINS) -> DistanceHistogram:
    """Histogram of home-work distances over members that have both anchors.

    ``population`` is any iterable whose items expose ``commute_km()``
    (None for non-commuters), such as enriched clones or PersonPlaces.
    """
    dists = [d for d in (m.commute_km() for m in population) if d is not None]
    if not dists:
        raise NoCommuters("population contains no commuters")
    return DistanceHistogram.from_distances(dists, width_km, n_bins)

