"""Great-circle distances and exact nearest-monitor queries.

Distances use the haversine formula on a sphere of mean Earth radius
6 371 008.8 m. The spatial index prunes candidates with a k-d tree over unit
vectors (chord length is monotone in arc length) and then re-scores the
survivors with the same scalar haversine kernel used everywhere else, so
results are identical to an exhaustive scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _backend
from .errors import NoCandidateError, ValidationError

EARTH_RADIUS_M = 6371008.8

# relative/absolute slack on chord radius when collecting exact-rescoring candidates
_CHORD_REL_SLACK = 1e-6
_CHORD_ABS_SLACK = 1e-12


def _normalize_lon(lon: float) -> float:
    if -180.0 <= lon <= 180.0:
        return lon
    return ((lon + 180.0) % 360.0) - 180.0


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 decimal-degree coordinate; longitude is wrapped into [-180, 180]."""

    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not math.isfinite(lat) or not -90.0 <= lat <= 90.0:
            raise ValidationError(f"lat must be a finite value in [-90, 90], got {self.lat!r}")
        if not math.isfinite(lon):
            raise ValidationError(f"lon must be finite, got {self.lon!r}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", _normalize_lon(lon))


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points."""
    return _backend.kernels.haversine_scalar(a.lat, a.lon, b.lat, b.lon)


def validate_coordinates(lat, lon, what="coordinate"):
    """Check coordinate arrays and return them as float64 with wrapped longitudes."""
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    lon = np.ascontiguousarray(lon, dtype=np.float64)
    if lat.shape != lon.shape:
        raise ValidationError(f"{what}: lat and lon lengths differ")
    bad = ~np.isfinite(lat) | (lat < -90.0) | (lat > 90.0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{what} {i}: lat must be in [-90, 90], got {lat[i]!r}")
    if not np.isfinite(lon).all():
        i = int(np.flatnonzero(~np.isfinite(lon))[0])
        raise ValidationError(f"{what} {i}: lon must be finite, got {lon[i]!r}")
    out = (lon < -180.0) | (lon > 180.0)
    if out.any():
        lon = lon.copy()
        lon[out] = ((lon[out] + 180.0) % 360.0) - 180.0
    return lat, lon


def unit_vectors(lat, lon):
    """Cartesian unit vectors for degree coordinates, shape (n, 3)."""
    p = np.radians(lat)
    q = np.radians(lon)
    cp = np.cos(p)
    return np.column_stack([cp * np.cos(q), cp * np.sin(q), np.sin(p)])


def chord_for_distance(distance_m):
    """Unit-sphere chord length subtending an arc of ``distance_m``."""
    return 2.0 * np.sin(np.minimum(np.asarray(distance_m) / (2.0 * EARTH_RADIUS_M), np.pi / 2))


def candidate_radius(chord):
    return chord * (1.0 + _CHORD_REL_SLACK) + _CHORD_ABS_SLACK


@dataclass(frozen=True)
class DistanceResult:
    monitor_id: Hashable
    distance_m: float
    same_county: bool


class _Block:
    """k-d tree over a subset of monitors, positions in id order."""

    def __init__(self, positions, lat, lon):
        self.positions = np.asarray(positions, dtype=np.int64)
        self.lat = np.ascontiguousarray(lat[self.positions])
        self.lon = np.ascontiguousarray(lon[self.positions])
        self.tree = cKDTree(unit_vectors(self.lat, self.lon))

    def query(self, lat, lon):
        """Nearest entries for arrays of query points: (positions, distances)."""
        kern = _backend.kernels
        m = len(self.positions)
        xyz = unit_vectors(lat, lon)
        if m == 1:
            best = np.zeros(len(lat), dtype=np.int64)
            d = kern.haversine_arrays(lat, lon, np.repeat(self.lat, len(lat)),
                                      np.repeat(self.lon, len(lat)))
            return self.positions[best], d
        c0, _ = self.tree.query(xyz, k=1)
        cands = self.tree.query_ball_point(xyz, candidate_radius(c0))
        pos = np.empty(len(lat), dtype=np.int64)
        dist = np.empty(len(lat), dtype=np.float64)
        for q, cand in enumerate(cands):
            cand = np.asarray(cand, dtype=np.int64)
            d = kern.haversine_one_to_many(lat[q], lon[q], self.lat[cand], self.lon[cand])
            # smallest distance, then smallest id (local index order == id order)
            k = np.lexsort((cand, d))[0]
            pos[q] = self.positions[cand[k]]
            dist[q] = d[k]
        return pos, dist


class SpatialIndex:
    """Immutable nearest-neighbour index over monitor sites.

    Parameters
    ----------
    ids : sequence
        Monitor identifiers; all of one comparable type. Ties in distance are
        broken by the smallest identifier.
    lats, lons : array_like
        Coordinates in decimal degrees.
    counties : sequence, optional
        County identifier per monitor, enabling ``county_filter`` queries.
    """

    def __init__(self, ids: Sequence[Hashable], lats, lons, counties=None):
        ids = list(ids)
        if not ids:
            raise NoCandidateError("no active monitors")
        lat, lon = validate_coordinates(lats, lons, what="monitor")
        if len(ids) != len(lat):
            raise ValidationError("ids and coordinates lengths differ")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate monitor ids")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids = [ids[i] for i in order]
        self.lat = lat[order]
        self.lon = lon[order]
        self.counties = None if counties is None else [list(counties)[i] for i in order]
        self._all = _Block(np.arange(len(order)), self.lat, self.lon)
        self._by_county = {}
        if self.counties is not None:
            groups = {}
            for pos, c in enumerate(self.counties):
                groups.setdefault(c, []).append(pos)
            self._by_county = {c: _Block(p, self.lat, self.lon) for c, p in groups.items()}

    @classmethod
    def from_points(cls, entries, counties=None):
        """Build from ``[(id, GeoPoint), ...]``."""
        ids = [e[0] for e in entries]
        return cls(ids, [e[1].lat for e in entries], [e[1].lon for e in entries], counties)

    def __len__(self):
        return len(self.ids)

    def _block(self, county_filter):
        if county_filter is None:
            return self._all
        if self.counties is None:
            raise ValidationError("index was built without county labels")
        try:
            return self._by_county[county_filter]
        except KeyError:
            raise NoCandidateError(f"no monitor in county {county_filter!r}") from None

    def query_many(self, lats, lons, county_filter=None):
        """Vectorised nearest query; returns (monitor positions, distances in m)."""
        lat, lon = validate_coordinates(lats, lons, what="query point")
        if len(lat) == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return self._block(county_filter).query(lat, lon)


def nearest_monitor(p: GeoPoint, idx: SpatialIndex, county_filter=None,
                    point_county=None) -> DistanceResult:
    """Nearest monitor to ``p``, optionally restricted to one county.

    ``same_county`` is true when the returned monitor lies in ``point_county``
    (or in ``county_filter`` when a filter is given).
    """
    pos, dist = idx.query_many([p.lat], [p.lon], county_filter)
    pos = int(pos[0])
    county = point_county if point_county is not None else county_filter
    same = county is not None and idx.counties is not None and idx.counties[pos] == county
    return DistanceResult(idx.ids[pos], float(dist[0]), bool(same))
