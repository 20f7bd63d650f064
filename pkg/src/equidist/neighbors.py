"""Neighbour graphs over tract centroids with inverse-distance weights.

Two schemes are supported:

* distance threshold -- tracts i and j are neighbours when their great-circle
  distance is within the threshold; by default the threshold is the largest
  1-nearest-neighbour distance, so every tract has at least one neighbour.
* k nearest -- each tract points at its k closest tracts (not symmetric).

Weights are ``1 / d_ij`` with d in meters. Graphs are stored as CSR arrays
with neighbour indices sorted within each row; no dense n x n matrix is built.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _backend
from .errors import ValidationError
from .geo import GeoPoint, candidate_radius, chord_for_distance, unit_vectors, validate_coordinates


class Scheme(str, enum.Enum):
    THRESHOLD = "threshold"
    KNN = "knn"


@dataclass(frozen=True)
class NeighborConfig:
    scheme: Scheme = Scheme.THRESHOLD
    k: int = 5
    threshold_m: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError(f"k must be a positive integer, got {self.k!r}")
        if self.threshold_m is not None and not self.threshold_m > 0:
            raise ValidationError(f"threshold_m must be > 0, got {self.threshold_m!r}")


@dataclass
class NeighborGraph:
    """Sparse weighted adjacency in CSR form.

    ``indices[indptr[i]:indptr[i+1]]`` are the neighbours of i in increasing
    order, with matching ``weights`` (1/m) and ``distances`` (m).
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    meta: dict = field(default_factory=dict)

    def row(self, i):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    @property
    def rows(self):
        return [self.row(i) for i in range(self.n)]

    @property
    def n_edges(self):
        return int(self.indptr[-1])

    def degrees(self):
        return np.diff(self.indptr)

    def row_index(self):
        return np.repeat(np.arange(self.n), self.degrees())

    def weight_sums(self):
        return np.bincount(self.row_index(), weights=self.weights, minlength=self.n)

    def to_scipy(self):
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))

    def is_symmetric(self):
        w = self.to_scipy()
        return (w != w.T).nnz == 0

    def symmetrized(self):
        """Union of directed edges; weights stay 1/d so w_ij == w_ji."""
        if self.is_symmetric():
            return self
        i = self.row_index()
        j = self.indices
        ii = np.concatenate([i, j])
        jj = np.concatenate([j, i])
        dd = np.concatenate([self.distances, self.distances])
        key = ii * self.n + jj
        _, first = np.unique(key, return_index=True)
        meta = dict(self.meta, symmetrized=True)
        return _from_pairs(self.n, ii[first], jj[first], dd[first], meta)

    def n_components(self):
        return int(connected_components(self.to_scipy(), directed=False)[0])

    def component_labels(self):
        return connected_components(self.to_scipy(), directed=False)[1]

    def write_edge_list(self, path):
        """Write ``i,j,weight`` rows, one per directed edge."""
        i = self.row_index()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "weight"])
            for a, b, c in zip(i.tolist(), self.indices.tolist(), self.weights.tolist()):
                w.writerow([a, b, repr(c)])


def _from_pairs(n, i, j, d, meta):
    order = np.lexsort((j, i))
    i, j, d = i[order], j[order], d[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(i, minlength=n), out=indptr[1:])
    return NeighborGraph(
        n=n,
        indptr=indptr,
        indices=np.ascontiguousarray(j, dtype=np.int64),
        weights=1.0 / d,
        distances=np.ascontiguousarray(d, dtype=np.float64),
        meta=meta,
    )


def _as_arrays(centroids):
    if isinstance(centroids, tuple) and len(centroids) == 2:
        lat, lon = centroids
    else:
        pts = list(centroids)
        if pts and not isinstance(pts[0], GeoPoint):
            raise ValidationError("centroids must be GeoPoints or a (lat, lon) tuple of arrays")
        lat = [p.lat for p in pts]
        lon = [p.lon for p in pts]
    return validate_coordinates(lat, lon, what="centroid")


def _ranked_candidates(tree, xyz, lat, lon, k):
    """Per point, all others ordered by (exact distance, index), at least k of them."""
    n = len(lat)
    kern = _backend.kernels
    kk = min(k + 1, n)
    c, _ = tree.query(xyz, k=kk)
    # the k-th other point's chord bounds the candidate ball
    ck = c[:, kk - 1]
    balls = tree.query_ball_point(xyz, candidate_radius(ck))
    for i, cand in enumerate(balls):
        cand = np.asarray(cand, dtype=np.int64)
        cand = cand[cand != i]
        d = kern.haversine_one_to_many(lat[i], lon[i], lat[cand], lon[cand])
        order = np.lexsort((cand, d))
        yield i, cand[order], d[order]


def _check_duplicates(i, cand, d, ids=None):
    if len(d) and d[0] == 0.0:
        a, b = (i, int(cand[0])) if ids is None else (ids[i], ids[int(cand[0])])
        raise ValidationError(f"duplicate centroid coordinates for tracts {a} and {b}")


def nearest_neighbor_distances(centroids, ids=None):
    """Exact great-circle distance from each centroid to its nearest other centroid."""
    lat, lon = _as_arrays(centroids)
    n = len(lat)
    if n < 2:
        raise ValidationError("need at least 2 centroids")
    xyz = unit_vectors(lat, lon)
    tree = cKDTree(xyz)
    out = np.empty(n)
    for i, cand, d in _ranked_candidates(tree, xyz, lat, lon, 1):
        _check_duplicates(i, cand, d, ids)
        out[i] = d[0]
    return out


def auto_threshold(centroids, ids=None) -> float:
    """Largest 1-nearest-neighbour distance, in meters."""
    return float(nearest_neighbor_distances(centroids, ids).max())


def build_graph(centroids, cfg: NeighborConfig | None = None, ids=None) -> NeighborGraph:
    """Build the neighbour graph for ``centroids`` under ``cfg``.

    Under the threshold scheme a pair is linked when ``d <= threshold``.
    With the automatic threshold the strict ``<`` would leave the tract
    attaining the maximum 1-NN distance isolated, so equality is admitted and
    the number of such boundary edges is reported in ``meta["n_at_threshold"]``.
    """
    cfg = cfg or NeighborConfig()
    lat, lon = _as_arrays(centroids)
    n = len(lat)
    if n < 2:
        raise ValidationError("need at least 2 centroids")
    xyz = unit_vectors(lat, lon)
    tree = cKDTree(xyz)
    kern = _backend.kernels

    if cfg.scheme is Scheme.KNN:
        k = min(cfg.k, n - 1)
        rows, cols, dists = [], [], []
        for i, cand, d in _ranked_candidates(tree, xyz, lat, lon, k):
            _check_duplicates(i, cand, d, ids)
            rows.append(np.full(k, i, dtype=np.int64))
            cols.append(cand[:k])
            dists.append(d[:k])
        meta = {"scheme": cfg.scheme.value, "k": int(cfg.k), "threshold_m": None,
                "n_at_threshold": 0}
        return _from_pairs(n, np.concatenate(rows), np.concatenate(cols),
                           np.concatenate(dists), meta)

    nn = nearest_neighbor_distances((lat, lon), ids)
    threshold = float(nn.max()) if cfg.threshold_m is None else float(cfg.threshold_m)
    pairs = tree.query_pairs(float(candidate_radius(chord_for_distance(threshold))),
                             output_type="ndarray")
    if len(pairs) == 0:
        pairs = np.empty((0, 2), dtype=np.int64)
    a = np.ascontiguousarray(pairs[:, 0], dtype=np.int64)
    b = np.ascontiguousarray(pairs[:, 1], dtype=np.int64)
    # each unordered pair is scored once and mirrored, so w_ij == w_ji bit for bit
    d = kern.haversine_arrays(lat[a], lon[a], lat[b], lon[b])
    keep = d <= threshold
    a, b, d = a[keep], b[keep], d[keep]
    meta = {
        "scheme": cfg.scheme.value,
        "k": None,
        "threshold_m": threshold,
        "threshold_auto": cfg.threshold_m is None,
        "predicate": "d <= threshold",
        "n_at_threshold": int(np.count_nonzero(d == threshold)),
    }
    return _from_pairs(n, np.concatenate([a, b]), np.concatenate([b, a]),
                       np.concatenate([d, d]), meta)
