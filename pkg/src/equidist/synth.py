"""Ground-truth synthetic data.

Presets
-------
nested
    Tracts in counties in states with i.i.d. normal state, county and tract
    effects on a linear predictor of tract attributes.
spatial
    Tracts on a square grid carrying an ICAR field plus i.i.d. noise; the ICAR
    draw uses the eigendecomposition of the graph Laplacian with its null
    space removed.
toy
    Three tracts and two monitors on the equator with hand-checkable
    distances; one county has no monitor.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ValidationError
from .geo import EARTH_RADIUS_M
from .neighbors import NeighborGraph, _from_pairs

MAX_ROWS = 1_000_000


class Preset(str, enum.Enum):
    NESTED = "nested"
    SPATIAL = "spatial"
    TOY = "toy"


@dataclass
class SynthConfig:
    preset: Preset = Preset.NESTED
    n_states: int = 40
    counties_per_state: int = 8
    tracts_per_county: int = 25
    grid_side: int = 10
    beta: tuple = (1.0, 0.6, -0.3)
    predictors: tuple = ("prop_poverty", "prop_nonwhite")
    sigma2_state: float = 0.25
    sigma2_county: float = 1.0
    sigma2_resid: float = 2.0
    sigma2_v: float = 0.0
    sigma2_u: float = 1.0
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.preset = Preset(self.preset)
        for name in ("sigma2_state", "sigma2_county", "sigma2_resid", "sigma2_v", "sigma2_u"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("n_states", "counties_per_state", "tracts_per_county", "grid_side"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if len(self.beta) != len(self.predictors) + 1:
            raise ValidationError("beta needs an intercept plus one entry per predictor")
        if self.n_rows > MAX_ROWS:
            raise ValidationError(f"{self.n_rows} rows exceeds the {MAX_ROWS} row limit")

    @property
    def n_rows(self):
        if self.preset is Preset.NESTED:
            return self.n_states * self.counties_per_state * self.tracts_per_county
        if self.preset is Preset.SPATIAL:
            return self.grid_side ** 2
        return 3


def _attributes(rng, n):
    """Plausible tract demographics; proportions are internally consistent."""
    white = rng.beta(4.0, 2.0, n)
    shares = rng.dirichlet([1.0, 1.5, 3.0, 3.0, 1.0], n)
    nonwhite = 1.0 - white
    return {
        "population": rng.integers(400, 9000, n),
        "area_km2": np.exp(rng.normal(1.5, 1.2, n)),
        "urban": rng.random(n) < 0.6,
        "prop_aian": nonwhite * shares[:, 0],
        "prop_asian": nonwhite * shares[:, 1],
        "prop_black": nonwhite * shares[:, 2],
        "prop_hispanic": nonwhite * shares[:, 3],
        "prop_white": white,
        "prop_nonwhite": nonwhite,
        "prop_poverty": rng.beta(2.0, 8.0, n),
        "median_income": np.round(np.exp(rng.normal(11.0, 0.4, n)), 2),
        "pm25": rng.normal(8.0, 2.0, n),
    }


def _linear_predictor(cfg, cols, n):
    eta = np.full(n, float(cfg.beta[0]))
    for b, name in zip(cfg.beta[1:], cfg.predictors):
        if name not in cols:
            raise ValidationError(f"unknown predictor column {name!r}")
        eta = eta + b * np.asarray(cols[name], dtype=float)
    return eta


def _nested(cfg, rng):
    S, C, T = cfg.n_states, cfg.counties_per_state, cfg.tracts_per_county
    n = S * C * T
    state = np.repeat(np.arange(S), C * T)
    county = np.repeat(np.arange(S * C), T)
    # states tile a lat/lon box; counties tile each state cell in a row
    ncol = max(1, math.ceil(math.sqrt(S)))
    cell = 16.0 / ncol
    s_lat0 = 30.0 + (state // ncol) * cell
    s_lon0 = -118.0 + (state % ncol) * cell * 2.0
    c_local = county % C
    lat = s_lat0 + rng.random(n) * cell
    lon = s_lon0 + (c_local + rng.random(n)) * (cell * 2.0 / C)

    cols = _attributes(rng, n)
    alpha = rng.normal(0.0, math.sqrt(cfg.sigma2_state), S)
    gamma = rng.normal(0.0, math.sqrt(cfg.sigma2_county), S * C)
    eps = rng.normal(0.0, math.sqrt(cfg.sigma2_resid), n)
    eta = _linear_predictor(cfg, cols, n)
    y = eta + alpha[state] + gamma[county] + eps

    tracts = pd.DataFrame({
        "tract_id": [f"{s:02d}{c:03d}{i:06d}" for s, c, i in zip(state, county, range(n))],
        "county_id": [f"{s:02d}{c:03d}" for s, c in zip(state, county)],
        "state_id": [f"{s:02d}" for s in state],
        "epa_region": state % 10 + 1,
        "lat": lat,
        "lon": lon,
        **cols,
    })
    tracts["distance_m"] = np.exp(y)
    tracts["log_distance"] = y

    # one monitor per county in every other county, at a random tract-like spot
    mc = np.arange(0, S * C, 2)
    ms = mc // C
    m_lat = (30.0 + (ms // ncol) * cell) + rng.random(len(mc)) * cell
    m_lon = (-118.0 + (ms % ncol) * cell * 2.0) + ((mc % C) + rng.random(len(mc))) * (cell * 2.0 / C)
    monitors = pd.DataFrame({
        "monitor_id": [f"M{k:05d}" for k in range(len(mc))],
        "county_id": [f"{s:02d}{c:03d}" for s, c in zip(ms, mc)],
        "state_id": [f"{s:02d}" for s in ms],
        "lat": m_lat,
        "lon": m_lon,
        "active": True,
    })
    truth = {
        "preset": cfg.preset.value,
        "beta": list(cfg.beta),
        "predictors": list(cfg.predictors),
        "sigma2_state": cfg.sigma2_state,
        "sigma2_county": cfg.sigma2_county,
        "sigma2_resid": cfg.sigma2_resid,
        "alpha": alpha,
        "gamma": gamma,
        "eps": eps,
        "eta": eta,
    }
    return tracts, monitors, truth


def grid_graph(side, weight=1.0):
    """Rook-adjacency graph on a ``side x side`` grid with constant weights."""
    idx = np.arange(side * side).reshape(side, side)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    d = np.full(2 * len(a), 1.0 / weight)
    meta = {"scheme": "grid", "k": None, "threshold_m": None, "n_at_threshold": 0}
    return _from_pairs(side * side, np.concatenate([a, b]), np.concatenate([b, a]), d, meta)


def icar_covariance(graph: NeighborGraph, sigma2_v=1.0, tol=1e-9):
    """Dense covariance of the sum-to-zero-per-component ICAR field."""
    w = graph.to_scipy().toarray()
    lap = np.diag(w.sum(axis=1)) - w
    lam, vec = np.linalg.eigh(lap)
    keep = lam > tol * lam.max()
    return sigma2_v * (vec[:, keep] / lam[keep]) @ vec[:, keep].T


def sample_icar(graph: NeighborGraph, sigma2_v, rng, size=None, tol=1e-9):
    """Draw ICAR fields ``v`` with precision ``(D - W) / sigma2_v`` restricted to
    the complement of the Laplacian null space."""
    w = graph.to_scipy().toarray()
    if not np.array_equal(w, w.T):
        raise ValidationError("ICAR sampling needs a symmetric graph")
    lap = np.diag(w.sum(axis=1)) - w
    lam, vec = np.linalg.eigh(lap)
    keep = lam > tol * lam.max()
    basis = vec[:, keep] / np.sqrt(lam[keep])
    m = 1 if size is None else size
    z = rng.standard_normal((keep.sum(), m))
    v = math.sqrt(sigma2_v) * (basis @ z)
    return v[:, 0] if size is None else v.T


def _spatial(cfg, rng, spacing_m=1000.0):
    L = cfg.grid_side
    n = L * L
    graph = cfg.extras.get("graph") or grid_graph(L, cfg.extras.get("weight", 1.0))
    r, c = np.divmod(np.arange(n), L)
    lat0 = 40.0
    dlat = math.degrees(spacing_m / EARTH_RADIUS_M)
    dlon = dlat / math.cos(math.radians(lat0))
    half = max(1, L // 2)
    state = (c >= half).astype(int)
    county = state * 2 + (r >= half).astype(int)

    cols = _attributes(rng, n)
    alpha = rng.normal(0.0, math.sqrt(cfg.sigma2_state), 2)
    gamma = rng.normal(0.0, math.sqrt(cfg.sigma2_county), 4)
    v = sample_icar(graph, cfg.sigma2_v, rng) if cfg.sigma2_v > 0 else np.zeros(n)
    u = rng.normal(0.0, math.sqrt(cfg.sigma2_u), n)
    eta = _linear_predictor(cfg, cols, n)
    y = eta + alpha[state] + gamma[county] + v + u

    tracts = pd.DataFrame({
        "tract_id": [f"G{i:06d}" for i in range(n)],
        "county_id": [f"{s:02d}{k:03d}" for s, k in zip(state, county)],
        "state_id": [f"{s:02d}" for s in state],
        "epa_region": state + 1,
        "lat": lat0 + r * dlat,
        "lon": -100.0 + c * dlon,
        **cols,
    })
    tracts["distance_m"] = np.exp(y)
    tracts["log_distance"] = y
    monitors = pd.DataFrame({
        "monitor_id": ["M00000", "M00001"],
        "county_id": [tracts["county_id"].iloc[0], tracts["county_id"].iloc[-1]],
        "state_id": [tracts["state_id"].iloc[0], tracts["state_id"].iloc[-1]],
        "lat": [tracts["lat"].iloc[0], tracts["lat"].iloc[-1]],
        "lon": [tracts["lon"].iloc[0] + 0.5 * dlon, tracts["lon"].iloc[-1] - 0.5 * dlon],
        "active": True,
    })
    truth = {
        "preset": cfg.preset.value,
        "beta": list(cfg.beta),
        "predictors": list(cfg.predictors),
        "sigma2_state": cfg.sigma2_state,
        "sigma2_county": cfg.sigma2_county,
        "sigma2_v": cfg.sigma2_v,
        "sigma2_u": cfg.sigma2_u,
        "alpha": alpha,
        "gamma": gamma,
        "v": v,
        "u": u,
        "graph": graph,
    }
    return tracts, monitors, truth


def _toy(cfg, rng):
    # equator, 1 km of longitude ~ 0.0089932 degrees
    km = math.degrees(1000.0 / EARTH_RADIUS_M)
    cols = {k: np.asarray(v)[:3] for k, v in _attributes(rng, 3).items()}
    tracts = pd.DataFrame({
        "tract_id": ["T1", "T2", "T3"],
        "county_id": ["C1", "C1", "C2"],
        "state_id": ["S1", "S1", "S1"],
        "epa_region": [4, 4, 4],
        "lat": [0.0, 0.0, 0.0],
        "lon": [0.0, 1.0 * km, 3.0 * km],
        **cols,
    })
    monitors = pd.DataFrame({
        "monitor_id": ["M1", "M2"],
        "county_id": ["C1", "C1"],
        "state_id": ["S1", "S1"],
        "lat": [0.0, 0.0],
        "lon": [0.0, 2.0 * km],
        "active": [True, True],
    })
    truth = {"preset": cfg.preset.value, "km_deg": km}
    return tracts, monitors, truth


def generate(cfg: SynthConfig):
    """Return ``(tracts, monitors, truth)`` drawn from the configured preset."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.preset is Preset.NESTED:
        return _nested(cfg, rng)
    if cfg.preset is Preset.SPATIAL:
        return _spatial(cfg, rng)
    return _toy(cfg, rng)
