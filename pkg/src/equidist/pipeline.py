"""Ingestion, distance construction, model-suite assembly and report emission."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import __version__
from .bym import McmcConfig, fit_bym_arrays
from .errors import ConvergenceError, NoCandidateError, ValidationError
from .geo import SpatialIndex
from .mlm import EJAttribute, ModelSpec, design_matrix, fit_lmm_arrays
from .moran import MoranNull, morans_i
from .neighbors import NeighborConfig, build_graph
from .schema import (DEMOGRAPHIC_COLUMNS, MONITOR_FIELDS, PROPORTION_COLUMNS, SCHEMA_VERSION,
                     STATE_FIPS_TO_EPA_REGION, TRACT_FIELDS)

log = logging.getLogger(__name__)

MIN_POPULATION = 100
MAIN_ATTRIBUTES = (EJAttribute.POVERTY, EJAttribute.AIAN, EJAttribute.ASIAN,
                   EJAttribute.BLACK, EJAttribute.HISPANIC, EJAttribute.WHITE)
SENSITIVITY_ATTRIBUTES = (EJAttribute.INCOME,) + MAIN_ATTRIBUTES[1:]
REGIONS = ("us",) + tuple(range(1, 11))

_MISSING = {"", "na", "nan", "null", "none"}
_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


@dataclass
class IngestReport:
    rows_in: int = 0
    rows_kept: int = 0
    excluded: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def rows_excluded(self):
        return sum(self.excluded.values())


# ---------------------------------------------------------------- CSV I/O

def _parse(kind, raw, name, line):
    s = raw.strip()
    if s.lower() in _MISSING:
        return None
    if kind == "id":
        return s
    try:
        if kind == "float":
            return float(s)
        if kind == "int":
            try:
                return int(s)
            except ValueError:
                v = float(s)
                if not v.is_integer():
                    raise
                return int(v)
    except ValueError:
        raise ValidationError(f"line {line}: column {name!r} is not a number: {raw!r}") from None
    low = s.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValidationError(f"line {line}: column {name!r} is not a boolean: {raw!r}")


def read_table(source, fields, what="table"):
    """Parse a CSV with a header row into a DataFrame typed by ``fields``.

    Returns ``(frame, line_numbers)``. Unknown columns are dropped.
    """
    fh = open(source, newline="") if not hasattr(source, "read") else source
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{what}: file is empty") from None
        spec = {name: (kind, req) for name, kind, req in fields}
        missing = [n for n, (_, req) in spec.items() if req and n not in header]
        if missing:
            raise ValidationError(f"{what}: missing required columns {missing}")
        present = [(i, h) for i, h in enumerate(header) if h in spec]
        cols = {h: [] for _, h in present}
        lines = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{what} line {line}: expected {len(header)} fields, got {len(row)}")
            for i, h in present:
                kind, req = spec[h]
                v = _parse(kind, row[i], h, line)
                if v is None and kind == "id" and req:
                    raise ValidationError(f"{what} line {line}: required column {h!r} is empty")
                cols[h].append(v)
            lines.append(line)
    finally:
        if fh is not source:
            fh.close()
    frame = pd.DataFrame({h: _column(spec[h][0], v) for h, v in cols.items()})
    return frame, lines


def _column(kind, values):
    if kind == "float":
        return pd.array([np.nan if v is None else v for v in values], dtype="float64")
    if kind == "int":
        if any(v is None for v in values):
            return pd.array(values, dtype="Int64")
        return np.array(values, dtype=np.int64)
    if kind == "bool":
        if any(v is None for v in values):
            return pd.array(values, dtype="boolean")
        return np.array(values, dtype=bool)
    return pd.array(["" if v is None else v for v in values], dtype=object)


def _fmt(kind, v):
    if v is None or (isinstance(v, float) and math.isnan(v)) or v is pd.NA:
        return ""
    if kind == "float":
        return repr(float(v))
    if kind == "int":
        return str(int(v))
    if kind == "bool":
        return "1" if bool(v) else "0"
    return str(v)


def write_table(frame, fields, target):
    """Canonical CSV: schema column order, shortest round-trip floats, 0/1 booleans."""
    names = [(n, k) for n, k, _ in fields if n in frame.columns]
    own = not hasattr(target, "write")
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([n for n, _ in names])
        data = [frame[n].tolist() for n, _ in names]
        for row in zip(*data):
            w.writerow([_fmt(k, v) for (_, k), v in zip(names, row)])
    finally:
        if own:
            fh.close()


def write_tracts_csv(frame, target):
    write_table(frame, TRACT_FIELDS, target)


def write_monitors_csv(frame, target):
    write_table(frame, MONITOR_FIELDS, target)


def table_hash(frame, fields=TRACT_FIELDS):
    buf = io.StringIO()
    write_table(frame, fields, buf)
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


# ---------------------------------------------------------------- ingestion

def _region_for_state(state_id):
    key = str(state_id).strip().zfill(2)[:2]
    return STATE_FIPS_TO_EPA_REGION.get(key)


def load_tracts(source):
    """Read and filter a tract CSV; returns ``(frame, IngestReport)``."""
    raw, lines = read_table(source, TRACT_FIELDS, "tracts")
    report = IngestReport(rows_in=len(raw))
    dup = raw["tract_id"].duplicated()
    if dup.any():
        k = int(np.flatnonzero(dup.to_numpy())[0])
        raise ValidationError(f"tracts line {lines[k]}: duplicated tract_id {raw['tract_id'][k]!r}")

    for col in PROPORTION_COLUMNS:
        if col in raw:
            v = raw[col].to_numpy(dtype=float)
            bad = (v < 0) | (v > 1)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"tracts line {lines[k]}: {col} = {v[k]!r} is not in [0, 1]")
    if "prop_nonwhite" in raw:
        gap = np.abs(raw["prop_nonwhite"].to_numpy(float) - (1.0 - raw["prop_white"].to_numpy(float)))
        bad = gap > 1e-9
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"tracts line {lines[k]}: prop_nonwhite != 1 - prop_white")
    for col, lo, hi in (("lat", -90.0, 90.0), ("lon", -180.0, 180.0)):
        v = raw[col].to_numpy(float)
        bad = (v < lo) | (v > hi)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"tracts line {lines[k]}: {col} = {v[k]!r} out of range")

    demo = [c for c in DEMOGRAPHIC_COLUMNS if c in raw] + ["population"]
    reasons = [
        ("missing_demographics", raw[demo].isna().any(axis=1).to_numpy()),
        ("population_lt_100", (raw["population"].fillna(0).to_numpy(dtype=float) < MIN_POPULATION)),
        ("missing_centroid", raw[["lat", "lon"]].isna().any(axis=1).to_numpy()),
    ]
    if "pm25" in raw:
        reasons.append(("missing_pm25", raw["pm25"].isna().to_numpy()))
    drop = np.zeros(len(raw), dtype=bool)
    for name, mask in reasons:
        hit = mask & ~drop
        report.excluded[name] = int(hit.sum())
        drop |= hit
    kept = raw.loc[~drop].reset_index(drop=True)
    kept["population"] = kept["population"].astype(np.int64)

    if "epa_region" not in kept or kept["epa_region"].isna().any():
        derived = [_region_for_state(s) for s in kept["state_id"]]
        if "epa_region" in kept:
            derived = [r if pd.isna(e) else int(e) for r, e in zip(derived, kept["epa_region"])]
        if any(r is None for r in derived):
            bad = kept["state_id"][[r is None for r in derived]].iloc[0]
            raise ValidationError(f"cannot derive EPA region for state {bad!r}; add epa_region")
        kept["epa_region"] = np.array(derived, dtype=np.int64)
        report.notes.append("epa_region derived from state FIPS")
    kept["epa_region"] = kept["epa_region"].astype(np.int64)
    if not kept["epa_region"].between(1, 10).all():
        raise ValidationError("epa_region must be in 1..10")
    if "prop_nonwhite" not in kept:
        kept["prop_nonwhite"] = 1.0 - kept["prop_white"]
    report.rows_kept = len(kept)
    order = [n for n, _, _ in TRACT_FIELDS if n in kept]
    return kept[order], report


def load_monitors(source):
    raw, lines = read_table(source, MONITOR_FIELDS, "monitors")
    if "active" in raw:
        raw = raw.loc[raw["active"].fillna(False).astype(bool)].reset_index(drop=True)
    else:
        raw["active"] = True
    if len(raw) == 0:
        raise ValidationError("no active monitors")
    if raw["monitor_id"].duplicated().any():
        raise ValidationError("duplicated monitor_id")
    return raw, lines


def ingest(tracts_csv, monitors_csv):
    """Read both input tables. Returns ``(tracts, monitors, IngestReport)``."""
    tracts, report = load_tracts(tracts_csv)
    monitors, _ = load_monitors(monitors_csv)
    return tracts, monitors, report


# ---------------------------------------------------------------- distances

def compute_distances(tracts, monitors):
    """Add nearest-monitor distances (overall and within county) and their logs.

    Distances below 1 m are floored at 1 m before taking the log; the count
    is returned in the notes.
    """
    idx = SpatialIndex(monitors["monitor_id"].tolist(), monitors["lat"], monitors["lon"],
                       monitors["county_id"].tolist())
    out = tracts.copy()
    lat = out["lat"].to_numpy(float)
    lon = out["lon"].to_numpy(float)
    pos, dist = idx.query_many(lat, lon)
    out["distance_m"] = dist
    out["nearest_monitor_id"] = [idx.ids[p] for p in pos]

    dc = np.full(len(out), np.nan)
    mc = np.array([""] * len(out), dtype=object)
    counties = out["county_id"].to_numpy()
    for county in pd.unique(counties):
        rows = np.flatnonzero(counties == county)
        try:
            p, d = idx.query_many(lat[rows], lon[rows], county_filter=county)
        except NoCandidateError:
            continue
        dc[rows] = d
        mc[rows] = [idx.ids[q] for q in p]
    out["distance_county_m"] = dc
    out["county_monitor_id"] = mc
    out["log_distance"] = np.log(np.maximum(dist, 1.0))
    with np.errstate(invalid="ignore"):
        out["log_distance_county"] = np.where(np.isnan(dc), np.nan, np.log(np.maximum(dc, 1.0)))
    notes = {
        "floored_at_1m": int(np.count_nonzero(dist < 1.0)),
        "floored_at_1m_county": int(np.count_nonzero(dc < 1.0)),
        "no_monitor_in_county": int(np.count_nonzero(np.isnan(dc))),
    }
    return out, notes


# ---------------------------------------------------------------- preparation

def zscore(values):
    """Standardise with the n-1 standard deviation."""
    x = np.asarray(values, dtype=float)
    if x.size < 2 or np.all(x == x[0]):
        raise ValidationError("z-score needs at least two distinct values")
    return (x - x.mean()) / x.std(ddof=1)


def prepare(tracts):
    """Derived model columns: income in 100k, log population density, PM2.5 z-score."""
    out = tracts.copy()
    if "prop_nonwhite" not in out:
        out["prop_nonwhite"] = 1.0 - out["prop_white"]
    if "median_income" in out:
        out["median_income_100k"] = out["median_income"] / 1e5
    if "area_km2" in out:
        area = out["area_km2"].to_numpy(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.log(out["population"].to_numpy(float) / area)
        out["pop_density"] = np.where(area > 0, dens, np.nan)
    if "pm25" in out and out["pm25"].notna().sum() >= 2:
        out["pm25_zscore"] = zscore(out["pm25"].to_numpy(float))
    return out


def stratum_mask(tracts, urbanicity, region):
    mask = tracts["urban"].to_numpy(bool) == (urbanicity == "urban")
    if region != "us":
        mask &= tracts["epa_region"].to_numpy() == int(region)
    return mask


# ---------------------------------------------------------------- suites

@dataclass(frozen=True)
class SuiteConfig:
    suite: str = "main"
    urbanicity: tuple = ("urban", "rural")
    regions: tuple = REGIONS

    def __post_init__(self):
        if self.suite not in ("main", "sensitivity"):
            raise ValidationError(f"unknown suite {self.suite!r}")
        for r in self.regions:
            if r != "us" and (not str(r).isdigit() or not 1 <= int(r) <= 10):
                raise ValidationError(f"unknown region id {r!r}")


def build_suite(config: SuiteConfig | None = None):
    """Model specs for every (attribute, urbanicity, region) combination."""
    config = config or SuiteConfig()
    attrs = MAIN_ATTRIBUTES if config.suite == "main" else SENSITIVITY_ATTRIBUTES
    return [
        ModelSpec.for_attribute(a, config.suite, u, r)
        for u in config.urbanicity
        for r in config.regions
        for a in attrs
    ]


@dataclass
class RunOptions:
    run_models: bool = True
    run_moran: bool = False
    run_bym: bool = False
    graph: NeighborConfig = field(default_factory=NeighborConfig)
    moran_null: str = "randomization"
    residuals: str = "conditional"
    moran_alpha: float = 0.05
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    priors: dict = field(default_factory=dict)
    pm25_scope: str = "sample"
    keep_residuals: bool = False
    run_apportionment: bool = False


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def descriptives(tracts):
    cols = [c for c in ("distance_m", "distance_county_m", "population", "prop_aian",
                        "prop_asian", "prop_black", "prop_hispanic", "prop_white",
                        "prop_poverty", "median_income", "pm25") if c in tracts]
    out = {}
    groups = {"all": np.ones(len(tracts), bool),
              "urban": tracts["urban"].to_numpy(bool),
              "rural": ~tracts["urban"].to_numpy(bool)}
    for g, mask in groups.items():
        sub = tracts.loc[mask]
        out[g] = {"n": int(mask.sum())}
        for c in cols:
            v = sub[c].to_numpy(float)
            v = v[np.isfinite(v)]
            out[g][c] = {"mean": float(v.mean()) if v.size else None,
                         "sd": float(v.std(ddof=1)) if v.size > 1 else None}
    return out


def apportionment_models(tracts):
    """Null and adjusted variance-apportionment models for both distance definitions.

    Within-county distances use only tracts in counties with a monitor.
    The adjusted models add urbanicity and population (per 1000).
    """
    out = {}
    for label, col in (("within_county", "log_distance_county"), ("nearest", "log_distance")):
        if col not in tracts:
            continue
        sub = tracts.loc[tracts[col].notna()]
        for adj in (False, True):
            name = f"{label}_{'adjusted' if adj else 'null'}"
            X = [np.ones(len(sub))]
            names = ["intercept"]
            if adj:
                X += [sub["urban"].to_numpy(float), sub["population"].to_numpy(float) / 1000.0]
                names += ["urban", "population_1k"]
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    fit = fit_lmm_arrays(sub[col].to_numpy(float), np.column_stack(X),
                                         sub["state_id"].to_numpy(), sub["county_id"].to_numpy(),
                                         names)
                out[name] = {"status": "ok", **fit.summary()}
            except (ValidationError, ConvergenceError) as exc:
                out[name] = {"status": "skipped", "skip_reason": str(exc)}
    return out


def _model_entry(spec):
    return {
        "key": spec.key,
        "suite": spec.suite,
        "ej_attribute": spec.ej_attribute.value,
        "urbanicity": spec.urbanicity,
        "region": spec.region,
        "stratum": spec.stratum,
        "covariates": list(spec.covariates),
    }


def run_suite(specs, tracts, options: RunOptions | None = None, provenance=None):
    """Fit every spec; optionally test residuals and fit BYM where flagged.

    Per-model failures become ``"skipped"`` entries with a reason.
    """
    options = options or RunOptions()
    data = prepare(tracts)
    report = {
        "schema_version": SCHEMA_VERSION,
        "header": {
            "outcome": "natural log of distance to nearest monitor in meters (floored at 1 m)",
            "pop_density": "log(population / area_km2)",
            "pm25_zscore": f"z-score of PM2.5 over the {options.pm25_scope}",
            "moran_residuals": options.residuals,
            "moran_null": options.moran_null,
            "ci": "Wald normal approximation, 95%",
        },
        "provenance": _clean({
            "software": "equidist",
            "version": __version__,
            "input_sha256": table_hash(tracts),
            "n_tracts": len(tracts),
            "options": {
                "run_models": options.run_models, "run_moran": options.run_moran,
                "run_bym": options.run_bym, "graph": {
                    "scheme": options.graph.scheme.value, "k": options.graph.k,
                    "threshold_m": options.graph.threshold_m},
                "moran_alpha": options.moran_alpha, "pm25_scope": options.pm25_scope,
                "mcmc": asdict(options.mcmc),
            },
            **(provenance or {}),
        }),
        "descriptives": _clean(descriptives(data)),
        "models": [],
    }
    if options.run_apportionment:
        report["apportionment"] = _clean(apportionment_models(data))
    if not options.run_models:
        return report

    graphs = {}
    for spec in specs:
        entry = _model_entry(spec)
        mask = stratum_mask(data, spec.urbanicity, spec.region)
        sub = data.loc[mask].reset_index(drop=True)
        if options.pm25_scope == "stratum" and "pm25" in sub:
            try:
                sub["pm25_zscore"] = zscore(sub["pm25"].to_numpy(float))
            except ValidationError as exc:
                report["models"].append({**entry, "status": "skipped", "skip_reason": str(exc)})
                continue
        try:
            if len(sub) == 0:
                raise ValidationError("stratum is empty")
            y, X, names = design_matrix(spec, sub)
            with warnings.catch_warnings():
                # singular fits are recorded in the summary flags
                warnings.simplefilter("ignore", UserWarning)
                fit = fit_lmm_arrays(y, X, sub["state_id"].to_numpy(),
                                     sub["county_id"].to_numpy(), names)
        except (ValidationError, ConvergenceError, np.linalg.LinAlgError) as exc:
            report["models"].append({**entry, "status": "skipped", "skip_reason": str(exc)})
            continue
        entry.update(status="ok", fit=fit.summary())
        resid = fit.residuals if options.residuals == "conditional" else fit.marginal_residuals
        if options.keep_residuals:
            entry["residuals"] = {"tract_id": sub["tract_id"].tolist(),
                                  "conditional": fit.residuals,
                                  "marginal": fit.marginal_residuals}
        if options.run_moran or options.run_bym:
            graph = graphs.get(spec.stratum)
            if graph is None:
                try:
                    graph = build_graph((sub["lat"].to_numpy(float), sub["lon"].to_numpy(float)),
                                        options.graph, ids=sub["tract_id"].tolist())
                except ValidationError as exc:
                    graph = exc
                graphs[spec.stratum] = graph
            if isinstance(graph, Exception):
                entry["moran"] = {"status": "skipped", "skip_reason": str(graph)}
            else:
                try:
                    mres = morans_i(resid, graph, MoranNull(options.moran_null))
                    entry["moran"] = {"status": "ok", "graph": graph.meta,
                                      "n_edges": graph.n_edges, **mres.as_dict()}
                except ValidationError as exc:
                    entry["moran"] = {"status": "skipped", "skip_reason": str(exc)}
                    mres = None
                if options.run_bym and mres is not None and mres.p < options.moran_alpha:
                    try:
                        bfit = fit_bym_arrays(y, X, sub["state_id"].to_numpy(),
                                              sub["county_id"].to_numpy(), graph, names,
                                              options.priors, options.mcmc)
                        entry["bym"] = {"status": "ok", **bfit.summary()}
                    except ValidationError as exc:
                        entry["bym"] = {"status": "skipped", "skip_reason": str(exc)}
        report["models"].append(_clean(entry))
    return report


def dumps_report(report):
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report, path):
    with open(path, "w") as fh:
        fh.write(dumps_report(report))


_TERM_ORDER = ("prop_poverty", "median_income_100k", "prop_aian", "prop_asian", "prop_black",
               "prop_hispanic", "prop_white", "prop_nonwhite", "pop_density", "pm25_zscore",
               "intercept")
_COLUMN_ORDER = ("AIAN", "Asian", "Black", "Hispanic", "PovertyProportion", "MedianIncome100k",
                 "White")


def write_coefficient_csv(report, path):
    """Coefficient table per stratum: one column per EJ-attribute model, an
    estimate row then an ``(se)`` row per term, observations last."""
    by_stratum = {}
    for m in report["models"]:
        if m.get("status") == "ok":
            by_stratum.setdefault((m["suite"], m["stratum"]), []).append(m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for (suite, stratum), ms in by_stratum.items():
            ms = sorted(ms, key=lambda m: _COLUMN_ORDER.index(m["ej_attribute"]))
            present = {t for m in ms for t in m["fit"]["coefficients"]}
            terms = [t for t in _TERM_ORDER if t in present]
            w.writerow([f"{suite} {stratum}"] + [m["ej_attribute"] for m in ms])
            for t in terms:
                est, se = [t], [""]
                for m in ms:
                    c = m["fit"]["coefficients"].get(t)
                    est.append("" if c is None else f"{c['estimate']:.3f}")
                    se.append("" if c is None else f"({c['se']:.3f})")
                w.writerow(est)
                w.writerow(se)
            w.writerow(["Observations"] + [m["fit"]["n_obs"] for m in ms])
            w.writerow([])
