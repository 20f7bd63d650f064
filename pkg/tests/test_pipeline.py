import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from equidist import _backend
from equidist.errors import ValidationError
from equidist.mlm import EJAttribute
from equidist.pipeline import (RunOptions, SuiteConfig, build_suite, compute_distances,
                               dumps_report, ingest, load_tracts, prepare, run_suite,
                               stratum_mask, write_coefficient_csv, write_tracts_csv, zscore)
from equidist.synth import SynthConfig, generate

GOLDEN = Path(__file__).parent / "data" / "report_schema.json"

HEADER = ("tract_id,county_id,state_id,lat,lon,population,area_km2,urban,prop_aian,prop_asian,"
          "prop_black,prop_hispanic,prop_white,prop_poverty,median_income,pm25\n")


def row(tid, pop=1000, state="06", poverty="0.10", white="0.5", lat="34.0", lon="-118.0"):
    return (f"{tid},06037,{state},{lat},{lon},{pop},2.5,1,0.01,0.1,0.1,0.28,{white},"
            f"{poverty},55000,9.5\n")


MONITORS = "monitor_id,county_id,lat,lon,active\nM1,06037,34.1,-118.1,1\nM2,06037,34.5,-118.5,0\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_population_filter_and_accounting(tmp_path):
    t = write(tmp_path, "t.csv", HEADER + row("A") + row("B", pop=99) + row("C", poverty="")
              + row("D", pop=100))
    m = write(tmp_path, "m.csv", MONITORS)
    tracts, monitors, rep = ingest(t, m)
    assert list(tracts["tract_id"]) == ["A", "D"]
    assert rep.excluded["population_lt_100"] == 1
    assert rep.excluded["missing_demographics"] == 1
    assert rep.rows_in == rep.rows_kept + rep.rows_excluded == 4
    assert (tracts["population"] >= 100).all()
    assert list(monitors["monitor_id"]) == ["M1"]  # inactive dropped
    assert tracts["epa_region"].tolist() == [9, 9]  # from state FIPS 06
    np.testing.assert_allclose(tracts["prop_nonwhite"], 1 - tracts["prop_white"])


def test_no_active_monitors(tmp_path):
    t = write(tmp_path, "t.csv", HEADER + row("A"))
    with pytest.raises(ValidationError, match="no active monitors"):
        ingest(t, write(tmp_path, "m.csv", "monitor_id,county_id,lat,lon,active\n"))
    with pytest.raises(ValidationError, match="no active monitors"):
        ingest(t, write(tmp_path, "m2.csv",
                        "monitor_id,county_id,lat,lon,active\nM1,1,0.0,0.0,0\n"))


@pytest.mark.parametrize("bad, msg", [
    (row("B").replace(",1000,", ",1000,7,"), "line 3"),
    (row("B", pop="many"), "line 3"),
    (row("A"), "duplicated tract_id"),
    (row("B", white="1.2"), "line 3"),
    (row("B", lat="95"), "line 3"),
])
def test_malformed_rows(tmp_path, bad, msg):
    t = write(tmp_path, "t.csv", HEADER + row("A") + bad)
    with pytest.raises(ValidationError, match=msg):
        load_tracts(t)


def test_missing_required_column(tmp_path):
    t = write(tmp_path, "t.csv", HEADER.replace("urban,", "") + "x\n")
    with pytest.raises(ValidationError, match="urban"):
        load_tracts(t)


def test_nonwhite_consistency(tmp_path):
    h = HEADER.replace("prop_white,", "prop_white,prop_nonwhite,")
    r = row("A").replace(",0.5,", ",0.5,0.4,")
    with pytest.raises(ValidationError, match="prop_nonwhite"):
        load_tracts(write(tmp_path, "t.csv", h + r))


def test_canonical_round_trip(tmp_path):
    messy = HEADER + row("A", poverty="0.100", lat=" 34.00") + row("B", poverty="1e-1")
    t = write(tmp_path, "t.csv", messy)
    first, _ = load_tracts(t)
    out1 = tmp_path / "c1.csv"
    write_tracts_csv(first, out1)
    second, _ = load_tracts(out1)
    out2 = tmp_path / "c2.csv"
    write_tracts_csv(second, out2)
    assert out1.read_bytes() == out2.read_bytes()
    assert "0.1," in out1.read_text()
    pd.testing.assert_frame_equal(first, second)


def toy_tables():
    t, m, truth = generate(SynthConfig("toy"))
    t["population"] = 1000
    return t, m


def brute(lat, lon, ids, mlat, mlon):
    hav = _backend.kernels.haversine_scalar
    return min((hav(lat, lon, a, b), i) for i, a, b in zip(ids, mlat, mlon))


def test_toy_distances_equal_brute_force(backend):
    t, m = toy_tables()
    out, notes = compute_distances(t, m)
    for k in range(3):
        d, mid = brute(t.lat[k], t.lon[k], m.monitor_id, m.lat, m.lon)
        assert out.distance_m[k] == d and out.nearest_monitor_id[k] == mid
    # T1 sits on M1; T2 is equidistant from M1 and M2 and takes the smaller id
    assert out.distance_m[0] == 0.0 and out.log_distance[0] == 0.0
    assert out.nearest_monitor_id[1] == "M1"
    assert notes["floored_at_1m"] == 1
    # T3's county has no monitor: within-county distance absent, overall present
    assert math.isnan(out.distance_county_m[2]) and out.county_monitor_id[2] == ""
    assert out.distance_m[2] > 0 and notes["no_monitor_in_county"] == 1
    assert out.distance_county_m[0] == 0.0


def test_zscore():
    np.testing.assert_allclose(zscore([1, 2, 3]), [-1, 0, 1], rtol=0, atol=1e-15)
    x = np.random.default_rng(0).lognormal(size=500)
    z = zscore(x)
    assert abs(z.mean()) <= 1e-12 and abs(z.std(ddof=1) - 1) <= 1e-12
    np.testing.assert_allclose(zscore(z), z, atol=1e-12)
    with pytest.raises(ValidationError):
        zscore([2.0, 2.0, 2.0])
    with pytest.raises(ValidationError):
        zscore([1.0])


def test_default_suite_has_132_specs():
    specs = build_suite()
    assert len(specs) == 132
    assert len({s.key for s in specs}) == 132
    assert {s.ej_attribute for s in specs} == {EJAttribute.POVERTY, EJAttribute.AIAN,
                                               EJAttribute.ASIAN, EJAttribute.BLACK,
                                               EJAttribute.HISPANIC, EJAttribute.WHITE}
    pov = next(s for s in specs if s.ej_attribute is EJAttribute.POVERTY)
    assert "prop_nonwhite" in pov.covariates and "prop_white" not in pov.covariates
    black = next(s for s in specs if s.ej_attribute is EJAttribute.BLACK)
    assert {"prop_white", "prop_poverty"} <= set(black.covariates)


def test_sensitivity_suite_swaps_income():
    specs = build_suite(SuiteConfig("sensitivity"))
    assert len(specs) == 132
    assert all("prop_poverty" not in s.covariates for s in specs)
    assert EJAttribute.INCOME in {s.ej_attribute for s in specs}


def test_unknown_region():
    with pytest.raises(ValidationError, match="region"):
        build_suite(SuiteConfig(regions=("us", 11)))
    with pytest.raises(ValidationError):
        SuiteConfig("other")


@pytest.fixture(scope="module")
def us_tracts():
    t, _, _ = generate(SynthConfig(n_states=20, counties_per_state=4, tracts_per_county=8,
                                   seed=3))
    return t


def test_strata_partition(us_tracts):
    data = prepare(us_tracts)
    regional = sum(stratum_mask(data, u, r).astype(int)
                   for u in ("urban", "rural") for r in range(1, 11))
    national = sum(stratum_mask(data, u, "us").astype(int) for u in ("urban", "rural"))
    assert (regional == 1).all() and (national == 1).all()


def test_run_suite_structure(us_tracts):
    specs = build_suite()
    rep = run_suite(specs, us_tracts, RunOptions(run_moran=True))
    assert [m["key"] for m in rep["models"]] == [s.key for s in specs]
    for m in rep["models"]:
        assert m["status"] in ("ok", "skipped")
        if m["status"] == "ok":
            assert m["fit"]["converged"] is True
            assert m["moran"]["status"] in ("ok", "skipped")
        else:
            assert m["skip_reason"]
    assert sum(m["status"] == "ok" for m in rep["models"]) >= 100


def test_options_off_gives_descriptives_only(us_tracts):
    rep = run_suite(build_suite(), us_tracts, RunOptions(run_models=False))
    assert rep["models"] == []
    assert rep["descriptives"]["all"]["n"] == len(us_tracts)
    assert "apportionment" not in rep


def test_byte_identical_reports(us_tracts):
    specs = build_suite(SuiteConfig(regions=("us", 1)))
    opts = RunOptions(run_moran=True, run_apportionment=True)
    a = dumps_report(run_suite(specs, us_tracts, opts))
    b = dumps_report(run_suite(specs, us_tracts.copy(), opts))
    assert a == b


def _schema(obj):
    if isinstance(obj, dict):
        return {k: _schema(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [_schema(obj[0])] if obj else []
    return type(obj).__name__


def report_for_golden():
    t, _, _ = generate(SynthConfig(n_states=4, counties_per_state=3, tracts_per_county=6,
                                   seed=11))
    t["urban"] = np.arange(len(t)) % 2 == 0
    spec = build_suite(SuiteConfig(urbanicity=("urban",), regions=("us",)))[:1]
    opts = RunOptions(run_moran=True, run_apportionment=True)
    return json.loads(dumps_report(run_suite(spec, t, opts)))


def test_report_schema_golden():
    got = _schema(report_for_golden())
    assert got == json.loads(GOLDEN.read_text())


def test_coefficient_csv(tmp_path, us_tracts):
    rep = run_suite(build_suite(SuiteConfig(urbanicity=("rural",), regions=("us",))), us_tracts)
    path = tmp_path / "coef.csv"
    write_coefficient_csv(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "main rural/us,AIAN,Asian,Black,Hispanic,PovertyProportion,White"
    assert lines[1].startswith("prop_poverty,") and lines[2].startswith(",(")
    assert lines[-2].startswith("Observations,")
    labels = [ln.split(",")[0] for ln in lines[1:-2:2]]
    assert labels[-1] == "intercept" and labels.index("pop_density") < labels.index("pm25_zscore")


def test_apportionment_models(us_tracts):
    t, m, _ = generate(SynthConfig(n_states=6, counties_per_state=4, tracts_per_county=8))
    d, _ = compute_distances(t, m)
    rep = run_suite([], d, RunOptions(run_apportionment=True))
    ap = rep["apportionment"]
    assert set(ap) == {"within_county_null", "within_county_adjusted", "nearest_null",
                       "nearest_adjusted"}
    within = ap["within_county_null"]
    assert within["n_obs"] == int(d["distance_county_m"].notna().sum())
    for v in ap.values():
        if v["status"] == "ok":
            assert abs(sum(v["apportionment"].values()) - 1.0) <= 1e-12
