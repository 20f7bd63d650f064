"""Command-line entry point: ``equidist <command> ...``.

Exit status is 0 on success, 1 on invalid input and 2 when ``--strict`` is
given and a fit fails to converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bym import GammaPrior, McmcConfig, fit_bym_arrays
from .errors import ConvergenceError, NoCandidateError, ValidationError
from .mlm import EJAttribute, ModelSpec, design_matrix
from .moran import MoranNull, morans_i
from .neighbors import NeighborConfig, build_graph
from .synth import Preset, SynthConfig, generate

log = logging.getLogger("equidist")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; 2 is reserved for convergence failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _region(value):
    if value == "us":
        return value
    try:
        r = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"region must be 'us' or 1-10, got {value!r}") from None
    if not 1 <= r <= 10:
        raise argparse.ArgumentTypeError(f"region must be 'us' or 1-10, got {value!r}")
    return r


def _graph_args(p):
    p.add_argument("--graph-scheme", choices=["threshold", "knn"], default="threshold")
    p.add_argument("--k", type=int, default=5, help="neighbours per tract for knn")
    p.add_argument("--threshold-m", type=float, default=None,
                   help="distance threshold in meters (default: max nearest-neighbour distance)")


def _graph_cfg(args):
    return NeighborConfig(args.graph_scheme, args.k, args.threshold_m)


def _load_analysis_table(args):
    """Tract table with distances; computes them when a monitor file is given."""
    tracts, report = pipeline.load_tracts(args.tracts)
    if getattr(args, "monitors", None):
        monitors, _ = pipeline.load_monitors(args.monitors)
        tracts, _ = pipeline.compute_distances(tracts, monitors)
    elif "log_distance" not in tracts or tracts["log_distance"].isna().any():
        raise ValidationError("tract table has no log_distance; pass --monitors or run "
                              "'equidist distances' first")
    return tracts, report


def _write_json(obj, path):
    text = json.dumps(pipeline._clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_distances(args):
    tracts, monitors, report = pipeline.ingest(args.tracts, args.monitors)
    out, notes = pipeline.compute_distances(tracts, monitors)
    pipeline.write_tracts_csv(out, args.out)
    summary = {"rows_in": report.rows_in, "rows_kept": report.rows_kept,
               "excluded": report.excluded, "notes": report.notes, "distance_notes": notes}
    if args.report:
        _write_json(summary, args.report)
    log.info("wrote %d tracts to %s (excluded %d)", len(out), args.out, report.rows_excluded)
    return EXIT_OK


def cmd_fit(args):
    tracts, ingest_report = _load_analysis_table(args)
    regions = tuple(args.region) if args.region else pipeline.REGIONS
    strata = tuple(args.stratum) if args.stratum else ("urban", "rural")
    specs = pipeline.build_suite(pipeline.SuiteConfig(args.suite, strata, regions))
    options = pipeline.RunOptions(
        run_moran=args.moran, run_bym=args.bym, graph=_graph_cfg(args),
        residuals=args.residuals, pm25_scope=args.pm25_scope, keep_residuals=True,
        run_apportionment=args.apportionment,
        mcmc=McmcConfig(args.chains, args.iters, args.burn_in, seed=args.seed),
    )
    report = pipeline.run_suite(specs, tracts, options, provenance={
        "seed": args.seed,
        "ingest": {"rows_in": ingest_report.rows_in, "rows_kept": ingest_report.rows_kept,
                   "excluded": ingest_report.excluded},
    })
    pipeline.write_report(report, args.out)
    if args.coef_csv:
        pipeline.write_coefficient_csv(report, args.coef_csv)
    ok = sum(m["status"] == "ok" for m in report["models"])
    log.info("%d of %d models fitted; report in %s", ok, len(report["models"]), args.out)
    if args.strict:
        bad = [m["key"] for m in report["models"]
               if (m["status"] == "ok" and not m["fit"]["converged"])
               or (m["status"] == "skipped" and "converge" in m["skip_reason"])
               or (m.get("bym", {}).get("converged") is False)]
        if bad:
            raise NotConverged(f"not converged: {', '.join(bad)}")
    return EXIT_OK


def cmd_moran(args):
    fit_report = json.loads(Path(args.fit).read_text())
    tracts, _ = pipeline.load_tracts(args.tracts)
    row_of = {t: i for i, t in enumerate(tracts["tract_id"])}
    cfg = _graph_cfg(args)
    null = MoranNull(args.null)
    results, graphs = [], {}
    for m in fit_report["models"]:
        entry = {"key": m["key"]}
        res = m.get("residuals")
        if m["status"] != "ok" or res is None:
            entry.update(status="skipped", skip_reason="no stored residuals")
            results.append(entry)
            continue
        try:
            rows = np.array([row_of[t] for t in res["tract_id"]])
        except KeyError as exc:
            raise ValidationError(f"tract {exc.args[0]!r} from the fit report is not in "
                                  f"{args.tracts}") from None
        stratum = m["stratum"]
        if stratum not in graphs:
            sub = tracts.iloc[rows]
            graphs[stratum] = build_graph(
                (sub["lat"].to_numpy(float), sub["lon"].to_numpy(float)), cfg,
                ids=sub["tract_id"].tolist())
            if args.edges_out:
                Path(args.edges_out).mkdir(parents=True, exist_ok=True)
                name = stratum.replace("/", "_") + ".csv"
                graphs[stratum].write_edge_list(Path(args.edges_out) / name)
        graph = graphs[stratum]
        r = morans_i(np.asarray(res[args.residuals], dtype=float), graph, null)
        entry.update(status="ok", stratum=stratum, graph=graph.meta, n_edges=graph.n_edges,
                     **r.as_dict())
        results.append(entry)
    _write_json({"residuals": args.residuals, "null": null.value, "results": results}, args.out)
    return EXIT_OK


def cmd_bym(args):
    tracts, _ = _load_analysis_table(args)
    spec = ModelSpec.for_attribute(EJAttribute(args.attribute), args.suite, args.stratum,
                                   args.region)
    data = pipeline.prepare(tracts)
    sub = data.loc[pipeline.stratum_mask(data, spec.urbanicity, spec.region)]
    sub = sub.reset_index(drop=True)
    if len(sub) == 0:
        raise ValidationError(f"stratum {spec.stratum} is empty")
    graph = build_graph((sub["lat"].to_numpy(float), sub["lon"].to_numpy(float)),
                        _graph_cfg(args), ids=sub["tract_id"].tolist())
    y, X, names = design_matrix(spec, sub)
    prior = GammaPrior(args.prior_shape, args.prior_rate)
    priors = {k: prior for k in ("state", "county", "v", "u", "resid")}
    mcmc = McmcConfig(args.chains, args.iters, args.burn_in, args.thin, args.seed, args.jobs)
    fit = fit_bym_arrays(y, X, sub["state_id"].to_numpy(), sub["county_id"].to_numpy(), graph,
                         names, priors, mcmc, separate_noise=args.separate_noise)
    _write_json({"key": spec.key, "graph": graph.meta, **fit.summary()}, args.out)
    if args.draws_out:
        fit.write_draws(args.draws_out)
    if args.strict and not fit.converged:
        raise NotConverged(f"split R-hat above threshold: {fit.rhat}")
    return EXIT_OK


def cmd_synth(args):
    cfg = SynthConfig(Preset(args.preset), n_states=args.states,
                      counties_per_state=args.counties, tracts_per_county=args.tracts_per_county,
                      grid_side=args.grid_side, seed=args.seed)
    tracts, monitors, truth = generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_tracts_csv(tracts, out / "tracts.csv")
    pipeline.write_monitors_csv(monitors, out / "monitors.csv")
    if "graph" in truth:
        truth.pop("graph").write_edge_list(out / "graph_edges.csv")
    _write_json(truth, out / "truth.json")
    log.info("wrote %d tracts and %d monitors to %s", len(tracts), len(monitors), out)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="equidist", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distances", help="nearest-monitor distances for each tract")
    d.add_argument("--tracts", required=True)
    d.add_argument("--monitors", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--report", help="write the ingestion report as JSON")
    d.set_defaults(func=cmd_distances)

    f = sub.add_parser("fit", help="fit the mixed-model suite")
    f.add_argument("--tracts", required=True)
    f.add_argument("--monitors", help="compute distances first")
    f.add_argument("--suite", choices=["main", "sensitivity"], default="main")
    f.add_argument("--stratum", choices=["urban", "rural"], action="append")
    f.add_argument("--region", type=_region, action="append")
    f.add_argument("--out", required=True)
    f.add_argument("--coef-csv")
    f.add_argument("--moran", action="store_true", help="test each fit's residuals")
    f.add_argument("--bym", action="store_true", help="fit BYM where Moran's I is significant")
    f.add_argument("--apportionment", action="store_true")
    f.add_argument("--residuals", choices=["conditional", "marginal"], default="conditional")
    f.add_argument("--pm25-scope", choices=["sample", "stratum"], default="sample")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--iters", type=int, default=5000)
    f.add_argument("--burn-in", type=int, default=2500)
    f.add_argument("--strict", action="store_true")
    _graph_args(f)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("moran", help="Moran's I on residuals stored in a fit report")
    m.add_argument("--fit", required=True)
    m.add_argument("--tracts", required=True)
    m.add_argument("--residuals", choices=["conditional", "marginal"], default="conditional")
    m.add_argument("--null", choices=["randomization", "normality"], default="randomization")
    m.add_argument("--edges-out", help="directory for per-stratum edge lists")
    m.add_argument("--out", default="-")
    _graph_args(m)
    m.set_defaults(func=cmd_moran)

    b = sub.add_parser("bym", help="BYM spatial-error model for one spec")
    b.add_argument("--tracts", required=True)
    b.add_argument("--monitors")
    b.add_argument("--attribute", choices=[a.value for a in EJAttribute],
                   default=EJAttribute.POVERTY.value)
    b.add_argument("--suite", choices=["main", "sensitivity"], default="main")
    b.add_argument("--stratum", choices=["urban", "rural"], default="rural")
    b.add_argument("--region", type=_region, default="us")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--chains", type=int, default=4)
    b.add_argument("--iters", type=int, default=5000)
    b.add_argument("--burn-in", type=int, default=2500)
    b.add_argument("--thin", type=int, default=1)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--prior-shape", type=float, default=1.0)
    b.add_argument("--prior-rate", type=float, default=0.0005)
    b.add_argument("--separate-noise", action="store_true")
    b.add_argument("--out", default="-")
    b.add_argument("--draws-out")
    b.add_argument("--strict", action="store_true")
    _graph_args(b)
    b.set_defaults(func=cmd_bym)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--preset", choices=[x.value for x in Preset], default="nested")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--states", type=int, default=40)
    s.add_argument("--counties", type=int, default=8)
    s.add_argument("--tracts-per-county", type=int, default=25)
    s.add_argument("--grid-side", type=int, default=10)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage error or --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, NoCandidateError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NotConverged, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED if getattr(args, "strict", False) else EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
