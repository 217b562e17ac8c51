"""Command-line pipeline driver.

Each subcommand reads and writes the CSV/JSON/SVG interfaces of the
package so stages compose: simulate -> births -> counts/direct ->
aggregate/adjust -> smooth-direct/smooth-cluster -> predict ->
benchmark/diag/map/hatch/ridge/tcp.  Runtime failures print a
machine-readable JSON object on stderr and exit 1; usage errors exit 2
with argparse's usage text.  ``--seed`` falls back to the ``STSAE_SEED``
environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import demo, models, reports
from .direct import JackknifeConfig, adjust_ratio, aggregate_surveys, direct_all
from .gmrf import build_graph
from .models import (
    FitResult,
    LatentModelSpec,
    U5MRDraws,
    aggregate_strata,
    benchmark_to_series,
    build_smooth_cluster,
    build_smooth_direct,
    extract_diagnostics,
    fit_smooth_cluster,
    fit_smooth_direct,
    load_fit,
    predict_u5mr,
    save_fit,
    smooth_direct_estimates,
    spec_from_json,
)
from .survey import AgeBandSchema, aggregate_counts, expand_births, simulate_survey

__all__ = ["main"]


def _default_seed() -> int:
    return int(os.environ.get("STSAE_SEED", "0"))


def _int_list(text: str):
    return [int(v) for v in str(text).split(",") if v != ""]


def _str_list(text: str):
    return [v for v in str(text).split(",") if v != ""]


def _schema_from_args(args) -> AgeBandSchema:
    cuts = tuple(_int_list(args.month_cuts))
    groups = tuple(_int_list(args.trend_groups)) if args.trend_groups else None
    return AgeBandSchema(month_cuts=cuts, trend_groups=groups)


def _add_schema_flags(parser):
    parser.add_argument("--month-cuts", default="1,12,24,36,48,60",
                        help="comma-separated age band ends in months")
    parser.add_argument("--trend-groups", default=None,
                        help="comma-separated trend group index per band")


def _add_window_flags(parser):
    parser.add_argument("--year-cuts", default=",".join(str(c) for c in demo.DEMO_YEAR_CUTS),
                        help="comma-separated calendar month boundaries")
    parser.add_argument("--period-labels", default=",".join(demo.DEMO_PERIODS),
                        help="comma-separated period labels")


def _add_sampler_flags(parser):
    parser.add_argument("--draws", type=int, default=1000, help="kept draws per chain")
    parser.add_argument("--burnin", type=int, default=1000, help="discarded draws per chain")
    parser.add_argument("--chains", type=int, default=4, help="number of chains")
    parser.add_argument("--seed", type=int, default=None, help="random seed (env STSAE_SEED)")


def _add_spec_flags(parser):
    parser.add_argument("--config", default=None, help="model spec JSON file")
    parser.add_argument("--time-model", choices=models.TEMPORAL_MODELS, default=None)
    parser.add_argument("--st-time-model", choices=models.TEMPORAL_MODELS, default=None)
    parser.add_argument("--interaction", default=None,
                        help="space-time interaction type I/II/III/IV or none")
    parser.add_argument("--yearly", action="store_true", default=None,
                        help="model time at the yearly level inside periods")
    parser.add_argument("--m", type=int, default=None, help="years per period in yearly mode")
    parser.add_argument("--survey-effect", action="store_true", default=None)
    parser.add_argument("--strata-time-invariant", action="store_true", default=None)


def _spec_from_args(args) -> LatentModelSpec:
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise ValueError("model config must be a JSON object")
    overrides = {
        "time.model": args.time_model,
        "st.time.model": args.st_time_model,
        "type.st": args.interaction,
        "is.yearly": args.yearly,
        "m": args.m,
        "survey.effect": args.survey_effect,
        "strata.time.invariant": args.strata_time_invariant,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    if str(config.get("type.st", "")).lower() == "none":
        config["type.st"] = None
    return spec_from_json(config)


def _graph_from_args(args):
    if getattr(args, "national", False):
        return None
    if not args.geo:
        raise ValueError("provide --geo GEOJSON/CSV or --national")
    return build_graph(args.geo)


def _seed_from_args(args) -> int:
    return _default_seed() if args.seed is None else int(args.seed)


def _read_u5mr_draws(path) -> U5MRDraws:
    frame = pd.read_csv(path)
    cells = []
    for column in frame.columns:
        parts = column.split("|")
        if len(parts) != 3:
            raise ValueError(
                f"draw column {column!r} is not 'region|years|stratum'"
            )
        cells.append({"region": parts[0], "years": parts[1], "stratum": parts[2]})
    return U5MRDraws(pd.DataFrame(cells), frame.to_numpy(dtype=float))


def _write_u5mr_draws(draws: U5MRDraws, path):
    columns = [
        f"{r}|{y}|{s}"
        for r, y, s in zip(draws.cells["region"], draws.cells["years"], draws.cells["stratum"])
    ]
    pd.DataFrame(draws.values, columns=columns).to_csv(path, index=False, float_format="%.17g")


def _emit_warnings(messages):
    for message in messages:
        print(json.dumps({"warning": str(message)}), file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_simulate(args):
    design = demo.demo_design(_schema_from_args(args))
    children, truth = simulate_survey(demo.demo_truth(design.schema), design, seed=_seed_from_args(args))
    children.to_csv(args.children_out, index=False)
    if args.truth_out:
        truth.to_csv(args.truth_out, index=False)
    if args.geo_out:
        Path(args.geo_out).write_text(json.dumps(demo.demo_geojson(), indent=1, sort_keys=True))
    return 0


def _cmd_births(args):
    children = pd.read_csv(args.children)
    pm = expand_births(children, _schema_from_args(args), _int_list(args.year_cuts),
                       _str_list(args.period_labels))
    pm.to_csv(args.out, index=False)
    return 0


def _cmd_counts(args):
    pm = pd.read_csv(args.person_months)
    by = ("clustid", "region", "time", "age") + tuple(_str_list(args.by))
    aggregate_counts(pm, by=by).to_csv(args.out, index=False)
    return 0


def _cmd_direct(args):
    tables = {}
    for item in args.person_months:
        if "=" in item:
            label, path = item.split("=", 1)
            tables[label] = pd.read_csv(path)
        else:
            tables[None] = pd.read_csv(item)
    data = tables[None] if list(tables) == [None] else tables
    regions = _str_list(args.regions) if args.regions else list(demo.DEMO_REGIONS)
    periods = _str_list(args.periods) if args.periods else list(demo.DEMO_PERIODS)
    jackknife = None if args.no_variance else JackknifeConfig()
    out = direct_all(data, regions=regions, periods=periods,
                     schema=_schema_from_args(args), jackknife=jackknife)
    out.to_csv(args.out, index=False)
    return 0


def _cmd_aggregate(args):
    aggregate_surveys(pd.read_csv(args.direct)).to_csv(args.out, index=False)
    return 0


def _cmd_adjust(args):
    adjusted, warnings_list = adjust_ratio(
        pd.read_csv(args.direct), pd.read_csv(args.ratios), invert=args.invert
    )
    _emit_warnings(warnings_list)
    adjusted.to_csv(args.out, index=False)
    return 0


def _cmd_smooth_direct(args):
    direct = pd.read_csv(args.direct)
    graph = _graph_from_args(args)
    spec = _spec_from_args(args)
    fit = fit_smooth_direct(direct, graph, spec, seed=_seed_from_args(args),
                            n_draws=args.draws, n_burnin=args.burnin, n_chains=args.chains)
    out = Path(args.out)
    save_fit(fit, out)
    smooth_direct_estimates(fit).to_csv(out / "estimates.csv", index=False)
    return 0


def _cmd_smooth_cluster(args):
    counts = pd.read_csv(args.counts)
    graph = _graph_from_args(args)
    spec = _spec_from_args(args)
    schema = _schema_from_args(args)
    fit = fit_smooth_cluster(counts, graph, spec, schema, seed=_seed_from_args(args),
                             n_draws=args.draws, n_burnin=args.burnin, n_chains=args.chains)
    save_fit(fit, Path(args.out))
    return 0


def _cmd_predict(args):
    fit = load_fit(args.fit)
    draws = predict_u5mr(fit, include_time_iid=args.include_time_iid)
    stratified = {"urban", "rural"} <= set(draws.cells["stratum"])
    if stratified:
        if args.props:
            overall = aggregate_strata(draws, pd.read_csv(args.props), frame=args.frame)
        else:
            _emit_warnings(["no strata proportions given; overall estimates are empty"])
            overall = aggregate_strata(draws, None)
        tables = [draws.summarize()]
        if len(overall.cells):
            tables.append(overall.summarize())
        estimates = pd.concat(tables, ignore_index=True)
        draws_out = overall if len(overall.cells) else draws
    else:
        estimates = draws.summarize()
        draws_out = draws
    if args.draws_out:
        _write_u5mr_draws(draws_out, args.draws_out)
    estimates.to_csv(args.out, index=False)
    return 0


def _cmd_benchmark(args):
    estimates = pd.read_csv(args.estimates)
    if "region" in estimates.columns:
        estimates = estimates[estimates["region"].isin(["All", "overall"])]
        if estimates.empty:
            raise ValueError(
                "estimates contain no national rows (region 'All'); "
                "benchmark a national fit"
            )
    ratios, warnings_list = benchmark_to_series(estimates, pd.read_csv(args.target))
    _emit_warnings(warnings_list)
    ratios.to_csv(args.out, index=False)
    return 0


def _cmd_diag(args):
    extract_diagnostics(load_fit(args.fit), args.field).to_csv(args.out, index=False)
    return 0


def _cmd_map(args):
    estimates = pd.read_csv(args.estimates)
    svg = reports.render_map(
        estimates, args.geo, facets=_str_list(args.facets) if args.facets else None,
        value_col=args.value_col, per_1000=args.per_1000, title=args.title,
    )
    Path(args.out).write_bytes(svg)
    return 0


def _cmd_hatch(args):
    estimates = pd.read_csv(args.estimates)
    svg = reports.render_hatch(
        estimates, args.geo, facets=_str_list(args.facets) if args.facets else None,
        value_col=args.value_col, per_1000=args.per_1000, title=args.title,
        scale=args.scale,
    )
    Path(args.out).write_bytes(svg)
    return 0


def _cmd_ridge(args):
    draws = _read_u5mr_draws(args.draws)
    svg = reports.render_ridge(
        draws, order_year=args.order_year, by=args.by,
        bandwidth=args.bandwidth, per_1000=args.per_1000, title=args.title,
    )
    Path(args.out).write_bytes(svg)
    return 0


def _cmd_tcp(args):
    draws = _read_u5mr_draws(args.draws)
    thresholds = [float(v) for v in _str_list(args.thresholds)] if args.thresholds else None
    result = reports.tcp_classify(
        draws, k=args.k, thresholds=thresholds,
        years=_str_list(args.years) if args.years else None,
    )
    payload = {
        "thresholds": [float(t) for t in result.thresholds],
        "atcp": result.atcp,
        "n_draws": result.n_draws,
        "assignments": result.assignments.to_dict(orient="records"),
    }
    Path(args.out).write_text(json.dumps(payload, indent=1))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stsae",
        description="Small-area space-time estimation of under-five mortality",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write the bundled synthetic survey")
    p.add_argument("--children-out", required=True)
    p.add_argument("--truth-out", default=None)
    p.add_argument("--geo-out", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_schema_flags(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("births", help="expand child records to person-months")
    p.add_argument("--children", required=True)
    p.add_argument("--out", required=True)
    _add_schema_flags(p)
    _add_window_flags(p)
    p.set_defaults(func=_cmd_births)

    p = sub.add_parser("counts", help="aggregate person-months to cluster counts")
    p.add_argument("--person-months", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--by", default="strata", help="extra grouping columns, comma-separated")
    p.set_defaults(func=_cmd_counts)

    p = sub.add_parser("direct", help="design-based direct estimates")
    p.add_argument("--person-months", required=True, nargs="+",
                   help="person-month CSV path(s); label multi-survey input as name=path")
    p.add_argument("--out", required=True)
    p.add_argument("--regions", default=None)
    p.add_argument("--periods", default=None)
    p.add_argument("--no-variance", action="store_true",
                   help="skip the jackknife; emit means and logits only")
    _add_schema_flags(p)
    p.set_defaults(func=_cmd_direct)

    p = sub.add_parser("aggregate", help="pool direct estimates across surveys")
    p.add_argument("--direct", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("adjust", help="apply ratio adjustments to direct estimates")
    p.add_argument("--direct", required=True)
    p.add_argument("--ratios", required=True)
    p.add_argument("--invert", action="store_true", help="divide by the ratio instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_adjust)

    p = sub.add_parser("smooth-direct", help="area-level smoothing of direct estimates")
    p.add_argument("--direct", required=True)
    p.add_argument("--geo", default=None)
    p.add_argument("--national", action="store_true")
    p.add_argument("--out", required=True, help="fit bundle directory")
    _add_spec_flags(p)
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_smooth_direct)

    p = sub.add_parser("smooth-cluster", help="cluster-level beta-binomial smoothing")
    p.add_argument("--counts", required=True)
    p.add_argument("--geo", default=None)
    p.add_argument("--national", action="store_true")
    p.add_argument("--out", required=True, help="fit bundle directory")
    _add_spec_flags(p)
    _add_sampler_flags(p)
    _add_schema_flags(p)
    p.set_defaults(func=_cmd_smooth_cluster)

    p = sub.add_parser("predict", help="per-draw U5MR from a cluster fit")
    p.add_argument("--fit", required=True, help="fit bundle directory")
    p.add_argument("--out", required=True, help="estimates CSV")
    p.add_argument("--draws-out", default=None, help="per-draw U5MR CSV")
    p.add_argument("--props", default=None, help="strata proportions CSV")
    p.add_argument("--frame", default=None)
    p.add_argument("--include-time-iid", action="store_true")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("benchmark", help="ratio of national medians to a target series")
    p.add_argument("--estimates", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("diag", help="labeled posterior effect summaries")
    p.add_argument("--fit", required=True)
    p.add_argument("--field", required=True, choices=["time", "space", "spacetime"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_diag)

    for name, helptext in (("map", "choropleth SVG"), ("hatch", "uncertainty-hatched SVG")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--estimates", required=True)
        p.add_argument("--geo", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--value-col", default="median")
        p.add_argument("--facets", default=None)
        p.add_argument("--per-1000", action="store_true")
        p.add_argument("--title", default="")
        if name == "hatch":
            p.add_argument("--scale", type=float, default=100.0)
            p.set_defaults(func=_cmd_hatch)
        else:
            p.set_defaults(func=_cmd_map)

    p = sub.add_parser("ridge", help="ridgeline SVG of posterior densities")
    p.add_argument("--draws", required=True, help="per-draw U5MR CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--order-year", default=None)
    p.add_argument("--by", choices=["year", "region"], default="year")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--per-1000", action="store_true")
    p.add_argument("--title", default="")
    p.set_defaults(func=_cmd_ridge)

    p = sub.add_parser("tcp", help="true classification probabilities")
    p.add_argument("--draws", required=True, help="per-draw U5MR CSV")
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--thresholds", default=None)
    p.add_argument("--years", default=None)
    p.set_defaults(func=_cmd_tcp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
