#!/usr/bin/env python3
"""Run the full demo pipeline into an output directory.

Drives the ``stsae`` command line end to end on the bundled synthetic
survey: simulation, person-month expansion, direct estimation, pooling,
national smoothing, benchmarking, ratio adjustment, area-level and
cluster-level smoothing, prediction, and every report artifact.  Each
stage reads only files written by earlier stages, so the directory
doubles as a worked example of the on-disk interfaces.

Example:
    python3 scripts/run_pipeline.py --out /tmp/stsae-demo --seed 4
"""

import argparse
import json
import sys
import time
from pathlib import Path

import pandas as pd

from stsae import cli
from stsae.demo import DEMO_PERIODS, DEMO_REGIONS


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=4)
    parser.add_argument("--draws", type=int, default=400, help="kept draws per chain")
    parser.add_argument("--burnin", type=int, default=400)
    parser.add_argument("--chains", type=int, default=2)
    parser.add_argument("--month-cuts", default="12,60",
                        help="age-band ends in months (comma-separated)")
    parser.add_argument("--config", default=str(Path(__file__).with_name("demo_config.json")),
                        help="model spec JSON")
    parser.add_argument("--benchmark-factor", type=float, default=0.92,
                        help="synthetic target series as a fraction of the fitted medians")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = lambda name: str(out / name)  # noqa: E731 - terse path helper

    def run(*argv_stage):
        stage = argv_stage[0]
        started = time.perf_counter()
        code = cli.main([str(a) for a in argv_stage])
        print(f"{stage:16s} exit={code}  {time.perf_counter() - started:6.1f}s", flush=True)
        if code != 0:
            raise SystemExit(f"stage {stage!r} failed with exit code {code}")

    sampler = ("--draws", args.draws, "--burnin", args.burnin,
               "--chains", args.chains, "--seed", args.seed)
    cuts = ("--month-cuts", args.month_cuts)

    run("simulate", "--children-out", path("children.csv"), "--truth-out", path("truth.csv"),
        "--geo-out", path("geo.json"), "--seed", args.seed, *cuts)
    run("births", "--children", path("children.csv"), "--out", path("person_months.csv"), *cuts)
    run("counts", "--person-months", path("person_months.csv"), "--out", path("counts.csv"))
    run("direct", "--person-months", path("person_months.csv"), "--out", path("direct.csv"), *cuts)
    run("aggregate", "--direct", path("direct.csv"), "--out", path("pooled.csv"))

    run("smooth-direct", "--direct", path("pooled.csv"), "--national",
        "--out", path("fit_national"), "--config", args.config, *sampler)
    national = pd.read_csv(out / "fit_national" / "estimates.csv")
    target = national[["years"]].assign(mean=national["median"] * args.benchmark_factor)
    target.to_csv(path("target.csv"), index=False)
    run("benchmark", "--estimates", str(out / "fit_national" / "estimates.csv"),
        "--target", path("target.csv"), "--out", path("ratios.csv"))
    run("adjust", "--direct", path("pooled.csv"), "--ratios", path("ratios.csv"),
        "--invert", "--out", path("adjusted.csv"))

    run("smooth-direct", "--direct", path("adjusted.csv"), "--geo", path("geo.json"),
        "--out", path("fit_area"), "--config", args.config, *sampler)
    run("smooth-cluster", "--counts", path("counts.csv"), "--geo", path("geo.json"),
        "--out", path("fit_cluster"), "--config", args.config, *sampler, *cuts)

    props = pd.DataFrame(
        [{"region": region, "years": period, "q_urban": 0.33}
         for region in DEMO_REGIONS for period in DEMO_PERIODS]
    )
    props.to_csv(path("props.csv"), index=False)
    run("predict", "--fit", path("fit_cluster"), "--out", path("estimates.csv"),
        "--draws-out", path("draws.csv"), "--props", path("props.csv"))
    run("diag", "--fit", path("fit_cluster"), "--field", "time", "--out", path("diag_time.csv"))

    estimates = pd.read_csv(path("estimates.csv"))
    estimates[estimates["stratum"] == "overall"].to_csv(path("overall.csv"), index=False)
    run("map", "--estimates", path("overall.csv"), "--geo", path("geo.json"),
        "--out", path("map.svg"), "--per-1000", "--title", "U5MR")
    run("hatch", "--estimates", path("overall.csv"), "--geo", path("geo.json"),
        "--out", path("hatch.svg"), "--per-1000", "--title", "U5MR uncertainty")
    run("ridge", "--draws", path("draws.csv"), "--out", path("ridge.svg"), "--per-1000")
    run("tcp", "--draws", path("draws.csv"), "--out", path("tcp.json"), "--k", 4)

    tcp = json.loads((out / "tcp.json").read_text())
    print(f"done: {len(list(out.iterdir()))} artifacts in {out}  "
          f"(ATCP {tcp['atcp']:.3f} over {len(tcp['assignments'])} cells)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
