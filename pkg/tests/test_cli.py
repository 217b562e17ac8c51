"""Tests for the command-line pipeline driver.

Most cases call ``stsae.cli.main`` in-process for speed; one subprocess
case checks the installed console script end to end.  Stage outputs are
built once per module and reused, mirroring how the stages compose on
disk in real use.
"""

import json
import shutil
import subprocess

import numpy as np
import pandas as pd
import pytest

from stsae import cli
from stsae.direct import DIRECT_COLUMNS

MONTH_CUTS = "12,60"  # two age bands keeps the pipeline fast


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> births -> counts -> direct, all through the CLI."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "children": root / "children.csv",
        "truth": root / "truth.csv",
        "geo": root / "geo.json",
        "pm": root / "person_months.csv",
        "counts": root / "counts.csv",
        "direct": root / "direct.csv",
        "root": root,
    }
    assert run_cli(
        "simulate", "--children-out", paths["children"], "--truth-out", paths["truth"],
        "--geo-out", paths["geo"], "--seed", 3, "--month-cuts", MONTH_CUTS,
    ) == 0
    assert run_cli(
        "births", "--children", paths["children"], "--out", paths["pm"],
        "--month-cuts", MONTH_CUTS,
    ) == 0
    assert run_cli(
        "counts", "--person-months", paths["pm"], "--out", paths["counts"],
    ) == 0
    assert run_cli(
        "direct", "--person-months", paths["pm"], "--out", paths["direct"],
        "--month-cuts", MONTH_CUTS,
    ) == 0
    return paths


@pytest.fixture(scope="module")
def fit_dir(pipeline):
    out = pipeline["root"] / "fit"
    code = run_cli(
        "smooth-direct", "--direct", pipeline["direct"], "--national",
        "--out", out, "--draws", 100, "--burnin", 100, "--chains", 2, "--seed", 11,
    )
    assert code == 0
    return out


class TestStages:
    def test_simulate_outputs(self, pipeline):
        children = pd.read_csv(pipeline["children"])
        assert len(children) > 100
        assert {"cluster", "region", "stratum", "weight", "birth"} <= set(children.columns)
        geo = json.loads(pipeline["geo"].read_text())
        assert geo["type"] == "FeatureCollection"
        assert len(geo["features"]) == 4

    def test_births_expand_to_person_months(self, pipeline):
        pm = pd.read_csv(pipeline["pm"])
        children = pd.read_csv(pipeline["children"])
        assert {"clustid", "region", "time", "age", "died", "weights"} <= set(pm.columns)
        assert len(pm) > len(children)
        assert set(pm["died"]) <= {0, 1}

    def test_counts_totals_match_person_months(self, pipeline):
        counts = pd.read_csv(pipeline["counts"])
        pm = pd.read_csv(pipeline["pm"])
        assert counts["total"].sum() == len(pm)
        assert counts["Y"].sum() == pm["died"].sum()

    def test_direct_table_layout(self, pipeline):
        direct = pd.read_csv(pipeline["direct"])
        assert list(direct.columns) == list(DIRECT_COLUMNS)
        # National rows precede regional ones.
        assert direct["region"].iloc[0] == "All"
        assert set(direct["years"]).issuperset({"85-89", "10-14"})
        observed = direct.dropna(subset=["mean"])
        assert ((observed["mean"] > 0) & (observed["mean"] < 1)).all()

    def test_aggregate_roundtrip(self, pipeline):
        out = pipeline["root"] / "aggregated.csv"
        assert run_cli("aggregate", "--direct", pipeline["direct"], "--out", out) == 0
        pooled = pd.read_csv(out)
        direct = pd.read_csv(pipeline["direct"])
        # One survey in, pooling returns one row per (region, period).
        assert len(pooled) == len(direct.drop_duplicates(["region", "years"]))

    def test_adjust_applies_ratio(self, pipeline, tmp_path):
        direct = pd.read_csv(pipeline["direct"])
        ratios_path = tmp_path / "ratios.csv"
        pd.DataFrame({"years": sorted(set(direct["years"])), "ratio": 1.0}).to_csv(
            ratios_path, index=False
        )
        out = tmp_path / "adjusted.csv"
        assert run_cli(
            "adjust", "--direct", pipeline["direct"], "--ratios", ratios_path,
            "--out", out,
        ) == 0
        adjusted = pd.read_csv(out)
        np.testing.assert_allclose(adjusted["mean"], direct["mean"], rtol=1e-12)


class TestSmoothDirect:
    def test_bundle_and_estimates(self, fit_dir):
        for name in ("draws.csv", "meta.json", "diagnostics.json", "estimates.csv"):
            assert (fit_dir / name).exists()
        estimates = pd.read_csv(fit_dir / "estimates.csv")
        assert {"region", "years", "median", "lower", "upper"} <= set(estimates.columns)
        assert (estimates["lower"] <= estimates["median"]).all()
        assert (estimates["median"] <= estimates["upper"]).all()
        diagnostics = json.loads((fit_dir / "diagnostics.json").read_text())
        assert diagnostics["seed"] == 11
        assert diagnostics["n_chains"] == 2

    def test_diag_time_effects(self, fit_dir, tmp_path):
        out = tmp_path / "time.csv"
        assert run_cli("diag", "--fit", fit_dir, "--field", "time", "--out", out) == 0
        table = pd.read_csv(out)
        assert len(table) > 0
        assert "median" in table.columns

    def test_benchmark_against_targets(self, fit_dir, tmp_path):
        estimates = pd.read_csv(fit_dir / "estimates.csv")
        target = estimates[["years"]].drop_duplicates().assign(mean=0.08)
        target_path = tmp_path / "target.csv"
        target.to_csv(target_path, index=False)
        out = tmp_path / "ratios.csv"
        code = run_cli(
            "benchmark", "--estimates", fit_dir / "estimates.csv",
            "--target", target_path, "--out", out,
        )
        assert code == 0
        ratios = pd.read_csv(out)
        assert {"years", "ratio"} <= set(ratios.columns)
        assert (ratios["ratio"] > 0).all()


class TestReportsCommands:
    @pytest.fixture()
    def draws_csv(self, tmp_path):
        rng = np.random.default_rng(21)
        columns = {
            f"{region}|{year}|overall": rng.uniform(0.03, 0.15, size=80)
            for region in ("western", "central", "eastern", "northern")
            for year in ("05-09", "10-14")
        }
        path = tmp_path / "draws.csv"
        pd.DataFrame(columns).to_csv(path, index=False)
        return path

    @pytest.fixture()
    def estimates_csv(self, tmp_path):
        rng = np.random.default_rng(22)
        rows = []
        for region in ("western", "central", "eastern", "northern"):
            for year in ("05-09", "10-14"):
                median = rng.uniform(0.04, 0.12)
                rows.append({"region": region, "years": year, "median": median,
                             "lower": median * 0.8, "upper": median * 1.25})
        path = tmp_path / "estimates.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        return path

    def test_map_and_hatch_write_svg(self, estimates_csv, pipeline, tmp_path):
        for command in ("map", "hatch"):
            out = tmp_path / f"{command}.svg"
            code = run_cli(
                command, "--estimates", estimates_csv, "--geo", pipeline["geo"],
                "--out", out, "--per-1000",
            )
            assert code == 0
            payload = out.read_bytes()
            assert payload.startswith(b"<svg")
            assert payload.rstrip().endswith(b"</svg>")
        assert b"<line " in (tmp_path / "hatch.svg").read_bytes()

    def test_ridge_writes_svg(self, draws_csv, tmp_path):
        out = tmp_path / "ridge.svg"
        assert run_cli("ridge", "--draws", draws_csv, "--out", out) == 0
        assert out.read_bytes().startswith(b"<svg")

    def test_tcp_writes_json(self, draws_csv, tmp_path):
        out = tmp_path / "tcp.json"
        assert run_cli("tcp", "--draws", draws_csv, "--out", out, "--k", 3) == 0
        payload = json.loads(out.read_text())
        assert payload["n_draws"] == 80
        assert len(payload["thresholds"]) == 4
        assert 1.0 / 3.0 <= payload["atcp"] <= 1.0
        assert len(payload["assignments"]) == 8

    def test_malformed_draw_columns_rejected(self, tmp_path, capsys):
        path = tmp_path / "draws.csv"
        pd.DataFrame({"western": [0.1, 0.2]}).to_csv(path, index=False)
        code = run_cli("tcp", "--draws", path, "--out", tmp_path / "o.json")
        assert code == 1
        message = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "region|years|stratum" in message["message"]


class TestErrorHandling:
    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as info:
            run_cli()
        assert info.value.code == 2
        with pytest.raises(SystemExit) as info:
            run_cli("direct", "--not-a-flag")
        assert info.value.code == 2

    def test_runtime_error_emits_json(self, tmp_path, capsys):
        code = run_cli(
            "births", "--children", tmp_path / "missing.csv", "--out", tmp_path / "o.csv",
        )
        assert code == 1
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["error"] == "FileNotFoundError"
        assert "missing.csv" in payload["message"]

    def test_smooth_direct_requires_geometry_choice(self, pipeline, tmp_path, capsys):
        code = run_cli(
            "smooth-direct", "--direct", pipeline["direct"], "--out", tmp_path / "fit",
            "--draws", 10, "--burnin", 10,
        )
        assert code == 1
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "--geo" in payload["message"]

    def test_console_script(self, tmp_path):
        script = shutil.which("stsae")
        assert script, "console script not installed"
        usage = subprocess.run([script], capture_output=True, text=True)
        assert usage.returncode == 2
        failure = subprocess.run(
            [script, "births", "--children", str(tmp_path / "none.csv"),
             "--out", str(tmp_path / "o.csv")],
            capture_output=True, text=True,
        )
        assert failure.returncode == 1
        payload = json.loads(failure.stderr.strip().splitlines()[-1])
        assert payload["error"] == "FileNotFoundError"


class TestSeedHandling:
    def test_env_seed_matches_flag(self, tmp_path, monkeypatch):
        a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
        monkeypatch.delenv("STSAE_SEED", raising=False)
        assert run_cli("simulate", "--children-out", a, "--seed", 7,
                       "--month-cuts", MONTH_CUTS) == 0
        monkeypatch.setenv("STSAE_SEED", "7")
        assert run_cli("simulate", "--children-out", b, "--month-cuts", MONTH_CUTS) == 0
        assert a.read_bytes() == b.read_bytes()
        monkeypatch.setenv("STSAE_SEED", "8")
        assert run_cli("simulate", "--children-out", c, "--month-cuts", MONTH_CUTS) == 0
        assert a.read_bytes() != c.read_bytes()

    def test_flag_overrides_env(self, tmp_path, monkeypatch):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        monkeypatch.setenv("STSAE_SEED", "99")
        assert run_cli("simulate", "--children-out", a, "--seed", 7,
                       "--month-cuts", MONTH_CUTS) == 0
        monkeypatch.delenv("STSAE_SEED")
        assert run_cli("simulate", "--children-out", b, "--seed", 7,
                       "--month-cuts", MONTH_CUTS) == 0
        assert a.read_bytes() == b.read_bytes()
