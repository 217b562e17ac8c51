"""Tests for the smoothing-model layer.

Covers spec parsing, model assembly, prediction, post-processing
(stratum aggregation, frame combination, benchmarking ratios), labeled
effect summaries, and fit bundles on disk.  The MCMC fits here are
intentionally short: distributional correctness of the samplers is
established in test_inference; these tests exercise structure.
"""

import json
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, logit

from stsae.gmrf import graph_from_adjacency
from stsae.models import (
    ESTIMATE_COLUMNS,
    LatentModelSpec,
    U5MRDraws,
    aggregate_strata,
    benchmark_to_series,
    build_smooth_cluster,
    build_smooth_direct,
    combine_frames,
    extract_diagnostics,
    fit_smooth_cluster,
    fit_smooth_direct,
    frame_weights,
    load_fit,
    predict_u5mr,
    save_fit,
    smooth_direct_estimates,
    spec_from_json,
    spec_to_json,
)
from stsae.survey import AgeBandSchema

REGIONS = ("east", "west")
PERIODS = ("00-04", "05-09", "10-14")
SCHEMA = AgeBandSchema(month_cuts=(1, 12, 60))


def two_region_graph():
    return graph_from_adjacency(REGIONS, np.array([[0, 1], [1, 0]]))


def synthetic_direct(noise=0.15, seed=0, periods=PERIODS):
    """Direct-style table with known logits around a declining trend."""
    rng = np.random.default_rng(seed)
    rows = []
    for region in ("All",) + REGIONS:
        for t, period in enumerate(periods):
            eta = -2.2 - 0.12 * t + (0.1 if region == "west" else 0.0)
            rows.append(
                {
                    "region": region,
                    "years": period,
                    "logit.est": eta + noise * rng.standard_normal(),
                    "var.est": float(rng.uniform(0.02, 0.05)),
                }
            )
    return pd.DataFrame(rows)


def synthetic_counts(seed=1, survey=None, strata=("urban", "rural")):
    """Cluster-level age-band death counts with a gentle decline."""
    rng = np.random.default_rng(seed)
    base = {"0": 0.020, "1-11": 0.004, "12-59": 0.0015}
    rows = []
    for ci in range(3):
        for region in REGIONS:
            for stratum in strata or (None,):
                for t, period in enumerate(PERIODS):
                    for band in SCHEMA.band_labels:
                        total = float(rng.integers(150, 260))
                        h = base[band] * (0.94**t)
                        if stratum == "rural":
                            h *= 1.2
                        if region == "west":
                            h *= 1.1
                        row = {
                            "cluster": f"{region}-{stratum}-{ci}",
                            "region": region,
                            "years": period,
                            "age": band,
                            "Y": float(rng.binomial(int(total), h)),
                            "total": total,
                        }
                        if strata:
                            row["strata"] = stratum
                        if survey is not None:
                            row["survey"] = survey[ci % len(survey)]
                        rows.append(row)
    return pd.DataFrame(rows)


@pytest.fixture(scope="module")
def direct_fit():
    spec = LatentModelSpec(time_model="rw2", interaction="IV")
    return fit_smooth_direct(
        synthetic_direct(), two_region_graph(), spec, seed=5, n_draws=300, n_burnin=300, n_chains=2
    )


@pytest.fixture(scope="module")
def cluster_fit():
    spec = LatentModelSpec(time_model="rw2", interaction="IV")
    return fit_smooth_cluster(
        synthetic_counts(),
        two_region_graph(),
        spec,
        SCHEMA,
        seed=6,
        n_draws=300,
        n_burnin=400,
        n_chains=2,
    )


class TestSpecParsing:
    def test_defaults(self):
        assert spec_from_json({}) == LatentModelSpec()

    def test_dotted_keys(self):
        spec = spec_from_json(
            {"time.model": "ar1", "type.st": 2, "is.yearly": True, "m": 3, "survey.effect": True}
        )
        assert spec.time_model == "ar1"
        assert spec.interaction == "II"
        assert spec.yearly and spec.m == 3
        assert spec.survey_effect
        assert spec.years_per_period == 3

    def test_interaction_aliases(self):
        assert spec_from_json({"type.st": 4}).interaction == "IV"
        assert spec_from_json({"type.st": "none"}).interaction is None
        assert spec_from_json({"type.st": None}).interaction is None

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown model spec key"):
            spec_from_json({"time.models": "rw2"})

    def test_invalid_values(self):
        with pytest.raises(ValueError, match="time_model"):
            LatentModelSpec(time_model="rw3")
        with pytest.raises(ValueError, match="interaction"):
            LatentModelSpec(interaction="V")
        with pytest.raises(ValueError, match="random slopes"):
            LatentModelSpec(time_model="rw2", random_slopes=True)

    def test_random_slopes_need_first_order_interaction_model(self):
        spec = LatentModelSpec(time_model="rw2", st_time_model="rw1", random_slopes=True)
        assert spec.effective_st_model == "rw1"

    def test_json_text_and_file(self, tmp_path):
        text = json.dumps({"time.model": "rw1"})
        assert spec_from_json(text).time_model == "rw1"
        path = tmp_path / "spec.json"
        path.write_text(text)
        assert spec_from_json(path).time_model == "rw1"

    def test_roundtrip(self):
        spec = LatentModelSpec(
            time_model="ar1",
            interaction="II",
            survey_effect=True,
            bias_adj=({"years": "00-04", "ratio": 1.25},),
        )
        assert spec_from_json(spec_to_json(spec)) == spec


class TestBuildSmoothDirect:
    def test_area_mode_structure(self):
        model, meta = build_smooth_direct(
            synthetic_direct(), two_region_graph(), LatentModelSpec()
        )
        names = [c.name for c in model.components]
        assert names[:2] == ["time", "time:iid"]
        assert "space" in names
        assert meta["regions"] == list(REGIONS)
        assert meta["fixed_names"] == ["intercept", "trend"]
        assert not meta["national"]
        # "All" rows are excluded in area mode: 2 regions x 3 periods.
        assert model.likelihood.n_cells == 6

    def test_national_mode_drops_spatial_terms(self):
        model, meta = build_smooth_direct(synthetic_direct(), None, LatentModelSpec())
        assert [c.name for c in model.components] == ["time", "time:iid"]
        assert meta["national"]
        assert meta["regions"] == ["All"]
        assert model.likelihood.n_cells == 3

    def test_rw1_has_no_trend_column(self):
        model, meta = build_smooth_direct(
            synthetic_direct(), None, LatentModelSpec(time_model="rw1")
        )
        assert meta["fixed_names"] == ["intercept"]

    def test_ar1_samples_autocorrelation(self):
        model, _ = build_smooth_direct(
            synthetic_direct(), None, LatentModelSpec(time_model="ar1", pc_u_omega=0.7, pc_alpha_omega=0.8)
        )
        time = model.components[0]
        assert time.omega_prior is not None
        assert time.structure_fn is not None

    def test_duplicate_cells_rejected(self):
        table = synthetic_direct()
        table = pd.concat([table, table.iloc[[3]]], ignore_index=True)
        with pytest.raises(ValueError, match="aggregate surveys"):
            build_smooth_direct(table, two_region_graph(), LatentModelSpec())

    def test_all_missing_rejected(self):
        table = synthetic_direct()
        table["logit.est"] = np.nan
        with pytest.raises(ValueError, match="no usable"):
            build_smooth_direct(table, two_region_graph(), LatentModelSpec())

    def test_unknown_region_rejected(self):
        table = synthetic_direct()
        table.loc[table.index[-1], "region"] = "atlantis"
        with pytest.raises(ValueError, match="atlantis"):
            build_smooth_direct(table, two_region_graph(), LatentModelSpec())

    def test_missing_columns_rejected(self):
        with pytest.raises(ValueError, match="missing columns"):
            build_smooth_direct(
                pd.DataFrame({"region": ["All"], "years": ["p"]}), None, LatentModelSpec()
            )


class TestSmoothDirectEstimates:
    def test_estimate_table_shape(self, direct_fit):
        table = smooth_direct_estimates(direct_fit)
        assert list(table.columns) == list(ESTIMATE_COLUMNS)
        assert len(table) == len(REGIONS) * len(PERIODS)
        assert set(table["stratum"]) == {"overall"}
        assert not table["is.projection"].any()
        assert ((table["lower"] < table["median"]) & (table["median"] < table["upper"])).all()

    def test_smoothing_shrinks_toward_structure(self, direct_fit):
        table = smooth_direct_estimates(direct_fit)
        direct = synthetic_direct()
        direct = direct[direct["region"] != "All"]
        merged = table.merge(direct, on=["region", "years"])
        spread_direct = np.var(merged["logit.est"] - merged["logit.est"].mean())
        residual = logit(merged["median"]) - merged["logit.est"]
        # The smoothed medians move off the noisy observations.
        assert np.mean(np.abs(residual)) > 0
        assert np.var(logit(merged["median"])) < spread_direct * 1.5

    def test_projection_flag_for_unobserved_period(self):
        table = synthetic_direct(periods=PERIODS)
        table.loc[table["years"] == "10-14", ["logit.est", "var.est"]] = np.nan
        spec = LatentModelSpec(year_label=PERIODS)
        fit = fit_smooth_direct(
            table, None, spec, seed=2, n_draws=200, n_burnin=200, n_chains=2
        )
        est = smooth_direct_estimates(fit)
        flagged = est.set_index("years")["is.projection"]
        assert bool(flagged["10-14"])
        assert not bool(flagged["00-04"])
        assert np.isfinite(est["median"]).all()

    def test_requires_smooth_direct_family(self, cluster_fit):
        with pytest.raises(ValueError, match="smoothed-direct"):
            smooth_direct_estimates(cluster_fit)

    def test_roundtrip_through_disk(self, direct_fit, tmp_path):
        save_fit(direct_fit, tmp_path / "bundle")
        loaded = load_fit(tmp_path / "bundle")
        pd.testing.assert_frame_equal(
            smooth_direct_estimates(direct_fit), smooth_direct_estimates(loaded)
        )
        assert loaded.draws.n_chains == direct_fit.draws.n_chains
        assert list(loaded.draws.columns) == list(direct_fit.draws.columns)


class TestBuildSmoothCluster:
    def test_stratified_walk_keys(self):
        _, meta = build_smooth_cluster(
            synthetic_counts(), two_region_graph(), LatentModelSpec(), SCHEMA
        )
        # Stratum levels are sorted, so rural precedes urban in each group.
        assert meta["walks"]["keys"] == [
            "0|rural",
            "0|urban",
            "1-11|rural",
            "1-11|urban",
            "12-59|rural",
            "12-59|urban",
        ]
        assert meta["strata"] == ["rural", "urban"]
        assert meta["stratified"]

    def test_time_invariant_strata_share_walks(self):
        _, meta = build_smooth_cluster(
            synthetic_counts(),
            two_region_graph(),
            LatentModelSpec(strata_time_invariant=True),
            SCHEMA,
        )
        assert meta["walks"]["keys"] == ["0", "1-11", "12-59"]
        # Intercepts still differ by stratum.
        assert len(meta["intercepts"]) == 6

    def test_unstratified_counts(self):
        counts = synthetic_counts(strata=None)
        _, meta = build_smooth_cluster(
            counts, two_region_graph(), LatentModelSpec(), SCHEMA
        )
        assert meta["strata"] == ["overall"]
        assert meta["walks"]["keys"] == ["0", "1-11", "12-59"]

    def test_partial_strata_rejected(self):
        counts = synthetic_counts()
        counts.loc[counts.index[0], "strata"] = None
        with pytest.raises(ValueError, match="fully labeled"):
            build_smooth_cluster(counts, two_region_graph(), LatentModelSpec(), SCHEMA)

    def test_unknown_stratum_label_rejected(self):
        counts = synthetic_counts()
        counts["strata"] = counts["strata"].replace({"urban": "town"})
        with pytest.raises(ValueError, match="stratum labels"):
            build_smooth_cluster(counts, two_region_graph(), LatentModelSpec(), SCHEMA)

    def test_unknown_band_rejected(self):
        counts = synthetic_counts()
        counts.loc[counts.index[0], "age"] = "60-72"
        with pytest.raises(ValueError, match="bands absent"):
            build_smooth_cluster(counts, two_region_graph(), LatentModelSpec(), SCHEMA)

    def test_missing_columns_rejected(self):
        with pytest.raises(ValueError, match="missing columns"):
            build_smooth_cluster(
                pd.DataFrame({"cluster": [], "region": []}),
                two_region_graph(),
                LatentModelSpec(),
                SCHEMA,
            )

    def test_single_survey_effect_warns(self):
        counts = synthetic_counts(survey=("dhs2019",))
        with pytest.warns(UserWarning, match="fewer than two surveys"):
            build_smooth_cluster(
                counts, two_region_graph(), LatentModelSpec(survey_effect=True), SCHEMA
            )

    def test_survey_frame_uniqueness_enforced(self):
        counts = synthetic_counts(survey=("a", "b"))
        counts["frame"] = np.where(counts["cluster"].str.endswith("0"), "f1", "f2")
        counts.loc[counts["survey"] == "a", "frame"] = ["f1", "f2"] * (
            (counts["survey"] == "a").sum() // 2
        )
        with pytest.raises(ValueError, match="exactly one sampling frame"):
            build_smooth_cluster(
                counts, two_region_graph(), LatentModelSpec(survey_effect=True), SCHEMA
            )

    def test_bias_offsets_enter_as_log_ratios(self):
        counts = synthetic_counts(survey=("a", "b"))
        spec = LatentModelSpec(
            bias_adj=({"years": "00-04", "ratio": 1.25, "survey": "a"},)
        )
        model, _ = build_smooth_cluster(counts, two_region_graph(), spec, SCHEMA)
        mask = ((counts["years"] == "00-04") & (counts["survey"] == "a")).to_numpy()
        np.testing.assert_allclose(model.offsets[mask], math.log(1.25))
        np.testing.assert_allclose(model.offsets[~mask], 0.0)

    def test_nonpositive_bias_ratio_rejected(self):
        spec = LatentModelSpec(bias_adj=({"years": "00-04", "ratio": 0.0},))
        with pytest.raises(ValueError, match="positive"):
            build_smooth_cluster(synthetic_counts(), two_region_graph(), spec, SCHEMA)

    def test_yearly_mode_spreads_period_loadings(self):
        spec = LatentModelSpec(yearly=True, m=3, interaction=None)
        model, meta = build_smooth_cluster(
            synthetic_counts(strata=None), two_region_graph(), spec, SCHEMA
        )
        assert meta["m"] == 3
        n_time = len(PERIODS) * 3
        time_comp = model.components[0]
        assert time_comp.incidence.shape[1] == 3 * n_time  # three shared walks
        row = time_comp.incidence[0]
        assert set(np.unique(row)) <= {0.0, 1.0 / 3.0}
        assert row.sum() == pytest.approx(1.0)

    def test_national_mode(self):
        counts = synthetic_counts(strata=None)
        model, meta = build_smooth_cluster(counts, None, LatentModelSpec(), SCHEMA)
        assert meta["national"]
        assert "space" not in meta["components"]
        assert "spacetime" not in meta["components"]


class TestPrediction:
    def test_prediction_grid_and_range(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        n_cells = len(REGIONS) * len(PERIODS) * 2
        assert len(draws.cells) == n_cells
        assert draws.values.shape == (600, n_cells)
        assert np.all((draws.values > 0) & (draws.values < 1))

    def test_strata_subset_and_unknown(self, cluster_fit):
        urban = predict_u5mr(cluster_fit, strata=["urban"])
        assert set(urban.cells["stratum"]) == {"urban"}
        with pytest.raises(ValueError, match="available"):
            predict_u5mr(cluster_fit, strata=["peri-urban"])

    def test_time_iid_flag_changes_draws(self, cluster_fit):
        base = predict_u5mr(cluster_fit)
        with_iid = predict_u5mr(cluster_fit, include_time_iid=True)
        assert not np.allclose(base.values, with_iid.values)

    def test_select_filters_cells(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        east = draws.select(region="east", stratum="rural")
        assert len(east.cells) == len(PERIODS)
        assert east.values.shape[1] == len(PERIODS)

    def test_summary_median_is_transform_equivariant(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        table = draws.summarize()
        manual = expit(np.quantile(logit(draws.values), 0.5, axis=0))
        np.testing.assert_allclose(table["median"].to_numpy(), manual, rtol=1e-12)
        assert (table["lower"] <= table["median"]).all()
        assert (table["median"] <= table["upper"]).all()

    def test_rejects_smooth_direct_fit(self, direct_fit):
        with pytest.raises(ValueError, match="cluster-level"):
            predict_u5mr(direct_fit)


class TestStratumAggregation:
    def grid_props(self, q):
        return pd.DataFrame(
            [
                {"region": r, "years": p, "q_urban": q}
                for r in REGIONS
                for p in PERIODS
            ]
        )

    def test_all_urban_recovers_urban_draws(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        overall = aggregate_strata(draws, self.grid_props(1.0))
        urban = draws.select(stratum="urban")
        np.testing.assert_allclose(overall.values, urban.values, rtol=0, atol=0)
        assert set(overall.cells["stratum"]) == {"overall"}

    def test_even_mixture(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        overall = aggregate_strata(draws, self.grid_props(0.5))
        urban = draws.select(stratum="urban")
        rural = draws.select(stratum="rural")
        np.testing.assert_allclose(
            overall.values, 0.5 * urban.values + 0.5 * rural.values, rtol=1e-15
        )

    def test_convexity(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        overall = aggregate_strata(draws, self.grid_props(0.3))
        urban = draws.select(stratum="urban").values
        rural = draws.select(stratum="rural").values
        assert np.all(overall.values <= np.maximum(urban, rural) + 1e-15)
        assert np.all(overall.values >= np.minimum(urban, rural) - 1e-15)

    def test_props_none_gives_empty(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        overall = aggregate_strata(draws, None)
        assert overall.values.shape == (600, 0)
        assert len(overall.cells) == 0

    def test_partial_props_rejected(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        props = self.grid_props(0.4).iloc[:-1]
        with pytest.raises(ValueError, match="missing for cells"):
            aggregate_strata(draws, props)

    def test_bad_proportions_rejected(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            aggregate_strata(draws, self.grid_props(1.2))

    def test_frame_filter(self, cluster_fit):
        draws = predict_u5mr(cluster_fit)
        props = pd.concat(
            [
                self.grid_props(1.0).assign(frame="f1"),
                self.grid_props(0.0).assign(frame="f2"),
            ]
        )
        overall = aggregate_strata(draws, props, frame="f2")
        rural = draws.select(stratum="rural")
        np.testing.assert_allclose(overall.values, rural.values)

    def test_requires_both_strata(self, cluster_fit):
        draws = predict_u5mr(cluster_fit, strata=["urban"])
        with pytest.raises(ValueError, match="urban and rural"):
            aggregate_strata(draws, self.grid_props(0.5))


class TestFrameCombination:
    def test_frame_weights_example(self):
        np.testing.assert_allclose(frame_weights(np.array([0.01, 0.03])), [0.75, 0.25])

    def test_frame_weights_validation(self):
        with pytest.raises(ValueError, match="positive"):
            frame_weights(np.array([0.01, 0.0]))

    def fake_draws(self, seed, shift=0.0):
        rng = np.random.default_rng(seed)
        cells = pd.DataFrame(
            [
                {"region": r, "years": p, "stratum": "overall"}
                for r in REGIONS
                for p in PERIODS
            ]
        )
        eta = rng.normal(-2.5 + shift, 0.3, size=(200, len(cells)))
        return U5MRDraws(cells, expit(eta))

    def test_identical_frames_are_a_fixed_point(self):
        a = self.fake_draws(1)
        combined = combine_frames({"f1": a, "f2": U5MRDraws(a.cells.copy(), a.values.copy())})
        np.testing.assert_allclose(combined.values, a.values, rtol=1e-12)

    def test_combination_is_precision_weighted(self):
        a = self.fake_draws(2)
        b = self.fake_draws(3, shift=0.4)
        combined = combine_frames({"f1": a, "f2": b})
        la, lb = logit(a.values), logit(b.values)
        w = frame_weights(np.stack([la.var(axis=0, ddof=1), lb.var(axis=0, ddof=1)]))
        np.testing.assert_allclose(
            logit(combined.values), w[0] * la + w[1] * lb, rtol=1e-9
        )

    def test_mismatched_cells_rejected(self):
        a = self.fake_draws(4)
        b = self.fake_draws(5)
        b.cells.loc[0, "region"] = "atlantis"
        with pytest.raises(ValueError, match="identical cells"):
            combine_frames({"f1": a, "f2": b})

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no frames"):
            combine_frames({})

    def test_unequal_draw_counts_rejected(self):
        a = self.fake_draws(6)
        b = self.fake_draws(7)
        b.values = b.values[:100]
        with pytest.raises(ValueError, match="equal draw counts"):
            combine_frames({"f1": a, "f2": b})


class TestBenchmarkRatios:
    def test_simple_ratio(self):
        est = pd.DataFrame({"years": ["2000"], "median": [0.11]})
        target = pd.DataFrame({"years": ["2000"], "mean": [0.10]})
        ratios, warn = benchmark_to_series(est, target)
        assert warn == []
        assert ratios["ratio"].iloc[0] == pytest.approx(1.1, rel=1e-12)

    def test_identical_series_gives_unit_ratios(self):
        est = pd.DataFrame({"years": ["a", "b"], "median": [0.08, 0.07]})
        target = pd.DataFrame({"years": ["a", "b"], "mean": [0.08, 0.07]})
        ratios, _ = benchmark_to_series(est, target)
        np.testing.assert_allclose(ratios["ratio"], 1.0)

    def test_missing_target_year_warns_and_omits(self):
        est = pd.DataFrame({"years": ["a", "b"], "median": [0.08, 0.07]})
        target = pd.DataFrame({"years": ["a"], "mean": [0.08]})
        ratios, warn = benchmark_to_series(est, target)
        assert list(ratios["years"]) == ["a"]
        assert len(warn) == 1 and "b" in warn[0]

    def test_duplicate_estimate_years_rejected(self):
        est = pd.DataFrame({"years": ["a", "a"], "median": [0.08, 0.07]})
        target = pd.DataFrame({"years": ["a"], "mean": [0.08]})
        with pytest.raises(ValueError, match="one national row"):
            benchmark_to_series(est, target)

    def test_column_validation(self):
        good = pd.DataFrame({"years": ["a"], "median": [0.1]})
        with pytest.raises(ValueError, match="estimates need"):
            benchmark_to_series(pd.DataFrame({"years": ["a"]}), good)
        with pytest.raises(ValueError, match="target needs"):
            benchmark_to_series(good, pd.DataFrame({"years": ["a"]}))


class TestDiagnosticsExtraction:
    def test_time_field_labels_cluster(self, cluster_fit):
        table = extract_diagnostics(cluster_fit, "time")
        components = set(table["component"])
        assert "iid" in components
        assert any(c.startswith("rw2:") for c in components)
        assert set(table["label"]) == set(PERIODS)

    def test_space_field_labels(self, cluster_fit):
        table = extract_diagnostics(cluster_fit, "space")
        assert set(table["component"]) == {"total", "structured", "iid"}
        assert set(table["label"]) == set(REGIONS)

    def test_spacetime_field_labels(self, cluster_fit):
        table = extract_diagnostics(cluster_fit, "spacetime")
        assert set(table["component"]) == {"interaction"}
        assert set(table["label"]) == {f"{r}:{p}" for r in REGIONS for p in PERIODS}

    def test_smooth_direct_time_labels(self, direct_fit):
        table = extract_diagnostics(direct_fit, "time")
        assert set(table["component"]) == {"rw2", "iid"}

    def test_unknown_field_lists_available(self, cluster_fit):
        with pytest.raises(ValueError, match="available"):
            extract_diagnostics(cluster_fit, "survey")


class TestSurveyEffects:
    def test_two_surveys_one_frame_mirror_each_other(self):
        counts = synthetic_counts(survey=("a", "b"), strata=None)
        spec = LatentModelSpec(survey_effect=True, interaction=None)
        fit = fit_smooth_cluster(
            counts, None, spec, SCHEMA, seed=3, n_draws=150, n_burnin=150, n_chains=2
        )
        block = fit.draws.block("survey")
        assert block.shape[1] == 2
        np.testing.assert_allclose(block.sum(axis=1), 0.0, atol=1e-10)

    def test_cluster_fit_constraints_hold(self, cluster_fit):
        assert cluster_fit.draws.diagnostics["max_constraint_residual"] < 1e-8

    def test_cluster_roundtrip_preserves_predictions(self, cluster_fit, tmp_path):
        save_fit(cluster_fit, tmp_path / "bundle")
        loaded = load_fit(tmp_path / "bundle")
        a = predict_u5mr(cluster_fit).summarize()
        b = predict_u5mr(loaded).summarize()
        pd.testing.assert_frame_equal(a, b)
