"""Space-time smoothing model assembly and posterior post-processing.

Two model families share the latent building blocks:

* smoothed-direct: logits of design-based direct estimates observed with
  known variances around a latent predictor (intercept, optional linear
  trend, temporal random walk or AR, iid time, BYM2 space, space-time
  interaction, optional random slopes);
* cluster-level: beta-binomial counts per cluster-period-age-band with
  per-age-group-per-stratum temporal walks sharing one scale, stratum
  intercepts, survey fixed effects, reporting-bias offsets, and the same
  spatial and space-time terms.

Post-processing covers hazard-to-prevalence prediction per draw, urban/
rural aggregation, sampling-frame combination, benchmarking ratios, and
labeled posterior summaries of individual effects.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.linalg import block_diag
from scipy.special import expit, logit

from .gmrf import (
    ConstraintSet,
    RegionGraph,
    ar1_precision,
    icar_precision,
    interaction_structure,
    rw_precision,
)
from .inference import (
    BetaBinomialLikelihood,
    Component,
    FixedEffects,
    GaussianLikelihood,
    LatentModel,
    PosteriorDraws,
    fit_betabinomial_lgm,
    fit_gaussian_lgm,
)
from .priors import (
    BoundedExponentialPrior,
    PCSigmaPrior,
    PCSlopePrior,
    pc_omega_prior,
    pc_phi_prior,
)
from .survey import AgeBandSchema

__all__ = [
    "LatentModelSpec",
    "spec_from_json",
    "spec_to_json",
    "FitResult",
    "build_smooth_direct",
    "fit_smooth_direct",
    "smooth_direct_estimates",
    "build_smooth_cluster",
    "fit_smooth_cluster",
    "U5MRDraws",
    "predict_u5mr",
    "aggregate_strata",
    "frame_weights",
    "combine_frames",
    "benchmark_to_series",
    "extract_diagnostics",
    "save_fit",
    "load_fit",
]

TEMPORAL_MODELS = ("rw1", "rw2", "ar1")
ESTIMATE_COLUMNS = (
    "region",
    "years",
    "stratum",
    "median",
    "lower",
    "upper",
    "logit.mean",
    "logit.var",
    "is.projection",
)


@dataclass(frozen=True)
class LatentModelSpec:
    """Menu of smoothing-model choices, mirroring the fit arguments."""

    time_model: str = "rw2"
    st_time_model: str | None = None
    interaction: str | None = "IV"
    yearly: bool = False
    m: int = 1
    year_label: tuple | None = None
    survey_effect: bool = False
    strata_time_invariant: bool = False
    linear_trend: bool = True
    random_slopes: bool = False
    pc_u: float = 1.0
    pc_alpha: float = 0.01
    pc_u_phi: float = 0.5
    pc_alpha_phi: float = 2.0 / 3.0
    pc_u_omega: float = 0.7
    pc_alpha_omega: float = 0.9
    slope_u: float = 1.0
    slope_alpha: float = 0.95
    overdisp_u: float = 0.1
    overdisp_alpha: float = 0.01
    bias_adj: tuple | None = None

    def __post_init__(self):
        if self.time_model not in TEMPORAL_MODELS:
            raise ValueError(f"time_model must be one of {TEMPORAL_MODELS}")
        if self.st_time_model is not None and self.st_time_model not in TEMPORAL_MODELS:
            raise ValueError(f"st_time_model must be one of {TEMPORAL_MODELS}")
        if self.interaction is not None and str(self.interaction) not in "I II III IV".split():
            raise ValueError("interaction must be one of I, II, III, IV or None")
        if self.yearly and self.m < 1:
            raise ValueError("yearly mode requires m >= 1")
        if self.year_label is not None:
            object.__setattr__(self, "year_label", tuple(self.year_label))
        if self.bias_adj is not None:
            object.__setattr__(
                self, "bias_adj", tuple(dict(row) for row in self.bias_adj)
            )
        if self.random_slopes and self.effective_st_model == "rw2":
            raise ValueError(
                "random slopes require a first-order interaction temporal model (rw1 or ar1)"
            )

    @property
    def effective_st_model(self) -> str:
        return self.st_time_model or self.time_model

    @property
    def years_per_period(self) -> int:
        return self.m if self.yearly else 1


_SPEC_KEYS = {
    "time.model": "time_model",
    "st.time.model": "st_time_model",
    "type.st": "interaction",
    "is.yearly": "yearly",
    "m": "m",
    "year.label": "year_label",
    "survey.effect": "survey_effect",
    "strata.time.invariant": "strata_time_invariant",
    "linear.trend": "linear_trend",
    "random.slopes": "random_slopes",
    "pc.u": "pc_u",
    "pc.alpha": "pc_alpha",
    "pc.u.phi": "pc_u_phi",
    "pc.alpha.phi": "pc_alpha_phi",
    "pc.u.omega": "pc_u_omega",
    "pc.alpha.omega": "pc_alpha_omega",
    "pc.st.slope.u": "slope_u",
    "pc.st.slope.alpha": "slope_alpha",
    "overdisp.u": "overdisp_u",
    "overdisp.alpha": "overdisp_alpha",
    "bias.adj": "bias_adj",
}

_INTERACTION_ALIASES = {1: "I", 2: "II", 3: "III", 4: "IV"}


def spec_from_json(source) -> LatentModelSpec:
    """Build a model spec from a JSON mapping (or file path / JSON text)."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        source = json.loads(text)
    if not isinstance(source, dict):
        raise ValueError("model spec JSON must be an object")
    kwargs = {}
    for key, value in source.items():
        if key not in _SPEC_KEYS:
            raise ValueError(
                f"unknown model spec key {key!r}; known keys: {sorted(_SPEC_KEYS)}"
            )
        kwargs[_SPEC_KEYS[key]] = value
    if "interaction" in kwargs:
        value = kwargs["interaction"]
        if value in _INTERACTION_ALIASES:
            kwargs["interaction"] = _INTERACTION_ALIASES[value]
        elif value in (None, "none", "None"):
            kwargs["interaction"] = None
    return LatentModelSpec(**kwargs)


def spec_to_json(spec: LatentModelSpec) -> dict:
    inverse = {v: k for k, v in _SPEC_KEYS.items()}
    out = {}
    for f in fields(spec):
        value = getattr(spec, f.name)
        if isinstance(value, tuple):
            value = [dict(v) if isinstance(v, dict) else v for v in value]
        out[inverse[f.name]] = value
    return out


# ---------------------------------------------------------------------------
# Temporal building blocks


def _time_scale(n: int) -> np.ndarray:
    """Affine map of time indices onto [-0.5, 0.5]."""
    if n == 1:
        return np.zeros(1)
    return (np.arange(n) - (n - 1) / 2.0) / (n - 1)


def _temporal_structure(model: str, length: int, spec: LatentModelSpec):
    """Structure, constraints, optional rebuild rule for one time series.

    Random walks are constrained across their whole polynomial null
    space (their trend is carried by explicit fixed effects); the
    stationary AR gets a sum-to-zero constraint so the intercept stays
    identified uniformly across temporal models.
    """
    if model in ("rw1", "rw2"):
        struct = rw_precision(length, 1 if model == "rw1" else 2)
        constraints = ConstraintSet(struct.null_space.T)
        return struct.matrix, constraints, None, None
    omega_prior = pc_omega_prior(length, spec.pc_u_omega, spec.pc_alpha_omega)
    struct = ar1_precision(length, omega_prior.u)
    constraints = ConstraintSet(np.ones((1, length)))
    return struct.matrix, constraints, omega_prior, lambda w: ar1_precision(length, w).matrix


def _period_loading(period_idx: np.ndarray, n_periods: int, m: int) -> np.ndarray:
    """Rows load 1/m on each latent year belonging to the row's period."""
    n = period_idx.size
    out = np.zeros((n, n_periods * m))
    for j in range(m):
        out[np.arange(n), period_idx * m + j] = 1.0 / m
    return out


def _region_onehot(region_idx: np.ndarray, n_regions: int) -> np.ndarray:
    out = np.zeros((region_idx.size, n_regions))
    out[np.arange(region_idx.size), region_idx] = 1.0
    return out


def _interaction_incidence(time_loading, region_onehot):
    """Time-major Kronecker loading: entry t*n + i gets time x region mass."""
    n_rows = time_loading.shape[0]
    out = np.einsum("rt,ri->rti", time_loading, region_onehot).reshape(n_rows, -1)
    return out


def _ordered_periods(values, year_label):
    if year_label is not None:
        periods = [str(p) for p in year_label]
        extra = sorted({str(v) for v in values} - set(periods))
        if extra:
            raise ValueError(f"periods in data missing from year_label: {extra}")
        return periods
    seen = []
    for v in values:
        label = str(v)
        if label not in seen:
            seen.append(label)
    return seen


def _weight_rule(comp: Component) -> dict:
    rule = {"kind": comp.kind}
    rule["sigma"] = f"sigma[{comp.name}]" if comp.sigma_prior is not None else comp.sigma0
    if comp.kind == "bym2":
        rule["phi"] = f"phi[{comp.name}]" if comp.phi_prior is not None else comp.phi0
    return rule


def _spatial_components(spec, graph, region_idx, time_loading, tsc, components, meta):
    """Append BYM2 / interaction / slope components shared by both families."""
    n = graph.n
    region_z = _region_onehot(region_idx, n)
    icar = icar_precision(graph)
    spatial_constraints = ConstraintSet(icar.null_space.T)
    components.append(
        Component(
            name="space",
            incidence=region_z,
            structure=icar,
            constraints=spatial_constraints,
            sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
            kind="bym2",
            phi_prior=pc_phi_prior(icar, spec.pc_u_phi, spec.pc_alpha_phi),
        )
    )
    meta["components"]["space"] = {"size": 2 * n, "role": "bym2"}
    if spec.interaction is not None:
        st_model = spec.effective_st_model
        n_time = time_loading.shape[1]
        if st_model in ("rw1", "rw2"):
            omega_prior = None
            temporal = rw_precision(n_time, 1 if st_model == "rw1" else 2)
        else:
            omega_prior = pc_omega_prior(n_time, spec.pc_u_omega, spec.pc_alpha_omega)
            temporal = ar1_precision(n_time, omega_prior.u)
        struct, constraints = interaction_structure(spec.interaction, temporal, icar)
        structure_fn = None
        if omega_prior is not None and spec.interaction in ("II", "IV"):
            kind = spec.interaction

            def structure_fn(w, _kind=kind, _n=n_time, _icar=icar):
                return interaction_structure(_kind, ar1_precision(_n, w), _icar)[0].matrix

        else:
            omega_prior = None
        components.append(
            Component(
                name="spacetime",
                incidence=_interaction_incidence(time_loading, region_z),
                structure=struct,
                constraints=constraints,
                sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
                omega_prior=omega_prior,
                omega0=spec.pc_u_omega,
                structure_fn=structure_fn,
            )
        )
        meta["components"]["spacetime"] = {
            "size": struct.size,
            "role": "interaction",
            "type": spec.interaction,
            "st_time_model": st_model,
        }
    if spec.random_slopes:
        slope_scale = PCSlopePrior(spec.slope_u, spec.slope_alpha).scale
        slope_loading = region_z * (time_loading @ tsc)[:, None]
        components.append(
            Component(
                name="slope",
                incidence=slope_loading,
                structure=np.eye(n),
                constraints=ConstraintSet(np.ones((1, n))),
                sigma0=slope_scale,
            )
        )
        meta["components"]["slope"] = {"size": n, "role": "slope", "scale": slope_scale}


def _finish_meta(meta, model):
    meta["offsets_nonzero"] = bool(np.any(model.offsets))
    meta["weight_rules"] = {c.name: _weight_rule(c) for c in model.components}
    return meta


# ---------------------------------------------------------------------------
# Smoothed-direct model


def build_smooth_direct(direct: pd.DataFrame, graph: RegionGraph | None, spec: LatentModelSpec):
    """Area-level model: direct logits observed around a latent predictor.

    National mode (``graph is None``) keeps only the "All" rows and drops
    every spatial term; area mode keeps only the region rows.

    Returns
    -------
    (LatentModel, dict)
        The model plus JSON-serializable metadata used for predictions,
        estimates, and diagnostics after a round trip through disk.
    """
    required = {"region", "years", "logit.est", "var.est"}
    if not required <= set(direct.columns):
        raise ValueError(f"direct table is missing columns {sorted(required - set(direct.columns))}")
    national = graph is None
    table = direct[direct["region"] == "All"] if national else direct[direct["region"] != "All"]
    if not national:
        unknown = sorted(set(table["region"]) - set(graph.names))
        if unknown:
            raise ValueError(f"regions absent from the graph: {unknown}")
    periods = _ordered_periods(table["years"], spec.year_label)
    regions = ["All"] if national else list(graph.names)
    m = spec.years_per_period
    n_time = len(periods) * m

    usable = table[np.isfinite(table["logit.est"]) & (table["var.est"] > 0)]
    if usable.empty:
        raise ValueError("no usable direct estimates (all rows are missing-marker)")
    dup = usable.duplicated(subset=["region", "years"])
    if dup.any():
        raise ValueError(
            "multiple rows per region and period; aggregate surveys before smoothing"
        )
    period_idx = np.array([periods.index(str(p)) for p in usable["years"]])
    region_idx = (
        np.zeros(len(usable), dtype=int)
        if national
        else np.array([graph.names.index(r) for r in usable["region"]])
    )
    time_loading = _period_loading(period_idx, len(periods), m)
    tsc = _time_scale(n_time)

    meta = {
        "family": "smooth-direct",
        "regions": regions,
        "periods": periods,
        "m": m,
        "yearly": spec.yearly,
        "time_model": spec.time_model,
        "national": national,
        "components": {},
        "observed_periods": sorted({str(p) for p in usable["years"]}),
        "spec": spec_to_json(spec),
    }

    fixed_names = ["intercept"]
    fixed_cols = [np.ones(len(usable))]
    if spec.linear_trend and spec.time_model == "rw2":
        fixed_names.append("trend")
        fixed_cols.append(time_loading @ tsc)
    meta["fixed_names"] = fixed_names

    components = []
    q_t, cons_t, omega_prior, structure_fn = _temporal_structure(spec.time_model, n_time, spec)
    components.append(
        Component(
            name="time",
            incidence=time_loading,
            structure=q_t,
            constraints=cons_t,
            sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
            omega_prior=omega_prior,
            omega0=spec.pc_u_omega,
            structure_fn=structure_fn,
        )
    )
    meta["components"]["time"] = {"size": n_time, "role": "walk"}
    components.append(
        Component(
            name="time:iid",
            incidence=time_loading,
            structure=np.eye(n_time),
            sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
        )
    )
    meta["components"]["time:iid"] = {"size": n_time, "role": "iid-time"}
    if not national:
        _spatial_components(spec, graph, region_idx, time_loading, tsc, components, meta)

    likelihood = GaussianLikelihood(
        usable["logit.est"].to_numpy(dtype=float), usable["var.est"].to_numpy(dtype=float)
    )
    model = LatentModel(
        components=components,
        likelihood=likelihood,
        fixed_effects=FixedEffects(np.column_stack(fixed_cols), tuple(fixed_names)),
    )
    return model, _finish_meta(meta, model)


@dataclass
class FitResult:
    """A posterior sample bundled with the metadata to interpret it."""

    draws: PosteriorDraws
    meta: dict
    model: LatentModel | None = None


def _store_layout(result: FitResult):
    meta = result.meta
    meta["columns"] = list(result.draws.columns)
    meta["component_index"] = {k: list(v) for k, v in result.draws.component_index.items()}
    meta["hyper_index"] = dict(result.draws.hyper_index)
    meta["seed"] = result.draws.seed
    meta["n_chains"] = result.draws.n_chains
    meta["n_draws_per_chain"] = result.draws.n_draws_per_chain
    return result


def fit_smooth_direct(
    direct, graph, spec, seed=0, n_draws=1000, n_burnin=1000, n_chains=4
) -> FitResult:
    model, meta = build_smooth_direct(direct, graph, spec)
    draws = fit_gaussian_lgm(model, seed=seed, n_draws=n_draws, n_burnin=n_burnin, n_chains=n_chains)
    return _store_layout(FitResult(draws=draws, meta=meta, model=model))


# ---------------------------------------------------------------------------
# Effect reconstruction from stored draws


def _component_weights(matrix, columns, rule):
    """Per-draw contribution weights for one component."""
    def resolve(ref):
        if isinstance(ref, str):
            return matrix[:, columns.index(ref)]
        return np.full(matrix.shape[0], float(ref))

    sigma = resolve(rule["sigma"])
    if rule["kind"] == "bym2":
        phi = resolve(rule["phi"])
        return sigma * np.sqrt(1.0 - phi), sigma * np.sqrt(phi)
    return (sigma,)


def _block_draws(matrix, meta, name):
    lo, hi = meta["component_index"][name]
    return matrix[:, lo:hi]


def _fixed_column(matrix, meta, name):
    idx = meta["fixed_names"].index(name)
    lo, _ = meta["component_index"]["fixed"]
    return matrix[:, lo + idx]


def _predictor_draws(matrix, meta, region_k, time_loading_row, tsc_value, include_time_iid):
    """Latent predictor draws for one (region, time-loading) cell."""
    columns = meta["columns"]
    rules = meta["weight_rules"]
    eta = _fixed_column(matrix, meta, "intercept").copy()
    if "trend" in meta["fixed_names"]:
        eta += _fixed_column(matrix, meta, "trend") * tsc_value
    (w_time,) = _component_weights(matrix, columns, rules["time"])
    eta += w_time * (_block_draws(matrix, meta, "time") @ time_loading_row)
    if include_time_iid:
        (w_iid,) = _component_weights(matrix, columns, rules["time:iid"])
        eta += w_iid * (_block_draws(matrix, meta, "time:iid") @ time_loading_row)
    if "space" in meta["components"]:
        w_e, w_s = _component_weights(matrix, columns, rules["space"])
        eta += w_e * _block_draws(matrix, meta, "space:iid")[:, region_k]
        eta += w_s * _block_draws(matrix, meta, "space:str")[:, region_k]
    if "spacetime" in meta["components"]:
        n = len(meta["regions"])
        (w_st,) = _component_weights(matrix, columns, rules["spacetime"])
        st = _block_draws(matrix, meta, "spacetime")
        cell_loading = np.zeros(st.shape[1])
        for t, mass in enumerate(time_loading_row):
            if mass:
                cell_loading[t * n + region_k] = mass
        eta += w_st * (st @ cell_loading)
    if "slope" in meta["components"]:
        scale = meta["components"]["slope"]["scale"]
        eta += scale * _block_draws(matrix, meta, "slope")[:, region_k] * tsc_value
    return eta


def _ensure_weight_rules(result_or_meta):
    meta = result_or_meta.meta if isinstance(result_or_meta, FitResult) else result_or_meta
    if "weight_rules" not in meta:
        raise ValueError("fit metadata lacks weight rules; was it saved by this package?")
    return meta


def smooth_direct_estimates(result: FitResult, probs=(0.025, 0.5, 0.975)) -> pd.DataFrame:
    """Posterior estimates of prevalence per region and period.

    The estimand is the full latent predictor, including the iid time
    component; probability-scale quantiles are the expit of the
    logit-scale type-7 quantiles.  Periods with no observed data are
    flagged as projections.
    """
    meta = result.meta
    if meta.get("family") != "smooth-direct":
        raise ValueError("smooth_direct_estimates requires a smoothed-direct fit")
    matrix = result.draws.draws
    periods = meta["periods"]
    m = meta["m"]
    n_time = len(periods) * m
    tsc = _time_scale(n_time)
    observed = set(meta["observed_periods"])
    rows = []
    for k, region in enumerate(meta["regions"]):
        for p, period in enumerate(periods):
            loading = np.zeros(n_time)
            loading[p * m : (p + 1) * m] = 1.0 / m
            eta = _predictor_draws(matrix, meta, k, loading, float(loading @ tsc), True)
            lo, med, hi = np.quantile(eta, probs)
            rows.append(
                {
                    "region": region,
                    "years": period,
                    "stratum": "overall",
                    "median": float(expit(med)),
                    "lower": float(expit(lo)),
                    "upper": float(expit(hi)),
                    "logit.mean": float(eta.mean()),
                    "logit.var": float(eta.var(ddof=1)),
                    "is.projection": period not in observed,
                }
            )
    return pd.DataFrame(rows)[list(ESTIMATE_COLUMNS)]


# ---------------------------------------------------------------------------
# Cluster-level beta-binomial model


def _strata_levels(counts: pd.DataFrame):
    if "strata" not in counts.columns or counts["strata"].isna().all():
        return [None]
    if counts["strata"].isna().any():
        raise ValueError("strata must be fully labeled or fully missing")
    levels = sorted(set(counts["strata"]))
    allowed = {"urban", "rural"}
    if not set(levels) <= allowed:
        raise ValueError(f"stratum labels must be within {sorted(allowed)}, got {levels}")
    return levels


def _walk_key(group_label, stratum, time_invariant):
    if stratum is None or time_invariant:
        return str(group_label)
    return f"{group_label}|{stratum}"


def build_smooth_cluster(
    counts: pd.DataFrame,
    graph: RegionGraph | None,
    spec: LatentModelSpec,
    schema: AgeBandSchema,
):
    """Cluster-level beta-binomial model for age-band death counts.

    Rows are (cluster, region, period, age-band) counts.  The predictor
    combines per-age-band-per-stratum intercepts, per-age-group temporal
    walks sharing a single scale parameter, an iid time effect, BYM2
    space, a space-time interaction, optional survey fixed effects with
    per-frame sum-to-zero constraints, reporting-bias offsets, and
    optional random slopes.
    """
    required = {"cluster", "region", "years", "age", "Y", "total"}
    if not required <= set(counts.columns):
        raise ValueError(f"counts table is missing columns {sorted(required - set(counts.columns))}")
    counts = counts.reset_index(drop=True)
    national = graph is None
    if not national:
        unknown = sorted(set(counts["region"]) - set(graph.names))
        if unknown:
            raise ValueError(f"regions absent from the graph: {unknown}")
    bands = list(schema.band_labels)
    unknown_bands = sorted(set(counts["age"].astype(str)) - set(bands))
    if unknown_bands:
        raise ValueError(f"age bands absent from the schema: {unknown_bands}")
    strata = _strata_levels(counts)
    periods = _ordered_periods(counts["years"], spec.year_label)
    regions = ["All"] if national else list(graph.names)
    m = spec.years_per_period
    n_time = len(periods) * m
    tsc = _time_scale(n_time)
    n_rows = len(counts)

    period_idx = np.array([periods.index(str(p)) for p in counts["years"]])
    region_idx = (
        np.zeros(n_rows, dtype=int)
        if national
        else np.array([graph.names.index(r) for r in counts["region"]])
    )
    band_idx = np.array([bands.index(str(a)) for a in counts["age"]])
    group_labels = list(schema.trend_group_labels)
    band_group = np.array([schema.trend_groups[b] for b in band_idx])
    stratum_idx = (
        np.zeros(n_rows, dtype=int)
        if strata == [None]
        else np.array([strata.index(s) for s in counts["strata"]])
    )
    time_loading = _period_loading(period_idx, len(periods), m)

    meta = {
        "family": "smooth-cluster",
        "regions": regions,
        "periods": periods,
        "m": m,
        "yearly": spec.yearly,
        "time_model": spec.time_model,
        "national": national,
        "bands": bands,
        "band_groups": [group_labels[schema.trend_groups[b]] for b in range(len(bands))],
        "z": [int(v) for v in schema.band_lengths],
        "strata": ["overall"] if strata == [None] else strata,
        "stratified": strata != [None],
        "time_invariant": spec.strata_time_invariant,
        "components": {},
        "observed_periods": sorted({str(p) for p in counts["years"]}),
        "spec": spec_to_json(spec),
    }

    # Fixed effects: per band-stratum intercepts (+ per-walk linear trends).
    fixed_names = []
    fixed_cols = []
    intercept_names = {}
    for b, band in enumerate(bands):
        for s, stratum in enumerate(strata):
            name = f"age:{band}" if stratum is None else f"age:{band}|{stratum}"
            mask = (band_idx == b) & (stratum_idx == s)
            fixed_names.append(name)
            fixed_cols.append(mask.astype(float))
            intercept_names[f"{band}|{stratum or 'overall'}"] = name
    meta["intercepts"] = intercept_names

    # Temporal walks: one stacked component sharing a single scale.
    walk_keys = []
    for g, glabel in enumerate(group_labels):
        for s, stratum in enumerate(strata):
            key = _walk_key(glabel, stratum, spec.strata_time_invariant)
            if key not in walk_keys:
                walk_keys.append(key)
    row_walk = np.empty(n_rows, dtype=int)
    for r in range(n_rows):
        key = _walk_key(
            group_labels[band_group[r]],
            None if strata == [None] else strata[stratum_idx[r]],
            spec.strata_time_invariant,
        )
        row_walk[r] = walk_keys.index(key)
    n_walks = len(walk_keys)
    walk_incidence = np.zeros((n_rows, n_walks * n_time))
    for r in range(n_rows):
        base = row_walk[r] * n_time
        walk_incidence[r, base : base + n_time] = time_loading[r]
    q_t, cons_t, omega_prior, structure_fn = _temporal_structure(spec.time_model, n_time, spec)
    walk_structure = block_diag(*([q_t] * n_walks))
    walk_rows = block_diag(*([cons_t.matrix] * n_walks))
    walk_fn = None
    if structure_fn is not None:

        def walk_fn(w, _fn=structure_fn, _k=n_walks):
            return block_diag(*([_fn(w)] * _k))

    trend_names = {}
    if spec.linear_trend and spec.time_model == "rw2":
        for k, key in enumerate(walk_keys):
            name = f"trend:{key}"
            trend_names[key] = name
            fixed_names.append(name)
            fixed_cols.append((row_walk == k) * (time_loading @ tsc))
    meta["trend_cols"] = trend_names
    meta["walks"] = {"component": "time", "keys": walk_keys, "n_time": n_time}

    components = [
        Component(
            name="time",
            incidence=walk_incidence,
            structure=walk_structure,
            constraints=ConstraintSet(walk_rows),
            sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
            omega_prior=omega_prior,
            omega0=spec.pc_u_omega,
            structure_fn=walk_fn,
        )
    ]
    meta["components"]["time"] = {"size": n_walks * n_time, "role": "walk"}
    components.append(
        Component(
            name="time:iid",
            incidence=time_loading,
            structure=np.eye(n_time),
            sigma_prior=PCSigmaPrior(spec.pc_u, spec.pc_alpha),
        )
    )
    meta["components"]["time:iid"] = {"size": n_time, "role": "iid-time"}

    if not national:
        _spatial_components(spec, graph, region_idx, time_loading, tsc, components, meta)

    # Survey fixed effects with per-frame sum-to-zero constraints.
    surveys = []
    if "survey" in counts.columns and counts["survey"].notna().any():
        surveys = sorted({str(s) for s in counts["survey"].dropna()})
    meta["surveys"] = surveys
    if spec.survey_effect:
        if len(surveys) < 2:
            warnings.warn("survey effects requested with fewer than two surveys; effects are zero")
        if surveys:
            if "frame" in counts.columns:
                pairs = counts[["survey", "frame"]].dropna().astype(str).drop_duplicates()
                if pairs["survey"].duplicated().any():
                    raise ValueError("each survey must map to exactly one sampling frame")
                frames = dict(zip(pairs["survey"], pairs["frame"]))
            else:
                frames = {s: "frame0" for s in surveys}
            frame_levels = sorted(set(frames.values()))
            rows = np.zeros((len(frame_levels), len(surveys)))
            for j, s in enumerate(surveys):
                rows[frame_levels.index(frames[s]), j] = 1.0
            survey_z = np.zeros((n_rows, len(surveys)))
            known = counts["survey"].notna().to_numpy()
            survey_col = counts["survey"].astype(str).to_numpy()
            for j, s in enumerate(surveys):
                survey_z[known & (survey_col == s), j] = 1.0
            components.append(
                Component(
                    name="survey",
                    incidence=survey_z,
                    structure=np.eye(len(surveys)) / 31.6**2,
                    constraints=ConstraintSet(rows),
                    update="coordinate",
                )
            )
            meta["components"]["survey"] = {"size": len(surveys), "role": "survey"}
            meta["frames"] = frames

    # Reporting-bias adjustments enter as log-ratio offsets on the predictor.
    offsets = np.zeros(n_rows)
    if spec.bias_adj:
        for row in spec.bias_adj:
            ratio = float(row["ratio"])
            if ratio <= 0:
                raise ValueError("bias adjustment ratios must be positive")
            mask = counts["years"].astype(str) == str(row["years"])
            if "survey" in row and row["survey"] is not None and "survey" in counts.columns:
                mask &= counts["survey"].astype(str) == str(row["survey"])
            offsets[mask.to_numpy()] += np.log(ratio)

    likelihood = BetaBinomialLikelihood(
        deaths=counts["Y"].to_numpy(dtype=float),
        trials=counts["total"].to_numpy(dtype=float),
        rho_prior=BoundedExponentialPrior(spec.overdisp_u, spec.overdisp_alpha),
    )
    model = LatentModel(
        components=components,
        likelihood=likelihood,
        fixed_effects=FixedEffects(np.column_stack(fixed_cols), tuple(fixed_names)),
        offsets=offsets,
    )
    meta["fixed_names"] = fixed_names
    return model, _finish_meta(meta, model)


def fit_smooth_cluster(
    counts, graph, spec, schema, seed=0, n_draws=1000, n_burnin=1000, n_chains=4, n_ess=2
) -> FitResult:
    model, meta = build_smooth_cluster(counts, graph, spec, schema)
    draws = fit_betabinomial_lgm(
        model, seed=seed, n_draws=n_draws, n_burnin=n_burnin, n_chains=n_chains, n_ess=n_ess
    )
    return _store_layout(FitResult(draws=draws, meta=meta, model=model))


# ---------------------------------------------------------------------------
# Prediction


@dataclass
class U5MRDraws:
    """Per-draw prevalence for a grid of (region, period, stratum) cells."""

    cells: pd.DataFrame
    values: np.ndarray  # (n_draws, n_cells)

    def summarize(self, probs=(0.025, 0.5, 0.975)) -> pd.DataFrame:
        # Probability-scale quantiles are the expit of logit-scale draw
        # quantiles, so medians are equivariant under the transform.
        logit_values = logit(np.clip(self.values, 1e-12, 1 - 1e-12))
        lo, med, hi = expit(np.quantile(logit_values, probs, axis=0))
        out = self.cells.copy()
        out["median"] = med
        out["lower"] = lo
        out["upper"] = hi
        out["logit.mean"] = logit_values.mean(axis=0)
        out["logit.var"] = logit_values.var(axis=0, ddof=1)
        return out

    def select(self, **conditions) -> "U5MRDraws":
        mask = np.ones(len(self.cells), dtype=bool)
        for key, value in conditions.items():
            mask &= (self.cells[key] == value).to_numpy()
        return U5MRDraws(self.cells[mask].reset_index(drop=True), self.values[:, mask])


def predict_u5mr(result: FitResult, include_time_iid: bool = False, strata=None) -> U5MRDraws:
    """Per-draw U5MR per region, period, and stratum from a cluster fit.

    Survey effects and bias offsets are never included; the iid time
    component is excluded unless requested.  The prevalence is the
    synthetic-cohort product over age bands of the band hazards.
    ``strata`` restricts the output to a subset of the fitted strata.
    """
    meta = _ensure_weight_rules(result)
    if meta.get("family") != "smooth-cluster":
        raise ValueError("predict_u5mr requires a cluster-level fit")
    matrix = result.draws.draws
    columns = meta["columns"]
    rules = meta["weight_rules"]
    periods = meta["periods"]
    m = meta["m"]
    n_time = len(periods) * m
    tsc = _time_scale(n_time)
    bands = meta["bands"]
    z = np.asarray(meta["z"], dtype=float)
    strata = list(meta["strata"]) if strata is None else [str(s) for s in strata]
    unknown = sorted(set(strata) - set(meta["strata"]))
    if unknown:
        raise ValueError(f"no fitted walks for strata {unknown}; available: {meta['strata']}")
    regions = meta["regions"]
    walk_keys = meta["walks"]["keys"]
    time_draws = _block_draws(matrix, meta, "time")
    (w_time,) = _component_weights(matrix, columns, rules["time"])
    n_draws = matrix.shape[0]

    cells = []
    values = np.empty((n_draws, len(regions) * len(periods) * len(strata)))
    cell = 0
    for k, region in enumerate(regions):
        for p, period in enumerate(periods):
            loading = np.zeros(n_time)
            loading[p * m : (p + 1) * m] = 1.0 / m
            tsc_value = float(loading @ tsc)
            shared = np.zeros(n_draws)
            if "space" in meta["components"]:
                w_e, w_s = _component_weights(matrix, columns, rules["space"])
                shared = shared + w_e * _block_draws(matrix, meta, "space:iid")[:, k]
                shared = shared + w_s * _block_draws(matrix, meta, "space:str")[:, k]
            if "spacetime" in meta["components"]:
                n = len(regions)
                (w_st,) = _component_weights(matrix, columns, rules["spacetime"])
                st = _block_draws(matrix, meta, "spacetime")
                cell_loading = np.zeros(st.shape[1])
                for t, mass in enumerate(loading):
                    if mass:
                        cell_loading[t * n + k] = mass
                shared = shared + w_st * (st @ cell_loading)
            if "slope" in meta["components"]:
                scale = meta["components"]["slope"]["scale"]
                shared = shared + scale * _block_draws(matrix, meta, "slope")[:, k] * tsc_value
            if include_time_iid:
                (w_iid,) = _component_weights(matrix, columns, rules["time:iid"])
                shared = shared + w_iid * (_block_draws(matrix, meta, "time:iid") @ loading)
            for stratum in strata:
                survival = np.ones(n_draws)
                for b, band in enumerate(bands):
                    key = meta["band_groups"][b]
                    if meta["stratified"] and not meta["time_invariant"]:
                        key = f"{key}|{stratum}"
                    widx = walk_keys.index(key)
                    walk_part = time_draws[:, widx * n_time : (widx + 1) * n_time] @ loading
                    eta = shared + w_time * walk_part
                    eta = eta + _fixed_column(matrix, meta, meta["intercepts"][f"{band}|{stratum}"])
                    trend_name = meta["trend_cols"].get(key)
                    if trend_name:
                        eta = eta + _fixed_column(matrix, meta, trend_name) * tsc_value
                    survival = survival * (1.0 - expit(eta)) ** z[b]
                values[:, cell] = 1.0 - survival
                cells.append({"region": region, "years": period, "stratum": stratum})
                cell += 1
    return U5MRDraws(pd.DataFrame(cells), values)


def aggregate_strata(draws: U5MRDraws, props: pd.DataFrame | None, frame=None) -> U5MRDraws:
    """Convex per-draw combination of urban and rural prevalence.

    ``props`` columns: region, years, q_urban (optional frame).  With no
    proportions the overall output is empty; partial coverage of the
    stratified grid is rejected.
    """
    strata = set(draws.cells["stratum"])
    if not {"urban", "rural"} <= strata:
        raise ValueError("aggregate_strata requires urban and rural draws")
    grid = draws.cells[draws.cells["stratum"] == "urban"][["region", "years"]]
    if props is None:
        return U5MRDraws(
            pd.DataFrame(columns=["region", "years", "stratum"]),
            np.empty((draws.values.shape[0], 0)),
        )
    props = props.copy()
    if frame is not None and "frame" in props.columns:
        props = props[props["frame"] == frame]
    if not {"region", "years", "q_urban"} <= set(props.columns):
        raise ValueError("props needs columns region, years, q_urban")
    q = np.asarray(props["q_urban"], dtype=float)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("urban proportions must lie in [0, 1]")
    lookup = {
        (str(r), str(y)): float(v)
        for r, y, v in zip(props["region"], props["years"], props["q_urban"])
    }
    missing = [
        (r, y)
        for r, y in zip(grid["region"], grid["years"])
        if (str(r), str(y)) not in lookup
    ]
    if missing:
        raise ValueError(f"proportions missing for cells: {missing[:5]}")
    cells = []
    values = np.empty((draws.values.shape[0], len(grid)))
    urban = draws.select(stratum="urban")
    rural = draws.select(stratum="rural")
    for j, (region, years) in enumerate(zip(grid["region"], grid["years"])):
        qv = lookup[(str(region), str(years))]
        u_col = urban.cells.index[(urban.cells["region"] == region) & (urban.cells["years"] == years)][0]
        r_col = rural.cells.index[(rural.cells["region"] == region) & (rural.cells["years"] == years)][0]
        values[:, j] = qv * urban.values[:, u_col] + (1.0 - qv) * rural.values[:, r_col]
        cells.append({"region": region, "years": years, "stratum": "overall"})
    return U5MRDraws(pd.DataFrame(cells), values)


def frame_weights(variances) -> np.ndarray:
    """Normalized inverse-variance weights along the first axis."""
    variances = np.asarray(variances, dtype=float)
    if np.any(variances <= 0):
        raise ValueError("variances must be positive")
    precision = 1.0 / variances
    return precision / precision.sum(axis=0, keepdims=True)


def combine_frames(frame_draws: dict) -> U5MRDraws:
    """Inverse-variance combination of per-frame posteriors on the logit scale.

    Weights per cell are proportional to the reciprocal posterior
    variance of the logit draws; the combined draw is the expit of the
    weighted sum, draw by draw.
    """
    if not frame_draws:
        raise ValueError("no frames to combine")
    items = list(frame_draws.values())
    first = items[0]
    key_cols = ["region", "years", "stratum"]
    for other in items[1:]:
        if not first.cells[key_cols].equals(other.cells[key_cols]):
            raise ValueError("frames must cover identical cells in identical order")
        if other.values.shape != first.values.shape:
            raise ValueError("frames must have equal draw counts")
    logits = np.stack(
        [logit(np.clip(item.values, 1e-12, 1 - 1e-12)) for item in items], axis=0
    )
    weights = frame_weights(logits.var(axis=1, ddof=1))  # (n_frames, n_cells)
    combined = np.einsum("fc,fdc->dc", weights, logits)
    return U5MRDraws(first.cells.copy(), expit(combined))


def benchmark_to_series(estimates: pd.DataFrame, target: pd.DataFrame):
    """Ratio of national model medians to an external target series.

    Returns (ratio table with columns years, ratio; warnings list);
    target years absent from the estimates are skipped and vice versa.
    """
    if not {"years", "median"} <= set(estimates.columns):
        raise ValueError("estimates need columns years, median")
    if not {"years", "mean"} <= set(target.columns):
        raise ValueError("target needs columns years, mean")
    if estimates["years"].astype(str).duplicated().any():
        raise ValueError("estimates must hold one national row per period")
    target_map = {str(y): float(v) for y, v in zip(target["years"], target["mean"])}
    rows = []
    warnings_list = []
    for _, row in estimates.iterrows():
        year = str(row["years"])
        if year not in target_map:
            warnings_list.append(f"no target value for period {year!r}; omitted")
            continue
        rows.append({"years": year, "ratio": float(row["median"]) / target_map[year]})
    return pd.DataFrame(rows), warnings_list


# ---------------------------------------------------------------------------
# Labeled effect summaries


def _summaries(draws_matrix, probs=(0.025, 0.5, 0.975)):
    lo, med, hi = np.quantile(draws_matrix, probs, axis=0)
    return med, lo, hi


def extract_diagnostics(result: FitResult, which: str) -> pd.DataFrame:
    """Posterior summaries of individual latent effects, labeled.

    ``which`` is one of ``time`` (walks and iid time), ``space`` (BYM2
    total, structured, and iid parts per region), or ``spacetime``
    (interaction effects and random slopes).
    """
    meta = _ensure_weight_rules(result)
    matrix = result.draws.draws
    columns = meta["columns"]
    rules = meta["weight_rules"]
    available = ["time"]
    if "space" in meta["components"]:
        available.append("space")
    if "spacetime" in meta["components"] or "slope" in meta["components"]:
        available.append("spacetime")
    if which not in available:
        raise ValueError(f"unknown field {which!r}; available: {available}")
    periods = meta["periods"]
    m = meta["m"]
    n_time = len(periods) * m
    year_labels = (
        [f"{p}.{j + 1}" for p in periods for j in range(m)] if m > 1 else list(periods)
    )
    rows = []
    if which == "time":
        (w_time,) = _component_weights(matrix, columns, rules["time"])
        time_draws = _block_draws(matrix, meta, "time")
        if meta["family"] == "smooth-cluster":
            keys = meta["walks"]["keys"]
        else:
            keys = [meta["time_model"]]
        for widx, key in enumerate(keys):
            effect = w_time[:, None] * time_draws[:, widx * n_time : (widx + 1) * n_time]
            med, lo, hi = _summaries(effect)
            for t in range(n_time):
                rows.append(
                    {
                        "component": meta["time_model"] if len(keys) == 1 else f"{meta['time_model']}:{key}",
                        "label": year_labels[t],
                        "median": med[t],
                        "lower": lo[t],
                        "upper": hi[t],
                    }
                )
        (w_iid,) = _component_weights(matrix, columns, rules["time:iid"])
        effect = w_iid[:, None] * _block_draws(matrix, meta, "time:iid")
        med, lo, hi = _summaries(effect)
        for t in range(n_time):
            rows.append(
                {
                    "component": "iid",
                    "label": year_labels[t],
                    "median": med[t],
                    "lower": lo[t],
                    "upper": hi[t],
                }
            )
    elif which == "space":
        w_e, w_s = _component_weights(matrix, columns, rules["space"])
        iid = w_e[:, None] * _block_draws(matrix, meta, "space:iid")
        struct = w_s[:, None] * _block_draws(matrix, meta, "space:str")
        for name, effect in (("total", iid + struct), ("structured", struct), ("iid", iid)):
            med, lo, hi = _summaries(effect)
            for k, region in enumerate(meta["regions"]):
                rows.append(
                    {
                        "component": name,
                        "label": region,
                        "median": med[k],
                        "lower": lo[k],
                        "upper": hi[k],
                    }
                )
    else:
        if "spacetime" in meta["components"]:
            (w_st,) = _component_weights(matrix, columns, rules["spacetime"])
            st = w_st[:, None] * _block_draws(matrix, meta, "spacetime")
            med, lo, hi = _summaries(st)
            n = len(meta["regions"])
            for t in range(n_time):
                for k, region in enumerate(meta["regions"]):
                    rows.append(
                        {
                            "component": "interaction",
                            "label": f"{region}:{year_labels[t]}",
                            "median": med[t * n + k],
                            "lower": lo[t * n + k],
                            "upper": hi[t * n + k],
                        }
                    )
        if "slope" in meta["components"]:
            scale = meta["components"]["slope"]["scale"]
            effect = scale * _block_draws(matrix, meta, "slope")
            med, lo, hi = _summaries(effect)
            for k, region in enumerate(meta["regions"]):
                rows.append(
                    {
                        "component": "slope",
                        "label": region,
                        "median": med[k],
                        "lower": lo[k],
                        "upper": hi[k],
                    }
                )
    out = pd.DataFrame(rows)
    out.insert(0, "field", which)
    return out


# ---------------------------------------------------------------------------
# Fit bundles on disk


def save_fit(result: FitResult, directory) -> Path:
    """Write draws.csv, meta.json, diagnostics.json into a bundle directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    result.draws.to_csv(directory / "draws.csv")
    with open(directory / "meta.json", "w") as fh:
        json.dump(result.meta, fh, indent=1, sort_keys=True)
    with open(directory / "diagnostics.json", "w") as fh:
        json.dump(result.draws.diagnostics, fh, indent=1, sort_keys=True)
    return directory


def load_fit(directory) -> FitResult:
    """Rebuild a FitResult from a bundle directory written by save_fit."""
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    frame = pd.read_csv(directory / "draws.csv")
    diagnostics = {}
    diag_path = directory / "diagnostics.json"
    if diag_path.exists():
        with open(diag_path) as fh:
            diagnostics = json.load(fh)
    draws = PosteriorDraws(
        draws=frame.to_numpy(dtype=float),
        columns=tuple(frame.columns),
        component_index={k: tuple(v) for k, v in meta["component_index"].items()},
        hyper_index=dict(meta["hyper_index"]),
        seed=meta.get("seed", 0),
        n_chains=meta.get("n_chains", 1),
        n_draws_per_chain=meta.get("n_draws_per_chain", len(frame)),
        diagnostics=diagnostics,
    )
    return FitResult(draws=draws, meta=meta, model=None)
