"""Design-based direct estimation from weighted person-month data.

Weighted (Horvitz-Thompson style) ratio estimates of monthly hazards by
age band are combined into period prevalence through the synthetic-cohort
survival product; uncertainty comes from a leave-one-cluster-out
jackknife on the logit scale, with a Taylor-linearization variance kept
as a documented secondary mode for the single-band (binary indicator)
case.  Estimates from several surveys are pooled by inverse-variance
weighting of the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import norm

from .survey import AgeBandSchema

__all__ = [
    "HTEstimate",
    "JackknifeConfig",
    "DIRECT_COLUMNS",
    "ht_estimate",
    "logit_delta_variance",
    "taylor_logit_variance",
    "cluster_jackknife",
    "direct_u5mr",
    "direct_all",
    "aggregate_surveys",
    "adjust_ratio",
]

DIRECT_COLUMNS = (
    "region",
    "years",
    "mean",
    "lower",
    "upper",
    "logit.est",
    "var.est",
    "survey",
    "logit.prec",
)

# Adjusted probabilities are capped just below one so logits stay finite.
PROBABILITY_CAP = 1.0 - 1e-9


class HTEstimate(NamedTuple):
    estimate: float
    degenerate: bool


@dataclass(frozen=True)
class JackknifeConfig:
    """Leave-one-unit-out resampling plan for design-based variances."""

    unit: str = "cluster"
    interval_level: float = 0.95

    def __post_init__(self):
        if self.unit != "cluster":
            raise ValueError("only cluster-level jackknife is supported")
        if not 0.0 < self.interval_level < 1.0:
            raise ValueError("interval_level must lie in (0, 1)")

    @property
    def z_value(self) -> float:
        return float(norm.ppf(0.5 + self.interval_level / 2.0))


def ht_estimate(indicators, weights) -> HTEstimate:
    """Weighted mean of a binary indicator: sum(w*y) / sum(w).

    Returns the estimate together with a flag marking degenerate inputs
    (all indicators equal), where the logit scale is unusable.
    """
    y = np.asarray(indicators, dtype=float)
    w = np.asarray(weights, dtype=float)
    if y.shape != w.shape or y.ndim != 1 or y.size == 0:
        raise ValueError("indicators and weights must be equal-length 1-d arrays")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("indicators must be 0/1")
    estimate = float(np.sum(w * y) / np.sum(w))
    return HTEstimate(estimate, bool(np.all(y == y[0])))


def logit_delta_variance(p: float, var_p: float) -> float:
    """Delta-method variance of logit(p) given the variance of p.

    Returns the missing marker (NaN) at degenerate ``p`` in {0, 1}.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if var_p < 0:
        raise ValueError("var_p must be non-negative")
    if p in (0.0, 1.0):
        return float("nan")
    return var_p / (p * (1.0 - p)) ** 2


def taylor_logit_variance(indicators, weights, clusters) -> float:
    """Linearization variance of a weighted binary proportion, on logits.

    Secondary variance mode for the single-band case: the classical
    with-replacement first-stage approximation from cluster totals of
    the estimating-equation residuals, pushed through the delta method.
    """
    y = np.asarray(indicators, dtype=float)
    w = np.asarray(weights, dtype=float)
    codes, _ = pd.factorize(np.asarray(clusters))
    n_clusters = codes.max() + 1
    if n_clusters < 2:
        return float("nan")
    p = ht_estimate(y, w).estimate
    if p in (0.0, 1.0):
        return float("nan")
    wy = np.bincount(codes, weights=w * y, minlength=n_clusters)
    wt = np.bincount(codes, weights=w, minlength=n_clusters)
    residuals = wy - p * wt
    var_p = n_clusters / (n_clusters - 1) * np.sum(residuals**2) / np.sum(wt) ** 2
    return logit_delta_variance(p, var_p)


def cluster_jackknife(statistic, clusters) -> float:
    """Delete-one-cluster jackknife variance of a statistic.

    Parameters
    ----------
    statistic : callable
        Maps a boolean keep-mask over rows to a float, or NaN when the
        replicate is degenerate; degenerate replicates are dropped.
    clusters : array-like
        Cluster label per row.

    Returns
    -------
    float
        ``(g - 1)/g * sum((theta_i - mean)^2)`` over the ``g`` valid
        replicates; NaN when fewer than two are valid.
    """
    codes, uniques = pd.factorize(np.asarray(clusters))
    if len(uniques) < 2:
        return float("nan")
    replicates = []
    for k in range(len(uniques)):
        value = statistic(codes != k)
        if np.isfinite(value):
            replicates.append(value)
    if len(replicates) < 2:
        return float("nan")
    theta = np.asarray(replicates)
    g = theta.size
    return float((g - 1) / g * np.sum((theta - theta.mean()) ** 2))


def _survival_product_logit(death_w, total_w, z):
    """logit(1 - prod((1 - hazard)^z)) from per-band weighted sums.

    NaN when any band has zero exposure or the product is degenerate.
    """
    if np.any(total_w <= 0):
        return float("nan")
    hazards = death_w / total_w
    prevalence = 1.0 - np.prod((1.0 - hazards) ** z)
    if not 0.0 < prevalence < 1.0:
        return float("nan")
    return float(logit(prevalence))


def direct_u5mr(
    person_months: pd.DataFrame,
    schema: AgeBandSchema,
    jackknife: JackknifeConfig | None = JackknifeConfig(),
) -> dict:
    """Direct prevalence estimate for one area-period of person-months.

    Per age band the monthly hazard is the weighted death proportion;
    the point estimate is one minus the survival product across bands
    raised to the band lengths.  The variance of the logit comes from
    the cluster jackknife (pass ``jackknife=None`` to skip it).

    Returns
    -------
    dict
        Keys ``mean, lower, upper, logit.est, var.est, logit.prec``;
        all NaN when the cell is degenerate (no deaths, a band without
        exposure, or prevalence one).
    """
    missing = {
        "mean": np.nan,
        "lower": np.nan,
        "upper": np.nan,
        "logit.est": np.nan,
        "var.est": np.nan,
        "logit.prec": np.nan,
    }
    if len(person_months) == 0:
        return missing
    labels = list(schema.band_labels)
    band = pd.Categorical(person_months["age"], categories=labels)
    if band.isna().any():
        raise ValueError("person-month age bands do not match the schema")
    codes = band.codes.astype(int)
    w = person_months["weights"].to_numpy(dtype=float)
    died = person_months["died"].to_numpy(dtype=float)
    z = schema.band_lengths

    n_bands = len(labels)
    death_w = np.bincount(codes, weights=w * died, minlength=n_bands)
    total_w = np.bincount(codes, weights=w, minlength=n_bands)
    logit_est = _survival_product_logit(death_w, total_w, z)
    if not np.isfinite(logit_est):
        return missing

    estimate = float(expit(logit_est))
    result = dict(missing)
    result["mean"] = estimate
    result["logit.est"] = logit_est
    if jackknife is None:
        return result

    cluster_codes, uniques = pd.factorize(person_months["clustid"].to_numpy())
    death_wc = np.zeros((len(uniques), n_bands))
    total_wc = np.zeros((len(uniques), n_bands))
    np.add.at(death_wc, (cluster_codes, codes), w * died)
    np.add.at(total_wc, (cluster_codes, codes), w)

    def leave_out(keep_mask):
        k = int(np.flatnonzero(~keep_mask)[0])
        return _survival_product_logit(death_w - death_wc[k], total_w - total_wc[k], z)

    # cluster_jackknife expects row masks; give it one pseudo-row per cluster.
    var_est = cluster_jackknife(leave_out, np.arange(len(uniques)))
    if not np.isfinite(var_est) or var_est <= 0:
        return result
    sd = math.sqrt(var_est)
    zq = jackknife.z_value
    result["var.est"] = var_est
    result["logit.prec"] = 1.0 / var_est
    result["lower"] = float(expit(logit_est - zq * sd))
    result["upper"] = float(expit(logit_est + zq * sd))
    return result


def _one_survey_direct(person_months, regions, periods, schema, jackknife, survey):
    rows = []
    region_values = person_months["region"].unique()
    unknown = sorted(set(region_values) - set(regions))
    if unknown:
        raise ValueError(f"person-month regions not in region list: {unknown}")
    for region in ("All",) + tuple(regions):
        if region == "All":
            sub_region = person_months
        else:
            sub_region = person_months[person_months["region"] == region]
        for period in periods:
            sub = sub_region[sub_region["time"] == period]
            est = direct_u5mr(sub, schema, jackknife)
            est.update({"region": region, "years": period, "survey": survey})
            rows.append(est)
    return rows


def direct_all(
    person_months,
    regions: Sequence[str],
    periods: Sequence[str],
    schema: AgeBandSchema,
    jackknife: JackknifeConfig | None = JackknifeConfig(),
) -> pd.DataFrame:
    """Direct estimates for every region-period cell plus national rows.

    Parameters
    ----------
    person_months : DataFrame or mapping
        Person-month table, or ``{survey_label: table}`` for several
        surveys.
    regions, periods : sequence of str
        Full grids; cells without usable data appear as missing-marker
        rows.  Unknown region labels in the data are rejected.

    Returns
    -------
    DataFrame
        ``DIRECT_COLUMNS`` layout with national ``"All"`` rows first
        within each survey.
    """
    if isinstance(person_months, pd.DataFrame):
        surveys = {None: person_months}
    else:
        surveys = dict(person_months)
    rows = []
    for survey, table in surveys.items():
        rows.extend(
            _one_survey_direct(table, tuple(regions), tuple(periods), schema, jackknife, survey)
        )
    frame = pd.DataFrame(rows)
    return frame[list(DIRECT_COLUMNS)]


def aggregate_surveys(direct: pd.DataFrame) -> pd.DataFrame:
    """Pool per-survey direct estimates by inverse-variance weighting.

    Combination happens on the logit scale per region-period cell;
    degenerate (missing) inputs are skipped, and a cell with no usable
    input stays a missing-marker row.  Intervals reuse the normal
    quantile convention of the inputs.
    """
    required = {"region", "years", "logit.est", "var.est"}
    missing_cols = required - set(direct.columns)
    if missing_cols:
        raise ValueError(f"direct table is missing columns {sorted(missing_cols)}")
    rows = []
    zq = float(norm.ppf(0.975))
    for (region, years), group in direct.groupby(["region", "years"], sort=False):
        usable = group[np.isfinite(group["logit.est"]) & np.isfinite(group["var.est"])]
        row = {
            "region": region,
            "years": years,
            "mean": np.nan,
            "lower": np.nan,
            "upper": np.nan,
            "logit.est": np.nan,
            "var.est": np.nan,
            "survey": None,
            "logit.prec": np.nan,
        }
        if len(usable):
            precision = 1.0 / usable["var.est"].to_numpy(dtype=float)
            total = precision.sum()
            pooled = float(np.sum(precision * usable["logit.est"].to_numpy()) / total)
            var = 1.0 / float(total)
            row.update(
                {
                    "mean": float(expit(pooled)),
                    "lower": float(expit(pooled - zq * math.sqrt(var))),
                    "upper": float(expit(pooled + zq * math.sqrt(var))),
                    "logit.est": pooled,
                    "var.est": var,
                    "logit.prec": total,
                }
            )
        rows.append(row)
    return pd.DataFrame(rows)[list(DIRECT_COLUMNS)]


def adjust_ratio(direct: pd.DataFrame, ratios: pd.DataFrame, invert: bool = False):
    """Multiply direct estimates by per-period adjustment ratios.

    The probability-scale point estimate and interval endpoints are
    multiplied by the matched ratio (capped just below one); the logit
    estimate is recomputed and the logit variance is recovered from the
    adjusted interval by inverting the symmetric normal-quantile
    convention.

    Parameters
    ----------
    direct : DataFrame
        ``DIRECT_COLUMNS`` table.
    ratios : DataFrame
        Columns ``years`` and ``ratio``; an optional ``survey`` column
        restricts matches to that survey.
    invert : bool
        Apply the reciprocal ratios (used when closing the loop against
        an external benchmark series, where the supplied ratios are
        estimate-over-target).

    Returns
    -------
    (DataFrame, list of str)
        The adjusted table and warnings for unmatched rows, which are
        returned unadjusted.
    """
    if not {"years", "ratio"} <= set(ratios.columns):
        raise ValueError("ratios must have 'years' and 'ratio' columns")
    if np.any(~(ratios["ratio"].to_numpy(dtype=float) > 0)):
        raise ValueError("ratios must be positive")
    by_survey = "survey" in ratios.columns
    lookup = {}
    for _, row in ratios.iterrows():
        key = (row["years"], row["survey"]) if by_survey else row["years"]
        lookup[key] = float(row["ratio"])

    zq = float(norm.ppf(0.975))
    adjusted = direct.copy()
    warnings = []
    for i in adjusted.index:
        row = adjusted.loc[i]
        key = (row["years"], row["survey"]) if by_survey else row["years"]
        if key not in lookup:
            warnings.append(f"no ratio for {key!r}; row left unadjusted")
            continue
        ratio = lookup[key]
        if not np.isfinite(row["mean"]):
            continue

        # Division (rather than multiplying by the reciprocal) keeps the
        # apply-then-undo round trip exact for dyadic ratios.
        def scale(value):
            scaled = value / ratio if invert else value * ratio
            return min(scaled, PROBABILITY_CAP)

        mean = scale(row["mean"])
        lower = scale(row["lower"])
        upper = scale(row["upper"])
        logit_est = float(logit(mean))
        var_est = float(((logit(upper) - logit(lower)) / (2.0 * zq)) ** 2)
        if not var_est > 0:
            var_est = float("nan")
        adjusted.loc[i, ["mean", "lower", "upper", "logit.est", "var.est", "logit.prec"]] = [
            mean,
            lower,
            upper,
            logit_est,
            var_est,
            1.0 / var_est,
        ]
    return adjusted, warnings
