"""Child-level survey records and their person-month representation.

Retrospective birth histories are stored one row per child; mortality
models work on one row per child-month of exposure.  This module converts
between the two, aggregates person-months to cluster-level death counts,
and simulates two-stage stratified cluster surveys with known truth for
validation studies.

Month indexing is integer throughout: calendar time is months since an
arbitrary epoch, age is months since birth.  A child born in calendar
month ``b`` is age ``m`` in calendar month ``b + m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

CHILD_COLUMNS = (
    "cluster",
    "household",
    "stratum",
    "region",
    "weight",
    "birth",
    "obs_end",
    "death_age",
)

PERSON_MONTH_COLUMNS = (
    "clustid",
    "id",
    "region",
    "time",
    "age",
    "weights",
    "strata",
    "died",
)

COUNT_COLUMNS = ("cluster", "region", "years", "age", "Y", "total")

DEFAULT_MONTH_CUTS = (1, 12, 24, 36, 48, 60)


@dataclass(frozen=True)
class AgeBandSchema:
    """Partition of child age in months into hazard bands.

    Parameters
    ----------
    month_cuts : tuple of int
        Strictly increasing positive band endpoints.  Band ``a`` covers
        ages ``[month_cuts[a-1], month_cuts[a])`` with an implicit leading
        zero, so the default ``(1, 12, 24, 36, 48, 60)`` gives bands
        0, 1-11, 12-23, 24-35, 36-47 and 48-59 months.
    trend_groups : tuple of int, optional
        For each band, the index of the coarser group whose temporal
        trend it shares.  Group ids must be ``0..G-1`` with every id
        used.  Defaults to ``(0, 1, 2, 2, 2, 2)`` for the default cuts
        (infant month, rest of first year, one shared group for ages
        1-4), and to one group per band otherwise.
    """

    month_cuts: tuple = DEFAULT_MONTH_CUTS
    trend_groups: tuple = None

    def __post_init__(self):
        cuts = tuple(int(c) for c in self.month_cuts)
        if len(cuts) == 0:
            raise ValueError("month_cuts must be non-empty")
        if cuts[0] <= 0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError("month_cuts must be strictly increasing and positive")
        object.__setattr__(self, "month_cuts", cuts)
        groups = self.trend_groups
        if groups is None:
            if cuts == DEFAULT_MONTH_CUTS:
                groups = (0, 1, 2, 2, 2, 2)
            else:
                groups = tuple(range(len(cuts)))
        groups = tuple(int(g) for g in groups)
        if len(groups) != len(cuts):
            raise ValueError("trend_groups must assign one group per age band")
        if sorted(set(groups)) != list(range(max(groups) + 1)):
            raise ValueError("trend group ids must be contiguous from 0")
        object.__setattr__(self, "trend_groups", groups)

    @property
    def n_bands(self) -> int:
        return len(self.month_cuts)

    @property
    def final_month(self) -> int:
        """One past the last modeled age; exposure is truncated here."""
        return self.month_cuts[-1]

    @property
    def band_starts(self) -> tuple:
        return (0,) + self.month_cuts[:-1]

    @property
    def band_lengths(self) -> np.ndarray:
        """Months per band; these are the exponents of the survival product."""
        return np.diff(np.concatenate(([0], self.month_cuts)))

    @property
    def band_labels(self) -> tuple:
        labels = []
        for start, end in zip(self.band_starts, self.month_cuts):
            labels.append(str(start) if end - start == 1 else f"{start}-{end - 1}")
        return tuple(labels)

    @property
    def n_trend_groups(self) -> int:
        return max(self.trend_groups) + 1

    @property
    def trend_group_labels(self) -> tuple:
        """Span label per trend group, e.g. ``('0', '1-11', '12-59')``."""
        labels = []
        for g in range(self.n_trend_groups):
            bands = [a for a, gg in enumerate(self.trend_groups) if gg == g]
            start = self.band_starts[bands[0]]
            end = self.month_cuts[bands[-1]]
            labels.append(str(start) if end - start == 1 else f"{start}-{end - 1}")
        return tuple(labels)

    def band_of_month(self) -> np.ndarray:
        """Band index for each age month ``0..final_month-1``."""
        return np.searchsorted(self.month_cuts, np.arange(self.final_month), side="right")

    def trend_group_of_month(self) -> np.ndarray:
        groups = np.asarray(self.trend_groups)
        return groups[self.band_of_month()]


def _as_int_array(values, name):
    arr = np.asarray(values)
    if arr.size and not np.all(np.isfinite(arr.astype(float))):
        raise ValueError(f"{name} contains non-finite values")
    return arr.astype(int)


def _validate_children(children: pd.DataFrame) -> None:
    missing = [c for c in CHILD_COLUMNS if c not in children.columns]
    if missing:
        raise ValueError(f"child table is missing columns {missing}")
    birth = _as_int_array(children["birth"], "birth")
    obs_end = _as_int_array(children["obs_end"], "obs_end")
    weight = np.asarray(children["weight"], dtype=float)
    death = np.asarray(children["death_age"], dtype=float)

    bad = np.flatnonzero(obs_end < birth)
    if bad.size:
        raise ValueError(f"obs_end before birth for record indices {bad.tolist()}")
    bad = np.flatnonzero(~(weight > 0))
    if bad.size:
        raise ValueError(f"non-positive weight for record indices {bad.tolist()}")
    with np.errstate(invalid="ignore"):
        bad = np.flatnonzero(np.nan_to_num(death, nan=0.0) < 0)
        if bad.size:
            raise ValueError(f"negative death_age for record indices {bad.tolist()}")
        has_death = ~np.isnan(death)
        bad = np.flatnonzero(has_death & (death > obs_end - birth))
    if bad.size:
        raise ValueError(
            f"death_age after observation end for record indices {bad.tolist()}"
        )


def expand_births(
    children: pd.DataFrame,
    schema: AgeBandSchema,
    year_cuts: Sequence[int],
    period_labels: Sequence[str],
) -> pd.DataFrame:
    """Expand child records into one row per observed month of exposure.

    A child contributes one row per month lived from birth up to the
    earliest of death, end of observation, and the final age cut of
    ``schema``.  Deaths at or beyond the final cut are treated as
    survival through the last band.  Each row is labeled with the
    calendar period containing it and the age band of the child.

    Parameters
    ----------
    children : DataFrame
        One row per child with the ``CHILD_COLUMNS`` layout.
    schema : AgeBandSchema
        Age-band definition; exposure stops at ``schema.final_month``.
    year_cuts : sequence of int
        Increasing calendar-month boundaries; period ``p`` covers
        ``[year_cuts[p], year_cuts[p+1])``.
    period_labels : sequence of str
        One label per period, ``len(year_cuts) - 1`` of them.

    Returns
    -------
    DataFrame
        Columns ``clustid, id, region, time, age, weights, strata, died``
        with one row per person-month.

    Raises
    ------
    ValueError
        If record invariants fail or any observed month falls outside
        ``year_cuts``; the offending record indices are reported.
    """
    _validate_children(children)
    cuts = _as_int_array(year_cuts, "year_cuts")
    if cuts.ndim != 1 or cuts.size < 2 or np.any(np.diff(cuts) <= 0):
        raise ValueError("year_cuts must be an increasing vector with >= 2 entries")
    labels = list(period_labels)
    if len(labels) != cuts.size - 1:
        raise ValueError("period_labels must have len(year_cuts) - 1 entries")

    birth = _as_int_array(children["birth"], "birth")
    obs_end = _as_int_array(children["obs_end"], "obs_end")
    death = np.asarray(children["death_age"], dtype=float)
    final = schema.final_month

    # Death at or past the final cut is censoring for the modeled range.
    death_int = np.where(np.isnan(death), final, death).astype(int)
    died_in_range = death_int < final
    last_age = np.minimum(obs_end - birth, final - 1)
    last_age = np.minimum(last_age, np.where(died_in_range, death_int, final - 1))
    n_rows = last_age + 1

    idx = np.repeat(np.arange(len(children)), n_rows)
    age = np.arange(n_rows.sum()) - np.repeat(np.cumsum(n_rows) - n_rows, n_rows)
    month = birth[idx] + age

    period_idx = np.searchsorted(cuts, month, side="right") - 1
    outside = (period_idx < 0) | (period_idx >= len(labels))
    if np.any(outside):
        bad = np.unique(idx[outside])
        raise ValueError(
            f"observed months outside year_cuts for record indices {bad.tolist()}"
        )

    band = schema.band_of_month()[age]
    band_labels = np.asarray(schema.band_labels, dtype=object)
    died = (died_in_range[idx]) & (age == death_int[idx])

    return pd.DataFrame(
        {
            "clustid": children["cluster"].to_numpy()[idx],
            "id": children["household"].to_numpy()[idx],
            "region": children["region"].to_numpy()[idx],
            "time": np.asarray(labels, dtype=object)[period_idx],
            "age": band_labels[band],
            "weights": children["weight"].to_numpy(dtype=float)[idx],
            "strata": children["stratum"].to_numpy()[idx],
            "died": died.astype(int),
        }
    )


REQUIRED_COUNT_KEYS = ("clustid", "region", "time", "age")

_COUNT_RENAMES = {"clustid": "cluster", "time": "years"}


def aggregate_counts(person_months: pd.DataFrame, by: Sequence[str] = REQUIRED_COUNT_KEYS) -> pd.DataFrame:
    """Aggregate person-months to death counts and exposure totals.

    Parameters
    ----------
    person_months : DataFrame
        Person-month rows as produced by :func:`expand_births`.
    by : sequence of str
        Grouping columns; must contain ``clustid, region, time, age``
        and may add e.g. ``strata`` or ``survey``.

    Returns
    -------
    DataFrame
        One row per observed group with ``Y`` (deaths) and ``total``
        (person-months); ``clustid``/``time`` are renamed to
        ``cluster``/``years``.  Groups with no exposure are absent.
    """
    by = list(by)
    missing_keys = [k for k in REQUIRED_COUNT_KEYS if k not in by]
    if missing_keys:
        raise ValueError(f"aggregation keys must include {missing_keys}")
    missing_cols = [k for k in by if k not in person_months.columns]
    if missing_cols:
        raise ValueError(f"person-month table is missing columns {missing_cols}")
    died = person_months["died"].to_numpy()
    if not np.isin(died, (0, 1)).all():
        raise ValueError("died must be 0/1")
    grouped = (
        person_months.groupby(by, sort=True, observed=True)["died"]
        .agg(Y="sum", total="size")
        .reset_index()
    )
    grouped = grouped.rename(columns=_COUNT_RENAMES)
    ordered = [_COUNT_RENAMES.get(c, c) for c in by] + ["Y", "total"]
    return grouped[ordered]


@dataclass(frozen=True)
class StratumDesign:
    """Two-stage sampling plan for one region-by-urbanicity stratum."""

    clusters_total: int
    clusters_sampled: int
    households_per_cluster: int
    households_sampled: int
    children_per_household: int = 1

    def __post_init__(self):
        if not 0 < self.clusters_sampled <= self.clusters_total:
            raise ValueError("need 0 < clusters_sampled <= clusters_total")
        if not 0 < self.households_sampled <= self.households_per_cluster:
            raise ValueError("need 0 < households_sampled <= households_per_cluster")
        if self.children_per_household <= 0:
            raise ValueError("children_per_household must be positive")

    @property
    def weight(self) -> float:
        """Inverse selection probability of a sampled child."""
        return (self.clusters_total / self.clusters_sampled) * (
            self.households_per_cluster / self.households_sampled
        )

    @property
    def population_children(self) -> int:
        return self.clusters_total * self.households_per_cluster * self.children_per_household


STRATUM_LABELS = ("urban", "rural")


@dataclass
class SurveyDesign:
    """Stratified two-stage cluster design over a region-by-period window.

    Births are uniform over the calendar months of the window and all
    children are observed through its last month, so outcomes are
    independent of selection (ignorable sampling).
    """

    regions: tuple
    strata: Mapping  # (region, 'urban'|'rural') -> StratumDesign
    year_cuts: tuple
    period_labels: tuple
    schema: AgeBandSchema = field(default_factory=AgeBandSchema)

    def __post_init__(self):
        self.regions = tuple(self.regions)
        self.year_cuts = tuple(int(c) for c in self.year_cuts)
        self.period_labels = tuple(self.period_labels)
        if len(self.period_labels) != len(self.year_cuts) - 1:
            raise ValueError("period_labels must have len(year_cuts) - 1 entries")
        for key in self.strata:
            region, stratum = key
            if region not in self.regions:
                raise ValueError(f"stratum region {region!r} not in regions")
            if stratum not in STRATUM_LABELS:
                raise ValueError(f"stratum label {stratum!r} must be urban or rural")

    @property
    def observation_end(self) -> int:
        return self.year_cuts[-1] - 1

    @property
    def n_periods(self) -> int:
        return len(self.period_labels)


def _check_truth(truth: Mapping, design: SurveyDesign) -> None:
    for key, stratum_design in design.strata.items():
        if key not in truth:
            raise ValueError(f"truth is missing hazards for stratum {key}")
        haz = np.asarray(truth[key], dtype=float)
        if haz.shape != (design.n_periods, design.schema.n_bands):
            raise ValueError(
                f"hazards for {key} must have shape (n_periods, n_bands)="
                f"{(design.n_periods, design.schema.n_bands)}, got {haz.shape}"
            )
        if np.any((haz <= 0) | (haz >= 1)):
            raise ValueError(f"hazards for {key} must lie strictly in (0, 1)")
        del stratum_design


def true_u5mr_table(truth: Mapping, design: SurveyDesign) -> pd.DataFrame:
    """Design-consistent truth per region and period, plus national rows.

    The direct estimator targets, per period and age band, the ratio of
    expected population deaths to expected population exposure; this
    accumulates both in closed form over the uniform birth distribution
    and converts bands to the survival-product scale.
    """
    _check_truth(truth, design)
    schema = design.schema
    cuts = np.asarray(design.year_cuts)
    months = np.arange(cuts[0], cuts[-1])
    period_of_month = np.searchsorted(cuts, months, side="right") - 1
    band_of_age = schema.band_of_month()
    n_p, n_b = design.n_periods, schema.n_bands

    exposure = {r: np.zeros((n_p, n_b)) for r in design.regions}
    deaths = {r: np.zeros((n_p, n_b)) for r in design.regions}
    for (region, stratum), sd in design.strata.items():
        hazards = np.asarray(truth[(region, stratum)], dtype=float)
        unit = sd.population_children / months.size
        alive = np.full(months.size, unit)
        for age in range(schema.final_month):
            calendar = months + age
            observed = calendar <= design.observation_end
            if not observed.any():
                break
            p_idx = period_of_month[calendar[observed] - cuts[0]]
            band = band_of_age[age]
            h = hazards[p_idx, band]
            np.add.at(exposure[region], (p_idx, band), alive[observed])
            np.add.at(deaths[region], (p_idx, band), alive[observed] * h)
            alive[observed] *= 1.0 - h

    rows = []
    z = schema.band_lengths
    all_exposure = sum(exposure.values())
    all_deaths = sum(deaths.values())
    for region, expo, dth in (
        [("All", all_exposure, all_deaths)]
        + [(r, exposure[r], deaths[r]) for r in design.regions]
    ):
        with np.errstate(invalid="ignore", divide="ignore"):
            hazard = np.where(expo > 0, dth / np.maximum(expo, 1e-300), np.nan)
        u5mr = 1.0 - np.prod((1.0 - hazard) ** z, axis=1)
        for p, label in enumerate(design.period_labels):
            rows.append({"region": region, "years": label, "u5mr": u5mr[p]})
    return pd.DataFrame(rows)


def simulate_survey(truth: Mapping, design: SurveyDesign, seed: int = 0):
    """Draw one survey: child records plus the true prevalence table.

    Parameters
    ----------
    truth : mapping
        ``(region, stratum) -> (n_periods, n_bands)`` monthly hazards.
    design : SurveyDesign
        Sampling plan; weights are inverse selection probabilities.
    seed : int
        Seed for the survey's random stream.

    Returns
    -------
    (DataFrame, DataFrame)
        Child records in ``CHILD_COLUMNS`` layout, and the analytic
        truth table from :func:`true_u5mr_table`.
    """
    _check_truth(truth, design)
    rng = np.random.default_rng(seed)
    schema = design.schema
    cuts = np.asarray(design.year_cuts)
    period_of_month = np.searchsorted(cuts, np.arange(cuts[0], cuts[-1]), side="right") - 1
    band_of_age = schema.band_of_month()
    obs_end = design.observation_end

    frames = []
    cluster_offset = 0
    for (region, stratum), sd in sorted(design.strata.items()):
        hazards = np.asarray(truth[(region, stratum)], dtype=float)
        n_children = sd.clusters_sampled * sd.households_sampled * sd.children_per_household
        birth = rng.integers(cuts[0], cuts[-1], size=n_children)

        ages = np.arange(schema.final_month)
        calendar = birth[:, None] + ages[None, :]
        observable = calendar <= obs_end
        p_idx = period_of_month[np.clip(calendar - cuts[0], 0, period_of_month.size - 1)]
        cell_hazard = hazards[p_idx, band_of_age[None, :]]
        dies = (rng.random((n_children, schema.final_month)) < cell_hazard) & observable
        any_death = dies.any(axis=1)
        death_age = np.where(any_death, dies.argmax(axis=1), -1).astype(float)
        death_age[~any_death] = np.nan

        per_cluster = sd.households_sampled * sd.children_per_household
        cluster = cluster_offset + np.repeat(np.arange(sd.clusters_sampled), per_cluster)
        household = np.tile(
            np.repeat(np.arange(sd.households_sampled), sd.children_per_household),
            sd.clusters_sampled,
        )
        cluster_offset += sd.clusters_sampled

        frames.append(
            pd.DataFrame(
                {
                    "cluster": cluster + 1,
                    "household": household + 1,
                    "stratum": stratum,
                    "region": region,
                    "weight": sd.weight,
                    "birth": birth,
                    "obs_end": obs_end,
                    "death_age": death_age,
                }
            )
        )
    children = pd.concat(frames, ignore_index=True)
    return children, true_u5mr_table(truth, design)
