"""Bundled synthetic four-region scenario for demos, docs, and tests.

Four rectangular regions — western, central, eastern on a southern band
and northern spanning the top — give the adjacency used throughout the
examples: central borders all three others, eastern and western do not
touch, degrees (3, 2, 3, 2).  The survey design oversamples urban
clusters relative to their population share, and the truth table
declines over six five-year periods with urban hazards below rural.
"""

from __future__ import annotations

import numpy as np

from .gmrf import RegionGraph, graph_from_geojson
from .survey import AgeBandSchema, StratumDesign, SurveyDesign

__all__ = [
    "DEMO_REGIONS",
    "DEMO_PERIODS",
    "DEMO_YEAR_CUTS",
    "demo_geojson",
    "demo_graph",
    "demo_design",
    "demo_truth",
]

DEMO_REGIONS = ("western", "central", "eastern", "northern")
DEMO_PERIODS = ("85-89", "90-94", "95-99", "00-04", "05-09", "10-14")
DEMO_YEAR_CUTS = (0, 60, 120, 180, 240, 300, 360)


def _feature(name, ring):
    return {
        "type": "Feature",
        "properties": {"name": name},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }


def demo_geojson() -> dict:
    """FeatureCollection of four rectangles with shared-edge vertices."""
    return {
        "type": "FeatureCollection",
        "features": [
            _feature("western", [[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]]),
            _feature("central", [[2, 0], [4, 0], [4, 2], [2, 2], [2, 0]]),
            _feature("eastern", [[4, 0], [6, 0], [6, 2], [4, 2], [4, 0]]),
            _feature(
                "northern",
                [[0, 2], [2, 2], [4, 2], [6, 2], [6, 3], [0, 3], [0, 2]],
            ),
        ],
    }


def demo_graph() -> RegionGraph:
    return graph_from_geojson(demo_geojson())


def demo_design(schema: AgeBandSchema | None = None) -> SurveyDesign:
    """Two-stage stratified design with urban oversampling.

    Urban strata hold one third of the population but half of the
    sampled clusters, so urban children carry smaller design weights.
    """
    schema = schema or AgeBandSchema()
    strata = {}
    for region in DEMO_REGIONS:
        strata[(region, "urban")] = StratumDesign(
            clusters_total=40, clusters_sampled=10, households_per_cluster=30, households_sampled=10
        )
        strata[(region, "rural")] = StratumDesign(
            clusters_total=80, clusters_sampled=10, households_per_cluster=30, households_sampled=10
        )
    return SurveyDesign(
        regions=DEMO_REGIONS,
        strata=strata,
        year_cuts=DEMO_YEAR_CUTS,
        period_labels=DEMO_PERIODS,
        schema=schema,
    )


def demo_truth(schema: AgeBandSchema | None = None) -> dict:
    """Monthly hazards per (region, stratum): declining, rural above urban."""
    schema = schema or AgeBandSchema()
    base = np.array([0.022, 0.0065, 0.0032, 0.0022, 0.0016, 0.0011])[: schema.n_bands]
    region_mult = {"western": 1.1, "central": 0.95, "eastern": 1.25, "northern": 0.85}
    truth = {}
    for region in DEMO_REGIONS:
        for stratum, smult in (("urban", 0.8), ("rural", 1.15)):
            rows = [
                base * region_mult[region] * smult * (1.0 - 0.06 * p)
                for p in range(len(DEMO_PERIODS))
            ]
            truth[(region, stratum)] = np.stack(rows)
    return truth
