"""Classification and rendering of posterior prevalence estimates.

Provides the true-classification-probability summary (how confidently
each area-period lands in one of K prevalence intervals) and three
deterministic SVG renderers: a faceted choropleth, an uncertainty-hatch
overlay, and ridgeline plots of posterior densities.  The renderers
write plain SVG text with fixed number formatting, so identical inputs
yield identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "TCPResult",
    "tcp_classify",
    "load_geojson",
    "render_map",
    "render_hatch",
    "render_ridge",
]


# ---------------------------------------------------------------------------
# True classification probability


@dataclass(frozen=True)
class TCPResult:
    """Interval assignments with their posterior classification mass.

    ``thresholds`` are the K+1 increasing cutpoints; classification uses
    outer edges clamped to [0, 1] so every draw is assignable.
    ``counts`` holds per-cell draw counts per interval (rows align with
    ``assignments``), so interval probabilities sum to one exactly as
    counting fractions.
    """

    thresholds: np.ndarray
    assignments: pd.DataFrame  # region, years, interval, tcp
    counts: np.ndarray
    n_draws: int
    atcp: float

    @property
    def n_intervals(self) -> int:
        return len(self.thresholds) - 1


def _pooled_quantile_thresholds(pooled: np.ndarray, k: int) -> np.ndarray:
    probs = [0.01] + [i / k for i in range(1, k)] + [0.99]
    return np.quantile(pooled, probs)


def tcp_classify(draws, k: int | None = 4, thresholds=None, years=None) -> TCPResult:
    """Assign each region-period to its highest-posterior-mass interval.

    Automatic thresholds are the [0.01, 1/K, ..., (K-1)/K, 0.99]
    quantiles of the draws pooled across all selected cells.  Ties pick
    the lowest interval index.  ATCP is the mean classification mass
    over cells.
    """
    cells, values = draws.cells, draws.values
    if years is not None:
        wanted = {str(y) for y in years}
        keep = cells["years"].astype(str).isin(wanted).to_numpy()
        cells, values = cells[keep].reset_index(drop=True), values[:, keep]
    if values.size == 0:
        raise ValueError("no draws to classify")
    if values.shape[0] < 1:
        raise ValueError("no draws to classify")
    if thresholds is not None:
        thresholds = np.asarray(thresholds, dtype=float)
        if thresholds.size < 3:
            raise ValueError("need at least 3 explicit thresholds (2 intervals)")
    else:
        if k is None or k < 2:
            raise ValueError("need K >= 2 intervals or explicit thresholds")
        thresholds = _pooled_quantile_thresholds(values.ravel(), int(k))
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    edges = thresholds.copy()
    edges[0] = min(0.0, edges[0])
    edges[-1] = max(1.0, edges[-1])
    n_draws = values.shape[0]
    n_cells = values.shape[1]
    counts = np.empty((n_cells, thresholds.size - 1), dtype=int)
    for j in range(n_cells):
        counts[j], _ = np.histogram(values[:, j], bins=edges)
    if not np.all(counts.sum(axis=1) == n_draws):
        raise ValueError("draws outside [0, 1] cannot be classified")
    interval = counts.argmax(axis=1)  # argmax takes the lowest index on ties
    tcp = counts[np.arange(n_cells), interval] / n_draws
    assignments = cells[["region", "years"]].copy()
    assignments["interval"] = interval
    assignments["tcp"] = tcp
    return TCPResult(
        thresholds=thresholds,
        assignments=assignments,
        counts=counts,
        n_draws=n_draws,
        atcp=float(tcp.mean()),
    )


# ---------------------------------------------------------------------------
# Geometry helpers


def load_geojson(source) -> dict:
    """Read a GeoJSON mapping from a path, JSON text, or dict."""
    if isinstance(source, dict):
        geo = source
    else:
        path = Path(str(source))
        text = path.read_text() if path.exists() else str(source)
        geo = json.loads(text)
    if geo.get("type") != "FeatureCollection" or "features" not in geo:
        raise ValueError("expected a GeoJSON FeatureCollection")
    return geo


def _feature_rings(geometry):
    """Yield linear rings of a Polygon or MultiPolygon."""
    kind = geometry.get("type")
    if kind == "Polygon":
        yield from geometry["coordinates"]
    elif kind == "MultiPolygon":
        for poly in geometry["coordinates"]:
            yield from poly
    else:
        raise ValueError(f"unsupported geometry type {kind!r}")


def _feature_names(geo, by_geo):
    names = []
    for feature in geo["features"]:
        props = feature.get("properties") or {}
        if by_geo not in props:
            raise ValueError(f"feature lacks the {by_geo!r} property")
        names.append(str(props[by_geo]))
    return names


def _bounds(geo):
    xs, ys = [], []
    for feature in geo["features"]:
        for ring in _feature_rings(feature["geometry"]):
            for x, y in ring:
                xs.append(float(x))
                ys.append(float(y))
    return min(xs), min(ys), max(xs), max(ys)


class _Projection:
    """Affine fit of geographic bounds into a pixel viewport (y flipped)."""

    def __init__(self, bounds, x0, y0, width, height):
        bx0, by0, bx1, by1 = bounds
        spanx = bx1 - bx0 or 1.0
        spany = by1 - by0 or 1.0
        scale = min(width / spanx, height / spany)
        self.scale = scale
        self.offx = x0 + (width - spanx * scale) / 2.0 - bx0 * scale
        self.offy = y0 + (height - spany * scale) / 2.0 + by1 * scale

    def point(self, x, y):
        return x * self.scale + self.offx, self.offy - y * self.scale


def _path_data(geometry, proj) -> str:
    parts = []
    for ring in _feature_rings(geometry):
        pts = [proj.point(float(x), float(y)) for x, y in ring]
        parts.append(
            "M" + "L".join(f"{px:.2f},{py:.2f}" for px, py in pts) + "Z"
        )
    return "".join(parts)


# ---------------------------------------------------------------------------
# Color scale


_SCALE_LOW = (239, 243, 255)
_SCALE_HIGH = (8, 81, 156)
_MISSING_FILL = "#d9d9d9"


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    rgb = tuple(
        int(round(lo + (hi - lo) * t)) for lo, hi in zip(_SCALE_LOW, _SCALE_HIGH)
    )
    return "#%02x%02x%02x" % rgb


def _format_value(v: float, per_1000: bool) -> str:
    return f"{v * 1000:.1f}" if per_1000 else f"{v:.3f}"


# ---------------------------------------------------------------------------
# SVG assembly


class _SvgCanvas:
    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        ]

    def add(self, element: str):
        self.parts.append(element)

    def text(self, x, y, s, size=11, anchor="start", weight="normal"):
        self.add(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" '
            f'font-size="{size}" text-anchor="{anchor}" font-weight="{weight}">{_escape(s)}</text>'
        )

    def to_bytes(self) -> bytes:
        return ("\n".join(self.parts + ["</svg>"]) + "\n").encode("utf-8")


def _escape(s: str) -> str:
    return (
        str(s)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
    )


_PANEL_W = 300
_PANEL_H = 240
_MARGIN = 18
_LEGEND_W = 70


def _facet_layout(n_facets):
    cols = min(n_facets, 3)
    rows = math.ceil(n_facets / cols)
    width = _MARGIN + cols * (_PANEL_W + _MARGIN) + _LEGEND_W
    height = _MARGIN + rows * (_PANEL_H + _MARGIN + 16)
    return cols, rows, width, height


def _check_regions(data_regions, geo_names):
    missing = sorted(set(data_regions) - set(geo_names))
    if missing:
        raise ValueError(f"regions not found in the geometry: {missing}")


def _facet_values(values, by_data, value_col, facets):
    """Map facet -> {region: value}; facets default to the years present."""
    if value_col not in values.columns:
        raise ValueError(f"values table lacks the {value_col!r} column")
    if "years" in values.columns:
        available = list(dict.fromkeys(values["years"].astype(str)))
    else:
        available = [None]
    if facets is None:
        facets = available
    else:
        facets = [str(f) for f in facets]
        extra = sorted(set(facets) - set(available))
        if extra:
            raise ValueError(f"facet periods without data: {extra}")
    out = {}
    for facet in facets:
        if facet is None:
            sub = values
        else:
            sub = values[values["years"].astype(str) == facet]
        out[facet] = {
            str(r): float(v) for r, v in zip(sub[by_data], sub[value_col])
        }
    return out


def _legend(canvas, x, y, height, vmin, vmax, per_1000, title):
    steps = 24
    bar_h = height / steps
    for i in range(steps):
        t = 1.0 - (i + 0.5) / steps
        canvas.add(
            f'<rect x="{x:.2f}" y="{y + i * bar_h:.2f}" width="14" '
            f'height="{bar_h + 0.5:.2f}" fill="{_color(t)}"/>'
        )
    canvas.text(x, y - 8, title, size=10)
    canvas.text(x + 18, y + 10, _format_value(vmax, per_1000), size=10)
    canvas.text(x + 18, y + height, _format_value(vmin, per_1000), size=10)


def _render_choropleth(values, geo, by_data, by_geo, facets, value_col,
                       per_1000, title, hatch_widths=None, hatch_scale=100.0):
    geo = load_geojson(geo)
    geo_names = _feature_names(geo, by_geo)
    if by_data not in values.columns:
        raise ValueError(f"values table lacks the {by_data!r} column")
    _check_regions(values[by_data].astype(str), geo_names)
    facet_map = _facet_values(values, by_data, value_col, facets)
    hatch_map = None
    if hatch_widths is not None:
        hatch_map = _facet_values(hatch_widths, by_data, "width", facets)
    all_values = [v for per_facet in facet_map.values() for v in per_facet.values()]
    if not all_values:
        raise ValueError("no values to render")
    vmin, vmax = min(all_values), max(all_values)
    span = (vmax - vmin) or 1.0

    facet_list = list(facet_map)
    cols, rows, width, height = _facet_layout(len(facet_list))
    canvas = _SvgCanvas(width, height)
    bounds = _bounds(geo)
    clip_id = 0
    for fidx, facet in enumerate(facet_list):
        row, col = divmod(fidx, cols)
        px = _MARGIN + col * (_PANEL_W + _MARGIN)
        py = _MARGIN + row * (_PANEL_H + _MARGIN + 16)
        label = title if facet is None else (f"{title} — {facet}" if title else str(facet))
        if label:
            canvas.text(px, py + 10, label, size=12, weight="bold")
        proj = _Projection(bounds, px, py + 16, _PANEL_W, _PANEL_H - 16)
        cell_values = facet_map[facet]
        for feature, name in zip(geo["features"], geo_names):
            d = _path_data(feature["geometry"], proj)
            if name in cell_values:
                fill = _color((cell_values[name] - vmin) / span)
            else:
                fill = _MISSING_FILL
            canvas.add(
                f'<path d="{d}" fill="{fill}" stroke="#444444" stroke-width="0.8"/>'
            )
            if hatch_map is not None and name in hatch_map[facet]:
                n_lines = math.ceil(hatch_map[facet][name] * hatch_scale)
                if n_lines > 0:
                    clip_id += 1
                    canvas.add(f'<clipPath id="c{clip_id}"><path d="{d}"/></clipPath>')
                    canvas.add(_hatch_lines(feature["geometry"], proj, n_lines, clip_id))
    _legend(
        canvas,
        width - _LEGEND_W + 10,
        _MARGIN + 24,
        _PANEL_H - 48,
        vmin,
        vmax,
        per_1000,
        "per 1000" if per_1000 else "probability",
    )
    return canvas.to_bytes()


def _hatch_lines(geometry, proj, n_lines, clip_id) -> str:
    xs, ys = [], []
    for ring in _feature_rings(geometry):
        for x, y in ring:
            px, py = proj.point(float(x), float(y))
            xs.append(px)
            ys.append(py)
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    w, h = x1 - x0, y1 - y0
    lines = [f'<g clip-path="url(#c{clip_id})" stroke="#333333" stroke-width="0.6">']
    step = (w + h) / (n_lines + 1)
    for i in range(n_lines):
        c = x0 - h + (i + 1) * step
        lines.append(
            f'<line x1="{c:.2f}" y1="{y1:.2f}" x2="{c + h:.2f}" y2="{y0:.2f}"/>'
        )
    lines.append("</g>")
    return "".join(lines)


def render_map(values, geo, by_data="region", by_geo="name", facets=None,
               value_col="median", per_1000=False, title="") -> bytes:
    """Faceted choropleth: one panel per period, one shared color scale."""
    return _render_choropleth(values, geo, by_data, by_geo, facets, value_col, per_1000, title)


def render_hatch(values, geo, by_data="region", by_geo="name", facets=None,
                 value_col="median", per_1000=False, title="",
                 scale=100.0) -> bytes:
    """Choropleth with hatching whose density rises with interval width.

    ``values`` must carry ``lower`` and ``upper`` columns; the number of
    hatch lines per region is ``ceil((upper - lower) * scale)``, so a
    zero-width interval draws none and wider intervals draw more.
    """
    for col in ("lower", "upper"):
        if col not in values.columns:
            raise ValueError(f"values table lacks the {col!r} column")
    widths = np.asarray(values["upper"], dtype=float) - np.asarray(values["lower"], dtype=float)
    if np.any(widths < 0):
        raise ValueError("upper must be >= lower")
    hatch = values[[by_data] + (["years"] if "years" in values.columns else [])].copy()
    hatch["width"] = widths
    return _render_choropleth(
        values, geo, by_data, by_geo, facets, value_col, per_1000, title,
        hatch_widths=hatch, hatch_scale=scale,
    )


# ---------------------------------------------------------------------------
# Ridgeline densities


def _silverman_bandwidth(x: np.ndarray) -> float:
    n = x.size
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def _gaussian_kde(x: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    z = (grid[:, None] - x[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bandwidth * math.sqrt(2 * math.pi))


def render_ridge(draws, order_year=None, by="year", bandwidth=None,
                 per_1000=False, title="") -> bytes:
    """Ridgeline plot of posterior densities per region and period.

    Regions are sorted by their posterior median in ``order_year``
    (default: the last period), highest first.  ``by="year"`` facets by
    period with regions stacked inside; ``by="region"`` swaps the roles.
    Cells with fewer than two distinct draws have no density and are
    rejected.
    """
    if by not in ("year", "region"):
        raise ValueError("by must be 'year' or 'region'")
    cells, values = draws.cells, draws.values
    if values.size == 0:
        raise ValueError("no draws to plot")
    if values.shape[0] < 2:
        raise ValueError("need at least two draws per cell for a density")
    periods = list(dict.fromkeys(cells["years"].astype(str)))
    regions = list(dict.fromkeys(cells["region"].astype(str)))
    order_year = str(order_year) if order_year is not None else periods[-1]
    if order_year not in periods:
        raise ValueError(f"ordering period {order_year!r} not present; have {periods}")

    def column(region, year):
        mask = (cells["region"].astype(str) == region) & (cells["years"].astype(str) == year)
        idx = np.flatnonzero(mask.to_numpy())
        if idx.size == 0:
            return None
        return values[:, idx[0]]

    medians = {}
    for region in regions:
        x = column(region, order_year)
        medians[region] = -np.inf if x is None else float(np.median(x))
    regions = sorted(regions, key=lambda r: -medians[r])

    bandwidths = {}
    for region in regions:
        for year in periods:
            x = column(region, year)
            if x is None:
                continue
            bw = bandwidth if bandwidth is not None else _silverman_bandwidth(x)
            if not bw > 0:
                raise ValueError(
                    f"degenerate draws for {region!r}, {year!r}: density bandwidth is zero"
                )
            bandwidths[(region, year)] = bw

    lo = float(values.min()) - 3 * max(bandwidths.values())
    hi = float(values.max()) + 3 * max(bandwidths.values())
    grid = np.linspace(lo, hi, 200)

    facet_list = periods if by == "year" else regions
    series_list = regions if by == "year" else periods
    row_h = 34
    panel_h = 30 + row_h * len(series_list)
    cols = min(len(facet_list), 3)
    rows = math.ceil(len(facet_list) / cols)
    panel_w = 330
    width = _MARGIN + cols * (panel_w + _MARGIN)
    height = _MARGIN + rows * (panel_h + _MARGIN)
    canvas = _SvgCanvas(width, height)

    for fidx, facet in enumerate(facet_list):
        frow, fcol = divmod(fidx, cols)
        px = _MARGIN + fcol * (panel_w + _MARGIN)
        py = _MARGIN + frow * (panel_h + _MARGIN)
        label = f"{title} — {facet}" if title else str(facet)
        canvas.text(px, py + 12, label, size=12, weight="bold")
        plot_x, plot_w = px + 78, panel_w - 90
        for sidx, series in enumerate(series_list):
            region, year = (series, facet) if by == "year" else (facet, series)
            x = column(region, year)
            base_y = py + 24 + (sidx + 1) * row_h
            canvas.text(px, base_y - 4, str(series), size=10)
            if x is None:
                continue
            dens = _gaussian_kde(x, grid, bandwidths[(region, year)])
            peak = dens.max() or 1.0
            pts = []
            for gx, gy in zip(grid, dens):
                sx = plot_x + (gx - lo) / (hi - lo) * plot_w
                sy = base_y - (gy / peak) * (row_h * 0.92)
                pts.append(f"{sx:.2f},{sy:.2f}")
            canvas.add(
                f'<polyline points="{" ".join(pts)}" fill="none" '
                f'stroke="#08519c" stroke-width="1.0"/>'
            )
            canvas.add(
                f'<line x1="{plot_x:.2f}" y1="{base_y:.2f}" '
                f'x2="{plot_x + plot_w:.2f}" y2="{base_y:.2f}" '
                f'stroke="#bbbbbb" stroke-width="0.5"/>'
            )
        lo_label = _format_value(max(lo, 0.0), per_1000)
        hi_label = _format_value(min(hi, 1.0), per_1000)
        canvas.text(plot_x, py + panel_h - 2, lo_label, size=9)
        canvas.text(plot_x + plot_w, py + panel_h - 2, hi_label, size=9, anchor="end")
    return canvas.to_bytes()
