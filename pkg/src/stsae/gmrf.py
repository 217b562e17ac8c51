"""Gaussian Markov random field building blocks.

Region graphs, intrinsic autoregression precisions (ICAR on a graph,
random walks in time), stationary first-order autoregressions, the four
standard space-time interaction structures, and the linear constraints
that make the intrinsic ones identifiable.

All intrinsic precisions are scaled so that the geometric mean of the
marginal variances under the constrained generalized inverse equals one;
a single variance hyperparameter then has the same interpretation across
structures.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.linalg

__all__ = [
    "RegionGraph",
    "StructureMatrix",
    "ConstraintSet",
    "build_graph",
    "graph_from_adjacency",
    "graph_from_csv",
    "graph_from_geojson",
    "icar_precision",
    "rw_precision",
    "ar1_precision",
    "interaction_structure",
    "bym2_effect",
]


@dataclass(frozen=True)
class RegionGraph:
    """Named areas with symmetric 0/1 adjacency."""

    names: tuple
    adjacency: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        adj = np.asarray(self.adjacency, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if adj.shape[0] != len(names):
            raise ValueError("adjacency size must match number of names")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if not np.isin(adj, (0.0, 1.0)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "adjacency", adj.astype(int))

    @property
    def n(self) -> int:
        return len(self.names)

    def components(self) -> list:
        """Connected components as lists of node indices."""
        seen = np.zeros(self.n, dtype=bool)
        comps = []
        for start in range(self.n):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                node = stack.pop()
                comp.append(node)
                for nb in np.flatnonzero(self.adjacency[node]):
                    if not seen[nb]:
                        seen[nb] = True
                        stack.append(nb)
            comps.append(sorted(comp))
        return comps

    @property
    def is_connected(self) -> bool:
        return len(self.components()) == 1


def graph_from_adjacency(names, adjacency) -> RegionGraph:
    return RegionGraph(tuple(names), np.asarray(adjacency))


def graph_from_csv(path) -> RegionGraph:
    """Read a square named adjacency matrix from CSV."""
    frame = pd.read_csv(path, index_col=0)
    names = [str(c) for c in frame.columns]
    row_names = [str(r) for r in frame.index]
    if names != row_names:
        raise ValueError("adjacency CSV row and column names must match")
    return RegionGraph(tuple(names), frame.to_numpy())


def _geometry_vertices(geometry) -> set:
    gtype = geometry.get("type")
    coords = geometry.get("coordinates", [])
    if gtype == "Polygon":
        polygons = [coords]
    elif gtype == "MultiPolygon":
        polygons = coords
    else:
        raise ValueError(f"unsupported geometry type {gtype!r}")
    vertices = set()
    for polygon in polygons:
        for ring in polygon:
            for xy in ring:
                vertices.add((float(xy[0]), float(xy[1])))
    return vertices


def graph_from_geojson(source, name_property: str = "name") -> RegionGraph:
    """Derive adjacency from polygon features.

    Two features are adjacent when they share at least two boundary
    vertices under exact coordinate equality, i.e. an edge rather than a
    single corner.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    features = source.get("features")
    if not features:
        raise ValueError("GeoJSON has no features")
    names, vertex_sets = [], []
    for feature in features:
        props = feature.get("properties") or {}
        if name_property not in props:
            raise ValueError(f"feature missing name property {name_property!r}")
        names.append(str(props[name_property]))
        vertex_sets.append(_geometry_vertices(feature["geometry"]))
    n = len(names)
    adj = np.zeros((n, n), dtype=int)
    for i in range(n):
        for j in range(i + 1, n):
            if len(vertex_sets[i] & vertex_sets[j]) >= 2:
                adj[i, j] = adj[j, i] = 1
    return RegionGraph(tuple(names), adj)


def build_graph(source, name_property: str = "name") -> RegionGraph:
    """Build a graph from an adjacency CSV or GeoJSON polygons."""
    if isinstance(source, RegionGraph):
        return source
    if isinstance(source, dict):
        return graph_from_geojson(source, name_property)
    path = Path(source)
    if path.suffix.lower() in (".geojson", ".json"):
        return graph_from_geojson(path, name_property)
    return graph_from_csv(path)


@dataclass(frozen=True)
class StructureMatrix:
    """A (possibly intrinsic) precision structure.

    Attributes
    ----------
    matrix : ndarray
        Symmetric positive semi-definite precision.
    rank_deficiency : int
        Dimension of the null space.
    null_space : ndarray
        Orthonormal ``(n, rank_deficiency)`` basis of the null space.
    scaled : bool
        Whether the geometric-mean-variance scaling convention holds.
    scale_factor : ndarray
        Per-node multiplier that was applied (block-constant over
        connected components; all ones for unscaled structures).
    """

    matrix: np.ndarray
    rank_deficiency: int
    null_space: np.ndarray
    scaled: bool
    scale_factor: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.matrix, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("structure matrix must be square")
        if not np.allclose(q, q.T, atol=1e-10):
            raise ValueError("structure matrix must be symmetric")
        object.__setattr__(self, "matrix", (q + q.T) / 2.0)
        null = np.asarray(self.null_space, dtype=float).reshape(q.shape[0], -1)
        if null.shape[1] != self.rank_deficiency:
            raise ValueError("null_space must have rank_deficiency columns")
        object.__setattr__(self, "null_space", null)
        object.__setattr__(
            self, "scale_factor", np.asarray(self.scale_factor, dtype=float)
        )

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def rank(self) -> int:
        return self.size - self.rank_deficiency

    def to_csv(self, path) -> None:
        np.savetxt(path, self.matrix, delimiter=",")


@dataclass(frozen=True)
class ConstraintSet:
    """Rows ``A`` of hard linear constraints ``A x = 0``."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if a.shape[0] and np.linalg.matrix_rank(a) != a.shape[0]:
            raise ValueError("constraint rows must be linearly independent")
        object.__setattr__(self, "matrix", a)

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def empty(dim: int) -> "ConstraintSet":
        return ConstraintSet(np.zeros((0, dim)))


def constrained_marginal_variances(q: np.ndarray, rank_deficiency: int) -> np.ndarray:
    """Marginal variances of the GMRF conditioned on its null space.

    Equivalently the diagonal of the generalized inverse obtained by
    dropping the ``rank_deficiency`` smallest eigenvalues.
    """
    vals, vecs = scipy.linalg.eigh(np.asarray(q, dtype=float))
    if rank_deficiency:
        vals, vecs = vals[rank_deficiency:], vecs[:, rank_deficiency:]
    if np.any(vals <= 0):
        raise ValueError("structure has more null directions than declared")
    return (vecs**2 / vals).sum(axis=1)


def _geometric_mean(x: np.ndarray) -> float:
    return float(np.exp(np.mean(np.log(x))))


def _scale_blocks(q: np.ndarray, blocks, deficiency_per_block) -> tuple:
    """Scale each diagonal block to geometric-mean marginal variance one."""
    q = np.asarray(q, dtype=float).copy()
    factors = np.ones(q.shape[0])
    for block, deficiency in zip(blocks, deficiency_per_block):
        block = np.asarray(block)
        if block.size <= deficiency:
            # No constrained variance to normalize (e.g. isolated region).
            continue
        sub = q[np.ix_(block, block)]
        margvar = constrained_marginal_variances(sub, deficiency)
        factor = _geometric_mean(margvar)
        q[np.ix_(block, block)] = sub * factor
        factors[block] = factor
    return q, factors


def icar_precision(graph: RegionGraph) -> StructureMatrix:
    """Intrinsic CAR precision ``D - A``, scaled per connected component.

    The null space is spanned by the per-component indicator vectors;
    each component block is rescaled separately so its constrained
    marginal variances have geometric mean one.  Isolated regions carry
    no structural information and trigger a warning.
    """
    adj = graph.adjacency.astype(float)
    q = np.diag(adj.sum(axis=1)) - adj
    comps = graph.components()
    singletons = [graph.names[c[0]] for c in comps if len(c) == 1]
    if singletons:
        warnings.warn(
            f"graph has isolated regions {singletons}; they carry no ICAR structure",
            stacklevel=2,
        )
    q_scaled, factors = _scale_blocks(q, comps, [1] * len(comps))
    null = np.zeros((graph.n, len(comps)))
    for k, comp in enumerate(comps):
        null[comp, k] = 1.0 / np.sqrt(len(comp))
    return StructureMatrix(
        matrix=q_scaled,
        rank_deficiency=len(comps),
        null_space=null,
        scaled=True,
        scale_factor=factors,
    )


def _polynomial_null(n: int, order: int) -> np.ndarray:
    t = np.arange(n, dtype=float)
    basis = np.vander(t, order, increasing=True)
    return np.linalg.qr(basis)[0]


def rw_precision(length: int, order: int = 1) -> StructureMatrix:
    """Random-walk precision of order 1 or 2 on a regular grid, scaled.

    The order-``k`` walk penalizes ``k``-th differences, so polynomials
    of degree below ``k`` are in the null space.
    """
    if order not in (1, 2):
        raise ValueError("random-walk order must be 1 or 2")
    if length < order + 1:
        raise ValueError("need at least order + 1 time points")
    diff = np.diff(np.eye(length), n=order, axis=0)
    q = diff.T @ diff
    q_scaled, factors = _scale_blocks(q, [np.arange(length)], [order])
    return StructureMatrix(
        matrix=q_scaled,
        rank_deficiency=order,
        null_space=_polynomial_null(length, order),
        scaled=True,
        scale_factor=factors,
    )


def ar1_precision(length: int, omega: float) -> StructureMatrix:
    """Stationary AR(1) precision with unit marginal variances.

    Already on the common variance scale, so no rescaling is applied
    (the scale factor is one).
    """
    if not -1.0 < omega < 1.0:
        raise ValueError("autocorrelation must satisfy |omega| < 1")
    if length < 2:
        raise ValueError("need at least two time points")
    q = np.zeros((length, length))
    idx = np.arange(length)
    q[idx, idx] = 1.0 + omega**2
    q[0, 0] = q[-1, -1] = 1.0
    q[idx[:-1], idx[1:]] = -omega
    q[idx[1:], idx[:-1]] = -omega
    q /= 1.0 - omega**2
    return StructureMatrix(
        matrix=q,
        rank_deficiency=0,
        null_space=np.zeros((length, 0)),
        scaled=True,
        scale_factor=np.ones(length),
    )


INTERACTION_TYPES = ("I", "II", "III", "IV")

_TYPE_ALIASES = {1: "I", 2: "II", 3: "III", 4: "IV"}


def _unit_rows(positions, values, dim) -> np.ndarray:
    row = np.zeros(dim)
    row[positions] = values
    return row


def interaction_structure(
    interaction: str,
    temporal: StructureMatrix,
    spatial: StructureMatrix,
) -> tuple:
    """Space-time interaction precision and its identifiability constraints.

    The layout is time-major: entry ``t * n + i`` is area ``i`` at time
    ``t`` for ``n`` areas.  Types are the standard taxonomy: independent
    (I), structured time by independent space (II), independent time by
    structured space (III), structured by structured (IV).

    Constraints span the null space exactly.  For type IV the raw
    per-area and per-time sum constraints are linearly dependent; per
    spatial component, one time row per temporal null dimension is
    dropped (the trailing ones).

    Returns
    -------
    (StructureMatrix, ConstraintSet)
    """
    interaction = _TYPE_ALIASES.get(interaction, interaction)
    if interaction not in INTERACTION_TYPES:
        raise ValueError(f"interaction must be one of {INTERACTION_TYPES}")
    q_t, q_s = temporal.matrix, spatial.matrix
    n_t, n_s = q_t.shape[0], q_s.shape[0]
    dim = n_t * n_s
    null_t, null_s = temporal.null_space, spatial.null_space
    def_t, def_s = temporal.rank_deficiency, spatial.rank_deficiency

    if interaction == "I":
        q = np.eye(dim)
        constraints = ConstraintSet.empty(dim)
        null = np.zeros((dim, 0))
        deficiency = 0
    elif interaction == "II":
        q = np.kron(q_t, np.eye(n_s))
        rows = [
            np.kron(null_t[:, k], _unit_rows([i], [1.0], n_s))
            for k in range(def_t)
            for i in range(n_s)
        ]
        constraints = ConstraintSet(np.array(rows).reshape(-1, dim))
        null = np.column_stack(rows) if rows else np.zeros((dim, 0))
        deficiency = def_t * n_s
    elif interaction == "III":
        q = np.kron(np.eye(n_t), q_s)
        rows = [
            np.kron(_unit_rows([t], [1.0], n_t), null_s[:, c])
            for t in range(n_t)
            for c in range(def_s)
        ]
        constraints = ConstraintSet(np.array(rows).reshape(-1, dim))
        null = np.column_stack(rows) if rows else np.zeros((dim, 0))
        deficiency = n_t * def_s
    else:
        q = np.kron(q_t, q_s)
        area_rows = [
            np.kron(null_t[:, k], _unit_rows([i], [1.0], n_s))
            for k in range(def_t)
            for i in range(n_s)
        ]
        time_rows = []
        for c in range(def_s):
            # Trailing def_t time rows of each spatial component are the
            # linearly dependent ones once all area rows are present.
            for t in range(n_t - def_t):
                time_rows.append(np.kron(_unit_rows([t], [1.0], n_t), null_s[:, c]))
        constraints = ConstraintSet(np.array(area_rows + time_rows).reshape(-1, dim))
        deficiency = n_t * def_s + def_t * n_s - def_t * def_s
        candidates = area_rows + [
            np.kron(_unit_rows([t], [1.0], n_t), null_s[:, c])
            for t in range(n_t)
            for c in range(def_s)
        ]
        null = (
            scipy.linalg.orth(np.column_stack(candidates))
            if candidates
            else np.zeros((dim, 0))
        )

    if null.shape[1] != deficiency:
        raise AssertionError("interaction null-space dimension mismatch")
    structure = StructureMatrix(
        matrix=q,
        rank_deficiency=deficiency,
        null_space=null,
        scaled=temporal.scaled and spatial.scaled,
        scale_factor=np.ones(dim),
    )
    return structure, constraints


def bym2_effect(sigma, phi, e_star, s_star) -> np.ndarray:
    """Combine standardized unstructured and structured spatial effects.

    The total effect is ``sigma * (sqrt(1 - phi) * e + sqrt(phi) * s)``;
    ``phi`` is the share of variance from the structured part.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    e = np.asarray(e_star, dtype=float)
    s = np.asarray(s_star, dtype=float)
    if e.shape != s.shape:
        raise ValueError("effect vectors must have equal shape")
    return sigma * (np.sqrt(1.0 - phi) * e + np.sqrt(phi) * s)
