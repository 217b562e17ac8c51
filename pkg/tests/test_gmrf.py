"""Graph structures, precision matrices, scaling, and interactions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsae.gmrf import (
    ConstraintSet,
    RegionGraph,
    ar1_precision,
    bym2_effect,
    graph_from_adjacency,
    graph_from_geojson,
    icar_precision,
    interaction_structure,
    rw_precision,
)

# ---------------------------------------------------------------------------
# Independent oracle: marginal variances of a singular precision under its
# null-space constraints, computed from scratch with an eigendecomposition.


def oracle_constrained_variances(q: np.ndarray) -> np.ndarray:
    """Diagonal of the generalized inverse restricted off the null space."""
    vals, vecs = np.linalg.eigh(q)
    tol = vals.max() * q.shape[0] * np.finfo(float).eps
    keep = vals > tol
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return np.diag(inv)


def oracle_geometric_mean(x: np.ndarray) -> float:
    return float(np.exp(np.mean(np.log(x))))


@pytest.fixture(scope="module")
def demo_adjacency():
    names = ("western", "central", "eastern", "northern")
    a = np.zeros((4, 4), dtype=int)
    for i, j in [(0, 1), (1, 2), (0, 3), (1, 3), (2, 3)]:
        a[i, j] = a[j, i] = 1
    return names, a


class TestRegionGraph:
    def test_demo_degrees(self, demo_adjacency):
        names, a = demo_adjacency
        graph = graph_from_adjacency(names, a)
        assert np.asarray(graph.adjacency).sum(axis=1).tolist() == [2, 3, 2, 3]
        assert graph.is_connected

    def test_disconnected_components(self):
        a = np.zeros((4, 4), dtype=int)
        a[0, 1] = a[1, 0] = 1
        a[2, 3] = a[3, 2] = 1
        graph = graph_from_adjacency(("a", "b", "c", "d"), a)
        assert not graph.is_connected
        assert len(graph.components()) == 2

    def test_geojson_shared_edge_vs_corner(self):
        # Two squares sharing an edge are neighbors; a corner touch is not.
        def square(name, x0, y0):
            return {
                "type": "Feature",
                "properties": {"name": name},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[
                        [x0, y0], [x0 + 1, y0], [x0 + 1, y0 + 1], [x0, y0 + 1], [x0, y0],
                    ]],
                },
            }

        geo = {
            "type": "FeatureCollection",
            "features": [square("a", 0, 0), square("b", 1, 0), square("c", 1, 1)],
        }
        graph = graph_from_geojson(geo)
        adj = np.asarray(graph.adjacency)
        names = list(graph.names)
        a, b, c = names.index("a"), names.index("b"), names.index("c")
        assert adj[a, b] == 1  # shared edge
        assert adj[b, c] == 1  # shared edge
        assert adj[a, c] == 0  # corner touch only


class TestICAR:
    def test_unscaled_is_degree_minus_adjacency(self, demo_adjacency):
        names, a = demo_adjacency
        graph = graph_from_adjacency(names, a)
        struct = icar_precision(graph)
        degrees = a.sum(axis=1)
        unscaled = struct.matrix / struct.scale_factor[:, None]
        assert np.allclose(unscaled, np.diag(degrees) - a)

    def test_geometric_mean_variance_is_one(self, demo_adjacency):
        names, a = demo_adjacency
        struct = icar_precision(graph_from_adjacency(names, a))
        variances = oracle_constrained_variances(struct.matrix)
        assert oracle_geometric_mean(variances) == pytest.approx(1.0, abs=1e-10)

    def test_rank_deficiency_per_component(self):
        a = np.zeros((5, 5), dtype=int)
        a[0, 1] = a[1, 0] = 1
        a[2, 3] = a[3, 2] = a[3, 4] = a[4, 3] = 1
        struct = icar_precision(graph_from_adjacency(tuple("abcde"), a))
        assert struct.rank_deficiency == 2
        # each connected component is scaled separately to GM 1
        v = oracle_constrained_variances(struct.matrix)
        assert oracle_geometric_mean(v[:2]) == pytest.approx(1.0, abs=1e-10)
        assert oracle_geometric_mean(v[2:]) == pytest.approx(1.0, abs=1e-10)

    def test_null_space_indicator_per_component(self, demo_adjacency):
        names, a = demo_adjacency
        struct = icar_precision(graph_from_adjacency(names, a))
        assert struct.null_space.shape == (4, 1)
        assert np.allclose(struct.matrix @ struct.null_space, 0.0, atol=1e-12)


class TestRandomWalks:
    @pytest.mark.parametrize("length", [5, 10, 35])
    def test_rw1_gm_one(self, length):
        struct = rw_precision(length, 1)
        v = oracle_constrained_variances(struct.matrix)
        assert oracle_geometric_mean(v) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("length", [5, 10, 35])
    def test_rw2_gm_one(self, length):
        struct = rw_precision(length, 2)
        v = oracle_constrained_variances(struct.matrix)
        assert oracle_geometric_mean(v) == pytest.approx(1.0, abs=1e-8)

    def test_rw1_null_is_constant(self):
        struct = rw_precision(7, 1)
        assert struct.rank_deficiency == 1
        null = struct.null_space[:, 0]
        assert np.allclose(null / null[0], np.ones(7))

    def test_rw2_null_is_constant_plus_linear(self):
        struct = rw_precision(7, 2)
        assert struct.rank_deficiency == 2
        # the span of the null space contains the linear ramp
        ramp = np.arange(7.0)
        coeffs, residual, *_ = np.linalg.lstsq(struct.null_space, ramp, rcond=None)
        assert np.allclose(struct.null_space @ coeffs, ramp, atol=1e-10)

    def test_rw2_penalizes_second_differences_only(self):
        struct = rw_precision(6, 2)
        line = 0.3 + 0.7 * np.arange(6.0)
        assert line @ struct.matrix @ line == pytest.approx(0.0, abs=1e-12)

    def test_unscaled_rw1_tridiagonal(self):
        struct = rw_precision(4, 1)
        unscaled = struct.matrix / struct.scale_factor[:, None]
        expected = np.array(
            [[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]], dtype=float
        )
        assert np.allclose(unscaled, expected)


class TestAR1:
    @pytest.mark.parametrize("omega", [-0.6, 0.0, 0.5, 0.9])
    def test_unit_marginal_variance(self, omega):
        struct = ar1_precision(8, omega)
        cov = np.linalg.inv(struct.matrix)
        assert np.allclose(np.diag(cov), 1.0, atol=1e-10)

    def test_correlation_structure(self):
        omega = 0.7
        struct = ar1_precision(6, omega)
        cov = np.linalg.inv(struct.matrix)
        i, j = np.indices(cov.shape)
        assert np.allclose(cov, omega ** np.abs(i - j), atol=1e-10)

    def test_full_rank_no_rescale(self):
        struct = ar1_precision(9, 0.4)
        assert struct.rank_deficiency == 0
        assert struct.null_space.shape[1] == 0
        assert np.all(struct.scale_factor == 1.0)

    def test_logdet_closed_form(self):
        t, omega = 11, 0.63
        struct = ar1_precision(t, omega)
        sign, logdet = np.linalg.slogdet(struct.matrix)
        assert sign > 0
        assert logdet == pytest.approx(-(t - 1) * np.log(1 - omega**2), abs=1e-10)

    def test_invalid_omega_rejected(self):
        with pytest.raises(ValueError):
            ar1_precision(5, 1.0)


class TestInteractions:
    @staticmethod
    @pytest.fixture(scope="class")
    def parts(demo_adjacency):
        names, a = demo_adjacency
        icar = icar_precision(graph_from_adjacency(names, a))
        rw2 = rw_precision(8, 2)
        rw1 = rw_precision(8, 1)
        return icar, rw1, rw2

    def test_type_rank_deficiencies_match_matrix_rank_oracle(self, parts):
        icar, rw1, rw2 = parts
        for kind, expected_def in [
            ("I", 0),
            ("II", 2 * 4),    # rw2 deficiency x n regions
            ("III", 1 * 8),   # icar deficiency x T
            ("IV", 2 * 4 + 1 * 8 - 2 * 1),
        ]:
            struct, constraints = interaction_structure(kind, rw2, icar)
            assert struct.size == 32
            oracle_def = 32 - np.linalg.matrix_rank(struct.matrix)
            assert oracle_def == expected_def, kind
            assert struct.rank_deficiency == expected_def
            assert constraints.count == expected_def

    def test_constraints_annihilate_null_space(self, parts):
        icar, rw1, rw2 = parts
        for kind in ("II", "III", "IV"):
            struct, constraints = interaction_structure(kind, rw2, icar)
            # constraint rows are orthogonal to the row space of Q: they
            # span the null space, so Q @ C.T = 0
            assert np.allclose(struct.matrix @ constraints.matrix.T, 0.0, atol=1e-8)

    def test_type_iv_kron_ordering_time_major(self, parts):
        icar, rw1, rw2 = parts
        struct, _ = interaction_structure("IV", rw1, icar)
        expected = np.kron(rw1.matrix, icar.matrix)
        assert np.allclose(struct.matrix, expected)

    def test_type_ii_and_iii_kron_forms(self, parts):
        icar, rw1, rw2 = parts
        s2, _ = interaction_structure("II", rw1, icar)
        assert np.allclose(s2.matrix, np.kron(rw1.matrix, np.eye(4)))
        s3, _ = interaction_structure("III", rw1, icar)
        assert np.allclose(s3.matrix, np.kron(np.eye(8), icar.matrix))

    def test_ar1_temporal_interaction_constraints_omega_free(self, parts):
        icar, _, _ = parts
        a1, c1 = interaction_structure("IV", ar1_precision(6, 0.3), icar)
        a2, c2 = interaction_structure("IV", ar1_precision(6, 0.8), icar)
        assert np.allclose(c1.matrix, c2.matrix)
        assert c1.count == 6 * 1  # T x spatial deficiency
        assert not np.allclose(a1.matrix, a2.matrix)

    def test_interaction_scaled_gm_one(self, parts):
        icar, rw1, _ = parts
        struct, _ = interaction_structure("IV", rw1, icar)
        v = oracle_constrained_variances(struct.matrix)
        assert oracle_geometric_mean(v) == pytest.approx(1.0, abs=1e-8)

    def test_unknown_type_rejected(self, parts):
        icar, rw1, _ = parts
        with pytest.raises(ValueError):
            interaction_structure("V", rw1, icar)


class TestConstraintSet:
    def test_dependent_rows_rejected(self):
        with pytest.raises(ValueError):
            ConstraintSet(np.array([[1.0, 1.0], [2.0, 2.0]]))

    def test_empty(self):
        empty = ConstraintSet.empty(5)
        assert empty.count == 0
        assert empty.dim == 5


class TestBym2Effect:
    def test_weights(self):
        e = np.array([1.0, -1.0])
        s = np.array([0.5, 0.5])
        out = bym2_effect(2.0, 0.36, e, s)
        expected = 2.0 * (np.sqrt(1 - 0.36) * e + np.sqrt(0.36) * s)
        assert np.allclose(out, expected)

    @given(
        st.floats(min_value=0.01, max_value=10.0),
        st.floats(min_value=0.0, max_value=1.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_scale_linearity_and_endpoints(self, sigma, phi):
        rng = np.random.default_rng(0)
        e = rng.normal(size=50)
        s = rng.normal(size=50)
        assert np.allclose(bym2_effect(sigma, phi, e, s), sigma * bym2_effect(1.0, phi, e, s))
        assert np.allclose(bym2_effect(sigma, 0.0, e, s), sigma * e)
        assert np.allclose(bym2_effect(sigma, 1.0, e, s), sigma * s)
