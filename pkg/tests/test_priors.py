"""Penalised-complexity priors: tail contracts checked by quadrature."""

import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from stsae.gmrf import graph_from_adjacency, icar_precision, rw_precision
from stsae.priors import (
    BoundedExponentialPrior,
    PCSigmaPrior,
    PCSlopePrior,
    pc_omega_logdensity,
    pc_omega_prior,
    pc_phi_logdensity,
    pc_phi_prior,
    pc_sigma_logdensity,
    solve_pc_rate,
)

# Frozen expected values, derived independently of the implementation:
#   sigma rate for P(sigma > 1) = 0.01: -log(0.01)
SIGMA_RATE = 4.605170185988091
#   slope scale for P(|b| < 1) = 0.95: 1 / Phi^{-1}(0.975)
SLOPE_SCALE = 0.5102134569246539
#   overdispersion rate for P(rho > 0.1) = 0.01 on (0, 1): solves the
#   truncated-exponential tail; the truncation correction at this rate
#   is O(1e-20) so the value is -log(0.01)/0.1 to 9 digits.
BOUNDED_RATE = 46.05170185950298


def quad_mass(logpdf, lo, hi, points=200001):
    """Trapezoid quadrature of exp(logpdf) on a fine uniform grid."""
    grid = np.linspace(lo, hi, points)
    dens = np.exp(logpdf(grid))
    return float(np.trapezoid(dens, grid))


class TestSigmaPrior:
    def test_rate_closed_form(self):
        assert PCSigmaPrior(1.0, 0.01).rate == pytest.approx(SIGMA_RATE, abs=1e-14)

    def test_median_closed_form(self):
        prior = PCSigmaPrior(1.0, 0.01)
        assert prior.median == pytest.approx(math.log(2) / SIGMA_RATE, abs=1e-14)

    def test_tail_by_quadrature(self):
        prior = PCSigmaPrior(1.0, 0.01)
        tail = quad_mass(lambda s: pc_sigma_logdensity(s, prior), 1.0, 12.0)
        assert tail == pytest.approx(0.01, abs=1e-6)

    def test_normalization(self):
        prior = PCSigmaPrior(1.0, 0.01)
        total = quad_mass(lambda s: pc_sigma_logdensity(s, prior), 1e-9, 12.0)
        assert total == pytest.approx(1.0, abs=1e-5)

    def test_exponential_density_shape(self):
        prior = PCSigmaPrior(1.0, 0.01)
        sigma = np.array([0.2, 0.5, 1.5])
        expected = np.log(prior.rate) - prior.rate * sigma
        assert np.allclose(pc_sigma_logdensity(sigma, prior), expected)

    def test_invalid_contrast(self):
        with pytest.raises(ValueError):
            PCSigmaPrior(1.0, 1.5)


@pytest.fixture(scope="module")
def icar_structure():
    names = ("w", "c", "e", "n")
    a = np.zeros((4, 4), dtype=int)
    for i, j in [(0, 1), (1, 2), (0, 3), (1, 3), (2, 3)]:
        a[i, j] = a[j, i] = 1
    return icar_precision(graph_from_adjacency(names, a))


class TestPhiPrior:
    def test_default_mass_below_half(self, icar_structure):
        prior = pc_phi_prior(icar_structure, 0.5, 2.0 / 3.0)
        mass = quad_mass(lambda p: pc_phi_logdensity(p, prior), 1e-9, 0.5)
        assert mass == pytest.approx(2.0 / 3.0, abs=1e-3)

    def test_normalization(self, icar_structure):
        prior = pc_phi_prior(icar_structure, 0.5, 2.0 / 3.0)
        total = quad_mass(lambda p: pc_phi_logdensity(p, prior), 1e-9, 1.0 - 1e-9)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_cdf_matches_contract(self, icar_structure):
        prior = pc_phi_prior(icar_structure, 0.5, 2.0 / 3.0)
        assert prior.cdf(0.5) == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_distance_zero_at_base(self, icar_structure):
        prior = pc_phi_prior(icar_structure, 0.5, 2.0 / 3.0)
        assert float(prior.distance(1e-12)) == pytest.approx(0.0, abs=1e-5)

    def test_distance_monotone(self, icar_structure):
        prior = pc_phi_prior(icar_structure, 0.5, 2.0 / 3.0)
        grid = np.linspace(1e-6, 1 - 1e-6, 200)
        d = np.array([float(prior.distance(p)) for p in grid])
        assert np.all(np.diff(d) > 0)

    def test_works_on_rw_structure(self):
        prior = pc_phi_prior(rw_precision(12, 1), 0.5, 2.0 / 3.0)
        assert prior.cdf(0.5) == pytest.approx(2.0 / 3.0, abs=1e-9)


class TestOmegaPrior:
    def test_default_tail_contract(self):
        prior = pc_omega_prior(10, 0.7, 0.9)
        assert prior.cdf_above(0.7) == pytest.approx(0.9, abs=1e-9)

    def test_tail_by_quadrature(self):
        # substitute s = sqrt(1 - omega) to regularize the 1/sqrt spike at 1
        prior = pc_omega_prior(10, 0.7, 0.9)
        s = np.linspace(1e-9, math.sqrt(1.0 - 0.7), 400001)
        dens = np.exp(pc_omega_logdensity(1.0 - s**2, prior)) * 2.0 * s
        assert float(np.trapezoid(dens, s)) == pytest.approx(0.9, abs=1e-4)

    def test_t2_distance_analytic(self):
        # with two time points the scaled distance is sqrt(1 - omega)
        prior = pc_omega_prior(2, 0.7, 0.9)
        for omega in (-0.5, 0.0, 0.3, 0.9):
            assert float(prior.distance(omega)) == pytest.approx(
                math.sqrt(1.0 - omega), abs=1e-12
            )

    def test_t2_cdf_analytic(self):
        prior = pc_omega_prior(2, 0.7, 0.9)
        lam, d_max = prior.rate, math.sqrt(2.0)
        for u in (-0.4, 0.0, 0.5, 0.8):
            expected = -math.expm1(-lam * math.sqrt(1.0 - u)) / -math.expm1(-lam * d_max)
            assert prior.cdf_above(u) == pytest.approx(expected, abs=1e-9)

    def test_distance_formula_any_t(self):
        t = 7
        prior = pc_omega_prior(t, 0.7, 0.9)
        for omega in (-0.6, 0.2, 0.85):
            k = np.arange(1, t)
            v = (t + 2 * np.sum((t - k) * omega**k)) / t
            assert float(prior.distance(omega)) == pytest.approx(
                math.sqrt(t - v), abs=1e-12
            )

    def test_unattainable_contrast_rejected(self):
        with pytest.raises(ValueError, match="attainable"):
            pc_omega_prior(40, 0.7, 0.9)

    def test_density_finite_across_domain(self):
        for t in (2, 3, 5, 10):
            prior = pc_omega_prior(t, 0.7, 0.9)
            vals = pc_omega_logdensity(
                np.array([-0.999999, -0.5, 0.0, 0.7, 0.999]), prior
            )
            assert np.all(np.isfinite(vals)), t


class TestSlopePrior:
    def test_scale_closed_form(self):
        assert PCSlopePrior(1.0, 0.95).scale == pytest.approx(SLOPE_SCALE, abs=1e-14)

    def test_contract_by_normal_cdf(self):
        prior = PCSlopePrior(2.0, 0.8)
        coverage = norm.cdf(2.0, scale=prior.scale) - norm.cdf(-2.0, scale=prior.scale)
        assert coverage == pytest.approx(0.8, abs=1e-12)


class TestBoundedExponential:
    def test_rate_frozen(self):
        assert BoundedExponentialPrior(0.1, 0.01).rate == pytest.approx(
            BOUNDED_RATE, abs=1e-6
        )

    def test_tail_contract_by_quadrature(self):
        prior = BoundedExponentialPrior(0.1, 0.01)
        tail, _ = integrate.quad(lambda r: math.exp(prior.logdensity(r)), 0.1, 1.0)
        assert tail == pytest.approx(0.01, abs=1e-8)

    def test_normalization(self):
        prior = BoundedExponentialPrior(0.1, 0.01)
        total, _ = integrate.quad(
            lambda r: math.exp(prior.logdensity(r)), 1e-12, 1.0, limit=200
        )
        assert total == pytest.approx(1.0, abs=1e-7)

    def test_outside_domain_rejected(self):
        prior = BoundedExponentialPrior(0.1, 0.01)
        assert prior.logdensity(1.5) == -np.inf or np.isneginf(prior.logdensity(1.5))


class TestSolvePCRate:
    def test_recovers_simple_exponential(self):
        # distance d(x) = x on (0, inf): P(X > u) = exp(-rate u) = alpha
        rate = solve_pc_rate(1.0, 0.05, lambda x: x, (0.0, np.inf), tail="upper")
        assert rate == pytest.approx(-math.log(0.05), rel=1e-9)
