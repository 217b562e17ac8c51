"""Penalised-complexity priors for the smoothing model hyperparameters.

Each prior follows the same construction: a distance ``d`` from a base
model (measured as the square root of twice a Kullback-Leibler
divergence), an exponential density on that distance (truncated when the
distance is bounded), and a rate solved so that a user-stated tail
probability holds.  Closed forms exist only for scale parameters; the
mixing and autocorrelation priors are tabulated on dense grids and
evaluated by interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .gmrf import RegionGraph, StructureMatrix, icar_precision

__all__ = [
    "PCSigmaPrior",
    "PCPhiPrior",
    "PCOmegaPrior",
    "PCSlopePrior",
    "BoundedExponentialPrior",
    "pc_sigma_logdensity",
    "pc_phi_prior",
    "pc_phi_logdensity",
    "pc_omega_prior",
    "pc_omega_logdensity",
    "solve_pc_rate",
]


def _validate_contrast(u: float, alpha: float) -> None:
    if not u > 0:
        raise ValueError("threshold u must be positive")
    if not 0.0 < alpha < 1.0:
        raise ValueError("tail probability alpha must lie in (0, 1)")


@dataclass(frozen=True)
class PCSigmaPrior:
    """Exponential prior on a standard deviation, P(sigma > u) = alpha."""

    u: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        _validate_contrast(self.u, self.alpha)

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) / self.u

    @property
    def median(self) -> float:
        return math.log(2.0) / self.rate


def pc_sigma_logdensity(sigma, prior: PCSigmaPrior):
    """Log density of the scale prior; ``-inf`` outside ``sigma > 0``."""
    sigma = np.asarray(sigma, dtype=float)
    out = np.where(sigma > 0, math.log(prior.rate) - prior.rate * sigma, -np.inf)
    return out if out.ndim else float(out)


def _truncated_exp_cdf(d, rate, d_max):
    """CDF of an exponential distance truncated to ``[0, d_max]``."""
    if not np.isfinite(d_max):
        return -np.expm1(-rate * d)
    return np.expm1(-rate * d) / np.expm1(-rate * d_max)


def solve_pc_rate(u_value, alpha, distance_fn, domain, tail="upper", rtol=1e-10):
    """Solve the exponential rate for a stated tail contrast.

    Parameters
    ----------
    u_value, alpha : float
        The contrast: ``P(param > u) = alpha`` for ``tail='upper'`` or
        ``P(param < u) = alpha`` for ``tail='lower'``.
    distance_fn : callable
        Monotone distance from the base model, zero at the base.  It is
        evaluated at ``u_value`` and just inside both domain ends.
    domain : (float, float)
        Open parameter domain; an infinite endpoint means the distance
        is unbounded there.
    tail : str
        Which tail the contrast states.

    Returns
    -------
    float
        The exponential rate.  Falls back to bisection when the
        distance is bounded; the unbounded case has the closed form
        ``-log(tail mass at u) / d(u)``.

    Raises
    ------
    ValueError
        If the contrast is unattainable; the attainable range is
        reported.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("tail probability alpha must lie in (0, 1)")
    if tail not in ("upper", "lower"):
        raise ValueError("tail must be 'upper' or 'lower'")
    lo, hi = domain
    if not lo < u_value < hi:
        raise ValueError("threshold u must lie inside the parameter domain")
    d_u = float(distance_fn(u_value))
    if not d_u > 0:
        raise ValueError("distance at u must be positive (u equals the base model?)")
    eps = 1e-12
    ends = []
    for end in (lo, hi):
        if np.isfinite(end):
            span = min(abs(u_value - end), 1.0)
            ends.append(float(distance_fn(end + eps * span if end == lo else end - eps * span)))
        else:
            ends.append(np.inf)
    d_max = max(ends)

    # Convert the stated tail into mass below d(u) on the distance scale.
    increasing = ends[1] >= ends[0]
    mass_below = alpha if (tail == "upper") != increasing else 1.0 - alpha

    if not np.isfinite(d_max):
        return -math.log1p(-mass_below) / d_u

    floor = d_u / d_max  # rate -> 0 limit of P(d < d_u)
    if not floor < mass_below < 1.0:
        lo_alpha, hi_alpha = (floor, 1.0) if mass_below == alpha else (0.0, 1.0 - floor)
        raise ValueError(
            "contrast unattainable for the truncated distance: attainable "
            f"alpha range is ({lo_alpha:.6g}, {hi_alpha:.6g})"
        )

    def gap(log_rate):
        rate = math.exp(log_rate)
        return _truncated_exp_cdf(d_u, rate, d_max) - mass_below

    lo_log, hi_log = -20.0, 20.0
    while gap(lo_log) > 0:
        lo_log -= 10.0
    while gap(hi_log) < 0:
        hi_log += 10.0
    for _ in range(200):
        mid = 0.5 * (lo_log + hi_log)
        if gap(mid) >= 0:
            hi_log = mid
        else:
            lo_log = mid
        if hi_log - lo_log < rtol:
            break
    return math.exp(0.5 * (lo_log + hi_log))


def _interp_logpdf(x, grid, logpdf, lo, hi):
    x = np.asarray(x, dtype=float)
    out = np.interp(x, grid, logpdf, left=-np.inf, right=logpdf[-1])
    out = np.where((x < lo) | (x > hi), -np.inf, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PCPhiPrior:
    """Prior on the structured-variance share of a combined spatial effect.

    The base model puts all variance on the unstructured part
    (``phi = 0``).  The divergence of the mixed model from the base is
    computed on the subspace orthogonal to the structured component's
    null space, using the eigenvalues of the scaled generalized inverse,
    so the distance is bounded and the exponential is truncated.
    """

    u: float = 0.5
    alpha: float = 2.0 / 3.0
    gamma: np.ndarray = field(default=None, repr=False)
    grid: np.ndarray = field(default=None, repr=False)
    logpdf: np.ndarray = field(default=None, repr=False)
    rate: float = None
    d_max: float = None

    def distance(self, phi):
        phi = np.asarray(phi, dtype=float)
        vals = np.atleast_1d(phi)
        g = self.gamma[:, None] - 1.0
        kld = 0.5 * np.sum(vals[None, :] * g - np.log1p(vals[None, :] * g), axis=0)
        d = np.sqrt(np.maximum(2.0 * kld, 0.0))
        return d[0] if phi.ndim == 0 else d

    def cdf(self, phi) -> float:
        return float(_truncated_exp_cdf(self.distance(phi), self.rate, self.d_max))


def pc_phi_prior(structure, u: float = 0.5, alpha: float = 2.0 / 3.0, grid_size: int = 1001) -> PCPhiPrior:
    """Tabulate the variance-share prior for a given spatial structure.

    Parameters
    ----------
    structure : RegionGraph or StructureMatrix
        The structured component; a graph is converted with
        :func:`icar_precision`.
    u, alpha : float
        Contrast ``P(phi < u) = alpha``.
    grid_size : int
        Number of tabulation points on ``[0, 1]``.
    """
    _validate_contrast(u, alpha)
    if not 0.0 < u < 1.0:
        raise ValueError("phi threshold must lie in (0, 1)")
    if isinstance(structure, RegionGraph):
        structure = icar_precision(structure)
    if not isinstance(structure, StructureMatrix):
        raise TypeError("structure must be a RegionGraph or StructureMatrix")
    if not structure.scaled:
        raise ValueError("phi prior requires a scaled structure")
    vals = scipy.linalg.eigh(structure.matrix, eigvals_only=True)
    vals = vals[structure.rank_deficiency :]
    if vals.size == 0 or np.any(vals <= 0):
        raise ValueError("structured component has no positive-variance subspace")
    gamma = 1.0 / vals

    prior = PCPhiPrior(u=u, alpha=alpha, gamma=gamma)
    d_max = float(prior.distance(1.0))
    rate = solve_pc_rate(
        u, alpha, lambda p: float(prior.distance(p)), (0.0, 1.0), tail="lower"
    )

    grid = np.linspace(0.0, 1.0, grid_size)
    if not np.any(np.isclose(grid, u)):
        grid = np.sort(np.append(grid, u))
    g = gamma[:, None] - 1.0
    d = prior.distance(grid)
    # d'(phi) = KLD'(phi) / d(phi); the phi -> 0 limit is sqrt(sum (g-1)^2 / 2).
    kld_grad = 0.5 * np.sum(g - g / (1.0 + grid[None, :] * g), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_grad = np.where(d > 0, kld_grad / np.where(d > 0, d, 1.0), np.sqrt(np.sum(g[:, 0] ** 2) / 2.0))
    log_norm = math.log(-math.expm1(-rate * d_max))
    logpdf = math.log(rate) - rate * d + np.log(d_grad) - log_norm

    object.__setattr__(prior, "grid", grid)
    object.__setattr__(prior, "logpdf", logpdf)
    object.__setattr__(prior, "rate", rate)
    object.__setattr__(prior, "d_max", d_max)
    return prior


def pc_phi_logdensity(phi, prior: PCPhiPrior):
    """Interpolated log density on ``[0, 1]``."""
    return _interp_logpdf(phi, prior.grid, prior.logpdf, 0.0, 1.0)


@dataclass(frozen=True)
class PCOmegaPrior:
    """Prior on a stationary lag-one autocorrelation with base ``omega = 1``.

    The base is the perfectly correlated (constant-in-time) limit.  The
    divergence rate of the length-``T`` process from that degenerate
    base reduces to ``d(omega) = sqrt(T - mean of all pairwise
    correlations)``, which behaves like ``sqrt(1 - omega)`` near the
    base; for ``T = 2`` it is exactly that.  The distance is bounded, so
    the exponential is truncated, and the density has an integrable
    spike at the base.
    """

    u: float = 0.7
    alpha: float = 0.9
    length: int = 2
    grid: np.ndarray = field(default=None, repr=False)
    logpdf: np.ndarray = field(default=None, repr=False)
    rate: float = None
    d_max: float = None

    def distance(self, omega):
        omega = np.asarray(omega, dtype=float)
        t = self.length
        k = np.arange(1, t)
        powers = omega[..., None] ** k
        v = (t + 2.0 * np.sum((t - k) * powers, axis=-1)) / t
        return np.sqrt(np.maximum(t - v, 0.0))

    def cdf_above(self, omega) -> float:
        """P(autocorrelation > omega) = P(distance < d(omega))."""
        return float(_truncated_exp_cdf(self.distance(omega), self.rate, self.d_max))


def pc_omega_prior(length: int, u: float = 0.7, alpha: float = 0.9, grid_size: int = 2000) -> PCOmegaPrior:
    """Tabulate the autocorrelation prior for a series of given length.

    The contrast is ``P(omega > u) = alpha``.  Tabulation uses a grid
    geometric in ``sqrt(1 - omega)`` so the spike at the base is
    resolved; evaluation interpolates the log density.
    """
    _validate_contrast(u, alpha)
    if not -1.0 < u < 1.0:
        raise ValueError("omega threshold must lie in (-1, 1)")
    if length < 2:
        raise ValueError("need at least two time points")
    prior = PCOmegaPrior(u=u, alpha=alpha, length=length)
    rate = solve_pc_rate(
        u, alpha, lambda w: float(prior.distance(w)), (-1.0, 1.0), tail="upper"
    )
    d_max = float(prior.distance(-1.0 + 1e-12))

    # omega = 1 - s^2 with s geometric: dense near the base where the
    # density diverges like (1 - omega)^(-1/2).
    s = np.geomspace(1e-7, np.sqrt(2.0), grid_size)
    grid = np.clip(1.0 - s**2, -1.0 + 1e-12, 1.0 - 1e-12)
    grid = np.sort(np.unique(np.concatenate([grid, [u, 0.0]])))
    t = length
    k = np.arange(1, t)
    d = prior.distance(grid)
    v_grad = 2.0 * np.sum(k * (t - k) * grid[:, None] ** (k - 1)[None, :], axis=1) / t
    # Rounding can leave a tiny negative derivative at the -1 endpoint.
    v_grad = np.maximum(v_grad, 0.0)
    with np.errstate(divide="ignore"):
        log_d_grad = np.log(v_grad) - np.log(2.0 * d)
    log_norm = math.log(-math.expm1(-rate * d_max))
    logpdf = math.log(rate) - rate * d + log_d_grad - log_norm

    object.__setattr__(prior, "grid", grid)
    object.__setattr__(prior, "logpdf", logpdf)
    object.__setattr__(prior, "rate", rate)
    object.__setattr__(prior, "d_max", d_max)
    return prior


def pc_omega_logdensity(omega, prior: PCOmegaPrior):
    """Interpolated log density on ``(-1, 1)``."""
    return _interp_logpdf(omega, prior.grid, prior.logpdf, -1.0, 1.0 - 1e-15)


@dataclass(frozen=True)
class PCSlopePrior:
    """Gaussian prior on a shared linear-trend coefficient.

    The scale is solved from ``P(|slope| < u) = alpha``.
    """

    u: float = 1.0
    alpha: float = 0.9

    def __post_init__(self):
        _validate_contrast(self.u, self.alpha)

    @property
    def scale(self) -> float:
        return self.u / ndtri(0.5 * (1.0 + self.alpha))


@dataclass(frozen=True)
class BoundedExponentialPrior:
    """Exponential prior truncated to ``(0, 1)``; used for overdispersion.

    Distance from the no-overdispersion base is the parameter itself,
    and the contrast states ``P(param > u) = alpha``.
    """

    u: float = 0.1
    alpha: float = 0.01

    def __post_init__(self):
        _validate_contrast(self.u, self.alpha)
        if not self.u < 1.0:
            raise ValueError("threshold must lie inside (0, 1)")

    @property
    def rate(self) -> float:
        return solve_pc_rate(self.u, self.alpha, lambda x: x, (0.0, 1.0), tail="upper")

    def logdensity(self, value):
        value = np.asarray(value, dtype=float)
        rate = self.rate
        log_norm = math.log(-math.expm1(-rate))
        out = np.where(
            (value > 0) & (value < 1),
            math.log(rate) - rate * value - log_norm,
            -np.inf,
        )
        return out if out.ndim else float(out)
