"""Space-time small-area estimation of under-five mortality.

The package walks the full pipeline: survey simulation and person-month
expansion, design-based direct estimation with jackknife variances,
Gaussian Markov random field structures with penalised-complexity
priors, MCMC inference for latent Gaussian models with Gaussian or
beta-binomial likelihoods, space-time smoothing models, posterior
prediction and aggregation, and reporting (classification probabilities
and SVG maps).
"""

from . import cli, demo, direct, gmrf, inference, models, priors, reports, survey
from .direct import (
    DIRECT_COLUMNS,
    JackknifeConfig,
    adjust_ratio,
    aggregate_surveys,
    direct_all,
    direct_u5mr,
    ht_estimate,
)
from .gmrf import (
    ConstraintSet,
    RegionGraph,
    StructureMatrix,
    ar1_precision,
    build_graph,
    graph_from_adjacency,
    graph_from_geojson,
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
    grid_oracle,
    summarize_draws,
)
from .models import (
    FitResult,
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
    load_fit,
    predict_u5mr,
    save_fit,
    smooth_direct_estimates,
    spec_from_json,
)
from .priors import (
    BoundedExponentialPrior,
    PCSigmaPrior,
    PCSlopePrior,
    pc_omega_prior,
    pc_phi_prior,
)
from .reports import TCPResult, render_hatch, render_map, render_ridge, tcp_classify
from .survey import (
    AgeBandSchema,
    StratumDesign,
    SurveyDesign,
    aggregate_counts,
    expand_births,
    simulate_survey,
    true_u5mr_table,
)

__version__ = "0.1.0"
