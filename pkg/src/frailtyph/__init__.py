"""Bayesian survival engine: piecewise-exponential proportional hazards
with cluster frailties whose distribution changes shape with cluster-level
covariates, fitted by adaptive Metropolis-within-Gibbs."""

__version__ = "0.1.0"

from .data import Dataset, goodman_kruskal_gamma, load_dataset, summarize
from .hazard import (
    CutPoints,
    PiecewiseHazard,
    cumulative_hazard,
    expand_poisson,
    explicit_cutpoints,
    poisson_loglik,
    quantile_cutpoints,
)
from .inference import (
    compute_dic,
    compute_lpml,
    predictive_frailty_density,
    predictive_survival,
    pseudo_bayes_factor,
    summarize_posterior,
)
from .ldtfp import (
    TailfreeForest,
    build_partition,
    conditional_cdf,
    conditional_density,
    log_prior_density,
    sample_prior,
)
from .sampler import (
    ChainControls,
    Hyperparameters,
    ModelSpec,
    PosteriorChain,
    prior_replication_check,
    run_chain,
)
from .simulate import (
    ScenarioSpec,
    StudyMethod,
    generate_scenario_I,
    generate_scenario_II,
    run_study,
    sample_positive_stable,
    weighted_ise,
)

__all__ = [
    "Dataset",
    "load_dataset",
    "goodman_kruskal_gamma",
    "summarize",
    "CutPoints",
    "PiecewiseHazard",
    "quantile_cutpoints",
    "explicit_cutpoints",
    "cumulative_hazard",
    "expand_poisson",
    "poisson_loglik",
    "TailfreeForest",
    "build_partition",
    "conditional_density",
    "conditional_cdf",
    "sample_prior",
    "log_prior_density",
    "ModelSpec",
    "ChainControls",
    "Hyperparameters",
    "PosteriorChain",
    "run_chain",
    "prior_replication_check",
    "predictive_survival",
    "predictive_frailty_density",
    "compute_lpml",
    "compute_dic",
    "pseudo_bayes_factor",
    "summarize_posterior",
    "ScenarioSpec",
    "StudyMethod",
    "sample_positive_stable",
    "generate_scenario_I",
    "generate_scenario_II",
    "weighted_ise",
    "run_study",
]
