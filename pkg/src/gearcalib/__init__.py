"""Bayesian cross-gear calibration of fish abundance survey data."""

from .dataset import (
    CAMERAS,
    RATIO_SHIFT,
    SpeciesMaxNTable,
    TripRecord,
    compute_camera_ratio,
    compute_pooled_ratio,
    load_species_table,
    load_trips,
)
from .inference import PosteriorDraws, SamplerConfig, initialize_state, run_mcmc
from .modelgraph import (
    ModelConfig,
    ModelGraph,
    ParameterState,
    build_model,
    exchangeable_mvn_logdensity,
    log_posterior,
    sub_log_likelihood,
)

__version__ = "0.1.0"

__all__ = [
    "CAMERAS",
    "RATIO_SHIFT",
    "ModelConfig",
    "ModelGraph",
    "ParameterState",
    "PosteriorDraws",
    "SamplerConfig",
    "SpeciesMaxNTable",
    "TripRecord",
    "build_model",
    "compute_camera_ratio",
    "compute_pooled_ratio",
    "exchangeable_mvn_logdensity",
    "initialize_state",
    "load_species_table",
    "load_trips",
    "log_posterior",
    "run_mcmc",
    "sub_log_likelihood",
]
