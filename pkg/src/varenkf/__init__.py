"""Sequential Bayesian filtering with a KL-optimal affine-map ensemble update,
baseline filters, and Lorenz-96 / Fisher-equation twin-experiment benchmarks.
"""

from .baselines import (
    analytic_kalman_map,
    ekf_update,
    nleaf_update,
    pf_update,
    stochastic_enkf_update,
)
from .ensemble import (
    AffineMap,
    GaussianMoments,
    StateEnsemble,
    apply_affine,
    empirical_moments,
    gaussian_kld,
    sample_gaussian,
)
from .harness import ExperimentConfig, RunRecord, run_experiment
from .lmekf import GdConfig, GdTrace, lmekf_update, minimize_kld
from .localization import LocalizationConfig, localized_update, windows
from .obsmodel import LinearGaussianObs, PowerScaledNoiseModel, quad_map

__all__ = [
    "AffineMap",
    "ExperimentConfig",
    "GaussianMoments",
    "GdConfig",
    "GdTrace",
    "LinearGaussianObs",
    "LocalizationConfig",
    "PowerScaledNoiseModel",
    "RunRecord",
    "StateEnsemble",
    "analytic_kalman_map",
    "apply_affine",
    "ekf_update",
    "empirical_moments",
    "gaussian_kld",
    "lmekf_update",
    "localized_update",
    "minimize_kld",
    "nleaf_update",
    "pf_update",
    "quad_map",
    "run_experiment",
    "sample_gaussian",
    "stochastic_enkf_update",
    "windows",
]

__version__ = "0.1.0"
