"""Parametric sensitivity estimation for reaction-network Markov chains.

Pathwise, likelihood-ratio, coupled finite-difference and hybrid estimators,
plus master-equation and closed-form oracles for checking them.
"""
from .config import load_model, make_observable
from .couple import simulate_coupled
from .estimators import (
    Estimate,
    allocate,
    cfd_estimate,
    hybrid_estimate,
    lr_cv_estimate,
    lr_estimate,
    pathwise_estimate,
)
from .model import (
    Clipped,
    ConfigurationError,
    MassAction,
    MichaelisMenten,
    ReactionNetwork,
    ValidationError,
    build_approx_process,
    check_non_interruptive,
    network_from_reactions,
)
from .oracle import cme_sensitivity, cme_solve, functional_sensitivity
from .sim import (
    ExplosionError,
    Polynomial,
    flux_functional,
    make_gs_functional,
    make_rpd_functional,
    run_paths,
    simulate,
    terminal_functional,
)

__version__ = "0.1.0"
