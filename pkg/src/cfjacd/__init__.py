"""Distributed expectation propagation for grant-free cell-free massive MIMO.

Modules: ``expfam`` (Gaussian, Bernoulli-Gaussian and categorical algebra),
``sysmodel`` (network drops and block realizations), ``engine`` (message
passing), ``baselines`` (centralized linear MMSE), ``metrics`` and
``harness`` (Monte Carlo campaigns, result files).
"""

from .engine import EngineConfig, Estimates, Observation, Priors, Variant, jac_ep_initialize, run
from .harness import CampaignConfig, fronthaul_load, run_campaign
from .sysmodel import ConfigError, NetworkConfig

__version__ = "0.1.0"

__all__ = [
    "CampaignConfig",
    "ConfigError",
    "EngineConfig",
    "Estimates",
    "NetworkConfig",
    "Observation",
    "Priors",
    "Variant",
    "fronthaul_load",
    "jac_ep_initialize",
    "run",
    "run_campaign",
]
