"""Semiclassical simulation and analysis of cavity self-organization in tweezer atom arrays."""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, load_config
from .criticality import BoltzmannFit, CriticalPointEstimator, fit_boltzmann, interpolate_critical, noise_correction
from .dynamics import RampSchedule, simulate_ensemble, simulate_shot, thermal_initialize
from .model import AtomArrayState, DebyeWallerEpsilon, critical_pump, order_parameter

__all__ = [
    "AtomArrayState",
    "BoltzmannFit",
    "ConfigError",
    "CriticalPointEstimator",
    "DebyeWallerEpsilon",
    "ExperimentConfig",
    "RampSchedule",
    "critical_pump",
    "fit_boltzmann",
    "interpolate_critical",
    "load_config",
    "noise_correction",
    "order_parameter",
    "simulate_ensemble",
    "simulate_shot",
    "thermal_initialize",
]
