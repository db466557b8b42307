"""Static formulas of the cavity/tweezer model: order parameter, dispersive
detuning, adiabatic cavity field, cavity potential strength and the critical
pump strength.

Kernels prefixed with an underscore work on plain arrays with the atom index
on the last axis, so the integrator can evaluate them for a whole batch of
shots at once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig
from .constants import HBAR, K_B, M_RB87, MHZ, UK, KHZ, NM


class UnstableConfigurationError(ValueError):
    """The thermally averaged pump-cavity detuning is not red (Delta_pc(T) >= 0)."""


@dataclass
class AtomArrayState:
    """Atom positions/momenta and tweezer centres.

    In 1D every array has shape ``(N,)`` and holds the cavity-axis coordinate.
    In 3D the arrays have shape ``(N, 3)`` with columns ``(x, y, z)``; the pump
    propagates along x and the cavity axis is z.
    """

    positions: np.ndarray
    momenta: np.ndarray
    tweezer_centers: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.momenta = np.asarray(self.momenta, dtype=float)
        self.tweezer_centers = np.asarray(self.tweezer_centers, dtype=float)
        if not (self.positions.shape == self.momenta.shape == self.tweezer_centers.shape):
            raise ValueError("positions, momenta and tweezer_centers must share a shape")
        if self.positions.ndim == 2 and self.positions.shape[1] != 3:
            raise ValueError("3D states need shape (N, 3)")

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def dims(self) -> int:
        return 1 if self.positions.ndim == 1 else 3

    @property
    def z(self) -> np.ndarray:
        return self.positions if self.positions.ndim == 1 else self.positions[:, 2]

    @property
    def x(self) -> Optional[np.ndarray]:
        return None if self.positions.ndim == 1 else self.positions[:, 0]


@dataclass(frozen=True)
class CavitySnapshot:
    theta: float
    eff_detuning: float
    field: complex
    c_proj: float
    proj_angle: float


@dataclass(frozen=True)
class PotentialParams:
    d_strength: float
    epsilon_t: float
    sigma_th: float


def stagger(n, staggered: bool = True):
    """Sign pattern of the dominant mode: (-1)^n for half-integer spacing, +1 otherwise."""
    n = np.asarray(n)
    if not staggered:
        return np.ones(n.shape)
    return np.where(n % 2 == 0, 1.0, -1.0)


def tweezer_centers(config: ExperimentConfig, bias: Optional[float] = None) -> np.ndarray:
    """Cavity-axis tweezer centres ``spacing*n + (-1)^n * bias`` for n = 0..N-1."""
    bias = config.tweezer_bias if bias is None else bias
    n = np.arange(config.n_atoms)
    return config.spacing * n + stagger(n, config.staggered) * bias


def thermal_sigma(temperature: float, config: ExperimentConfig, nu: Optional[float] = None) -> float:
    """Thermal rms position spread sqrt(k_B T / (M nu^2)) of a harmonic tweezer."""
    nu = config.nu if nu is None else nu
    return math.sqrt(K_B * temperature / (M_RB87 * nu**2))


# --- array kernels --------------------------------------------------------


def _theta(z: np.ndarray, k: float, x: Optional[np.ndarray] = None) -> np.ndarray:
    s = np.sin(k * z)
    if x is not None:
        s = s * np.cos(k * x)
    return s.mean(axis=-1)


def _eff_detuning(z: np.ndarray, config: ExperimentConfig) -> np.ndarray:
    shift = (config.g0**2 / config.delta_pa) * np.sin(config.k * z) ** 2
    return config.delta_pc - shift.sum(axis=-1)


def _potential_strength(rabi, delta_pa, g0, eff_detuning, kappa):
    return (g0 * rabi / (2.0 * delta_pa)) ** 2 * eff_detuning / (eff_detuning**2 + kappa**2)


def _field(theta, eff_detuning, rabi, config: ExperimentConfig):
    amplitude = config.n_atoms * rabi * config.g0 / (2.0 * config.delta_pa)
    return amplitude * theta / (eff_detuning + 1j * config.kappa)


# --- public operations ----------------------------------------------------


def order_parameter(state: AtomArrayState, wavelength: float) -> float:
    """Mean of sin(k z_n) over the array (weighted by cos(k x_n) in 3D)."""
    return float(_theta(state.z, 2.0 * math.pi / wavelength, state.x))


def effective_detuning(state: AtomArrayState, config: ExperimentConfig) -> float:
    """Pump-cavity detuning including the atoms' dispersive shift."""
    return float(_eff_detuning(state.z, config))


def projection_angle(eff_detuning, kappa):
    """Angle of the quadrature that carries the atomic signal.

    Equals arctan(-kappa/eff_detuning) on the red side and is resolved as
    ``atan2(kappa, -eff_detuning)``, i.e. cos(angle) = -eff_detuning/L and
    sin(angle) = kappa/L with L = sqrt(eff_detuning^2 + kappa^2). With the
    pump red of the atoms (delta_pa < 0) this makes c_proj positive for atoms
    on the positive antinodes; for delta_pa > 0 the sign flips.
    """
    return np.arctan2(kappa, -np.asarray(eff_detuning, dtype=float))


def project(field, angle):
    """Quadrature Re(c) cos(angle) + Im(c) sin(angle)."""
    field = np.asarray(field)
    return field.real * np.cos(angle) + field.imag * np.sin(angle)


def adiabatic_field(state: AtomArrayState, config: ExperimentConfig, rabi: Optional[float] = None) -> complex:
    """Steady-state cavity amplitude A*Theta/(Delta~ + i kappa), A = N Omega g0 / (2 Delta_pa).

    In units of sqrt(photon number). The antinode reference fixes the sign: a
    positive order parameter gives a positive projected quadrature.
    """
    rabi = config.rabi_peak if rabi is None else rabi
    k = config.k
    theta = _theta(state.z, k, state.x)
    return complex(_field(theta, _eff_detuning(state.z, config), rabi, config))


def snapshot(state: AtomArrayState, config: ExperimentConfig, rabi: Optional[float] = None) -> CavitySnapshot:
    rabi = config.rabi_peak if rabi is None else rabi
    theta = order_parameter(state, config.wavelength)
    det = effective_detuning(state, config)
    field = complex(_field(theta, det, rabi, config))
    angle = float(projection_angle(det, config.kappa))
    return CavitySnapshot(theta, det, field, float(project(field, angle)), angle)


def c_proj_formula(theta, eff_detuning, rabi, config: ExperimentConfig):
    """Projected quadrature written directly as N Omega g0 Theta / (2|Delta_pa| L)."""
    return (
        config.n_atoms * rabi * config.g0 / (2.0 * abs(config.delta_pa))
        * theta / np.sqrt(np.asarray(eff_detuning) ** 2 + config.kappa**2)
    )


def cavity_potential_strength(config: ExperimentConfig, eff_detuning, rabi: Optional[float] = None):
    """Strength D of the cavity-induced potential hbar*D*N^2*Theta^2 (rad/s)."""
    rabi = config.rabi_peak if rabi is None else rabi
    return _potential_strength(rabi, config.delta_pa, config.g0, eff_detuning, config.kappa)


def mean_sin2(z0, sigma: float, k: float):
    """<sin^2(k z)> for z ~ Normal(z0, sigma^2)."""
    return 0.5 * (1.0 - np.cos(2.0 * k * np.asarray(z0)) * math.exp(-2.0 * (k * sigma) ** 2))


def thermal_detuning(config: ExperimentConfig, temperature: Optional[float] = None, bias: Optional[float] = None) -> float:
    """Thermal average of the effective detuning, Delta_pc(T), for Gaussian positions."""
    temperature = config.temperature if temperature is None else temperature
    sigma = thermal_sigma(temperature, config)
    s2 = mean_sin2(tweezer_centers(config, bias), sigma, config.k)
    return float(config.delta_pc - (config.g0**2 / config.delta_pa) * s2.sum())


# --- thermal reduction factor ---------------------------------------------


@dataclass(frozen=True)
class DebyeWallerEpsilon:
    """epsilon(T) = transverse_factor(T) * exp(-calibration * k^2 sigma_th^2).

    ``calibration`` scales the thermal Lamb-Dicke exponent so the factor stays
    exactly 1 at T = 0. With calibration = 1 this is the plain axial
    Debye-Waller factor, which is what the 1D simulation realises.
    """

    calibration: float = 1.0
    transverse: Optional[Callable[[float, ExperimentConfig], float]] = None

    def __call__(self, temperature: float, config: ExperimentConfig) -> float:
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        ks2 = (config.k * thermal_sigma(temperature, config)) ** 2
        eps = math.exp(-self.calibration * ks2)
        if self.transverse is not None:
            eps *= self.transverse(temperature, config)
        return eps


def _anchor_config(anchor: dict) -> ExperimentConfig:
    wl = anchor["wavelength_nm"] * NM
    return ExperimentConfig(
        n_atoms=anchor["n_atoms"],
        delta_pa=anchor["delta_pa_MHz"] * MHZ,
        delta_pc=anchor["delta_pc_MHz"] * MHZ,
        g0=anchor["g0_MHz"] * MHZ,
        kappa=anchor["kappa_MHz"] * MHZ,
        nu=anchor["nu_kHz"] * KHZ,
        wavelength=wl,
        spacing=4.5 * wl,
        temperature=anchor["temperature_uK"] * UK,
    )


def load_calibration_anchor() -> tuple[ExperimentConfig, float]:
    """The shipped calibration fixture: a config and the Omega_c it must reproduce."""
    anchor = json.loads(resources.files("selforg").joinpath("data/calibration.json").read_text())
    return _anchor_config(anchor), anchor["omega_c_MHz"] * MHZ


def required_epsilon(config: ExperimentConfig, omega_c: float, temperature: Optional[float] = None) -> float:
    """Invert the critical-pump formula for the epsilon that yields ``omega_c``."""
    det = thermal_detuning(config, temperature)
    return _critical_numerator(config, det) / omega_c**2


def calibrated_epsilon() -> DebyeWallerEpsilon:
    """Debye-Waller model whose exponent is pinned by the calibration fixture."""
    cfg, omega_c = load_calibration_anchor()
    eps = required_epsilon(cfg, omega_c)
    ks2 = (cfg.k * thermal_sigma(cfg.temperature, cfg)) ** 2
    return DebyeWallerEpsilon(calibration=-math.log(eps) / ks2)


def epsilon_thermal(temperature: float, config: ExperimentConfig, model: Optional[Callable] = None) -> float:
    """Thermal reduction factor; defaults to the plain Debye-Waller model."""
    model = DebyeWallerEpsilon() if model is None else model
    return float(model(temperature, config))


def _critical_numerator(config: ExperimentConfig, det: float) -> float:
    k = config.k
    return (
        2.0 * M_RB87 * config.nu**2 * config.delta_pa**2 * (det**2 + config.kappa**2)
        / (config.n_atoms * config.g0**2 * k**2 * abs(det) * HBAR)
    )


def critical_pump(
    config: ExperimentConfig,
    epsilon_model: Optional[Callable] = None,
    temperature: Optional[float] = None,
    detuning: Optional[float] = None,
) -> float:
    """Critical pump Rabi frequency Omega_c(T).

    ``detuning`` overrides the thermal average Delta_pc(T) (useful for holding
    it fixed while varying Delta_pa). ``epsilon_model`` defaults to the
    calibrated Debye-Waller model.
    """
    temperature = config.temperature if temperature is None else temperature
    det = thermal_detuning(config, temperature) if detuning is None else detuning
    if det >= 0:
        raise UnstableConfigurationError(
            f"thermal pump-cavity detuning {det / MHZ:.3f} x 2pi MHz is not negative"
        )
    model = calibrated_epsilon() if epsilon_model is None else epsilon_model
    eps = model(temperature, config)
    return math.sqrt(_critical_numerator(config, det) / eps)


def dominant_mode_coordinate(state: AtomArrayState, spacing: float, wavelength: float) -> float:
    """Collective coordinate (1/N) sum s_n (z_n - spacing*n).

    s_n = (-1)^n for odd multiples of wavelength/2 and +1 for integer
    multiples of the wavelength.
    """
    half = spacing / (wavelength / 2.0)
    if abs(half - round(half)) > 1e-6:
        raise ValueError("spacing must be a multiple of wavelength/2")
    n = np.arange(state.n_atoms)
    s = stagger(n, round(half) % 2 == 1)
    return float(np.mean(s * (state.z - spacing * n)))


def potential_params(config: ExperimentConfig, epsilon_model: Optional[Callable] = None) -> PotentialParams:
    det = thermal_detuning(config)
    return PotentialParams(
        d_strength=float(cavity_potential_strength(config, det)),
        epsilon_t=epsilon_thermal(config.temperature, config, epsilon_model),
        sigma_th=thermal_sigma(config.temperature, config),
    )


def dominant_mode_potential(z_dom, config: ExperimentConfig, d_strength: float, bias: float = 0.0):
    """0.5 N M nu^2 (z - bias)^2 + hbar D N^2 sin^2(k z) for the collective coordinate."""
    z = np.asarray(z_dom, dtype=float)
    n = config.n_atoms
    return 0.5 * n * M_RB87 * config.nu**2 * (z - bias) ** 2 + HBAR * d_strength * n**2 * np.sin(config.k * z) ** 2


def critical_strength(config: ExperimentConfig, epsilon: float = 1.0) -> float:
    """Potential strength D at which the dominant-mode curvature vanishes."""
    return -M_RB87 * config.nu**2 / (2.0 * HBAR * config.n_atoms * config.k**2 * epsilon)
