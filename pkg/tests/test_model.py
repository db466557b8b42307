import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from selforg.config import ExperimentConfig
from selforg.constants import HBAR, K_B, M_RB87, MHZ, UK
from selforg.model import (
    AtomArrayState, DebyeWallerEpsilon, UnstableConfigurationError, adiabatic_field, c_proj_formula,
    calibrated_epsilon, cavity_potential_strength, critical_pump, critical_strength, dominant_mode_coordinate,
    dominant_mode_potential, load_calibration_anchor, order_parameter, project, projection_angle, snapshot,
    thermal_detuning, thermal_sigma, tweezer_centers,
)


def oracle_critical_pump(cfg: ExperimentConfig, eps: float, temperature: float) -> float:
    """Independent high-precision evaluation with sympy rationals/floats at 40 digits."""
    P = 40
    M = sp.Float(M_RB87, P)
    hb = sp.Float(HBAR, P)
    kb = sp.Float(K_B, P)
    nu = sp.Float(cfg.nu, P)
    k = 2 * sp.pi / sp.Float(cfg.wavelength, P)
    sig2 = kb * sp.Float(temperature, P) / (M * nu**2)
    g0 = sp.Float(cfg.g0, P)
    dpa = sp.Float(cfg.delta_pa, P)
    shift = 0
    for n in range(cfg.n_atoms):
        z0 = sp.Float(cfg.spacing, P) * n
        shift += (1 - sp.cos(2 * k * z0) * sp.exp(-2 * k**2 * sig2)) / 2
    det = sp.Float(cfg.delta_pc, P) - g0**2 / dpa * shift
    kap = sp.Float(cfg.kappa, P)
    om2 = 2 * M * nu**2 * dpa**2 * (det**2 + kap**2) / (cfg.n_atoms * g0**2 * k**2 * abs(det) * hb * eps)
    return float(sp.sqrt(om2).evalf(P))


def test_order_parameter_antinodes_and_nodes():
    cfg = ExperimentConfig(n_atoms=4)
    lam = cfg.wavelength
    nodes = AtomArrayState(tweezer_centers(cfg), np.zeros(4), tweezer_centers(cfg))
    assert abs(order_parameter(nodes, lam)) < 1e-12
    anti = AtomArrayState(tweezer_centers(cfg) + lam / 4, np.zeros(4), tweezer_centers(cfg))
    # staggered spacing 4.5 lambda: alternating antinodes
    assert order_parameter(anti, lam) == pytest.approx(0.0, abs=1e-12)
    biased = ExperimentConfig(n_atoms=4, tweezer_bias=lam / 4)
    c = tweezer_centers(biased)
    assert order_parameter(AtomArrayState(c, np.zeros(4), c), lam) == pytest.approx(1.0)


def test_critical_pump_matches_high_precision_oracle():
    cfg = ExperimentConfig()
    got = critical_pump(cfg, DebyeWallerEpsilon(), temperature=0.0)
    assert got == pytest.approx(oracle_critical_pump(cfg, 1.0, 0.0), rel=1e-12)
    eps = DebyeWallerEpsilon()(cfg.temperature, cfg)
    got = critical_pump(cfg, DebyeWallerEpsilon())
    assert got == pytest.approx(oracle_critical_pump(cfg, eps, cfg.temperature), rel=1e-12)


def test_critical_pump_frozen_values():
    # oracle values (sympy, 40 digits) frozen at default settings, epsilon = 1
    cfg = ExperimentConfig()
    assert critical_pump(cfg, lambda t, c: 1.0) / MHZ == pytest.approx(15.913793973062162, rel=1e-12)
    assert critical_pump(cfg.replace(n_atoms=10), lambda t, c: 1.0) / MHZ == pytest.approx(23.76974471749936, rel=1e-12)


def test_critical_pump_rejects_blue_detuning():
    with pytest.raises(UnstableConfigurationError):
        critical_pump(ExperimentConfig(delta_pc=+1.0 * MHZ))


def test_calibrated_epsilon_anchor():
    cfg, omega = load_calibration_anchor()
    model = calibrated_epsilon()
    assert critical_pump(cfg, model) == pytest.approx(omega, rel=1e-12)
    assert model(0.0, cfg) == 1.0
    assert model(cfg.temperature, cfg) == pytest.approx(0.3609, abs=5e-4)
    assert model.calibration == pytest.approx(1.6028, abs=5e-4)


def test_debye_waller_monotone_and_bounded():
    cfg = ExperimentConfig()
    model = DebyeWallerEpsilon()
    temps = np.linspace(0, 100e-6, 21)
    vals = [model(t, cfg) for t in temps]
    assert vals[0] == 1.0
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 0
    with pytest.raises(ValueError):
        model(-1e-6, cfg)


def test_thermal_detuning_closed_form():
    cfg = ExperimentConfig(tweezer_bias=780e-9 / 8)
    sig = thermal_sigma(cfg.temperature, cfg)
    k = cfg.k
    z0 = tweezer_centers(cfg)
    mc = np.random.default_rng(0).normal(z0, sig, size=(400000, cfg.n_atoms))
    s2 = np.mean(np.sin(k * mc) ** 2, axis=0).sum()
    expect = cfg.delta_pc - cfg.g0**2 / cfg.delta_pa * s2
    assert thermal_detuning(cfg) == pytest.approx(expect, rel=2e-4)


def test_projection_angle_quadrants():
    kappa = 1.0
    assert projection_angle(-1e9, kappa) == pytest.approx(0.0, abs=1e-8)
    assert projection_angle(0.0, kappa) == pytest.approx(math.pi / 2)
    assert projection_angle(-kappa, kappa) == pytest.approx(math.pi / 4)


def test_projected_field_matches_closed_form():
    cfg = ExperimentConfig(n_atoms=6, tweezer_bias=50e-9)
    rng = np.random.default_rng(3)
    c = tweezer_centers(cfg)
    st_ = AtomArrayState(c + 30e-9 * rng.standard_normal(6), np.zeros(6), c)
    snap = snapshot(st_, cfg, 20 * MHZ)
    assert snap.c_proj == pytest.approx(float(c_proj_formula(snap.theta, snap.eff_detuning, 20 * MHZ, cfg)),
                                        rel=1e-12)
    assert abs(snap.field) == pytest.approx(abs(snap.c_proj), rel=1e-12)
    assert snap.c_proj * snap.theta > 0  # red pump: positive Theta -> positive quadrature
    assert project(adiabatic_field(st_, cfg, 20 * MHZ), snap.proj_angle) == pytest.approx(snap.c_proj)


def test_critical_strength_makes_curvature_vanish():
    cfg = ExperimentConfig()
    d = critical_strength(cfg)
    z = sp.Symbol("z")
    n, k = cfg.n_atoms, cfg.k
    pot = sp.Rational(1, 2) * n * M_RB87 * cfg.nu**2 * z**2 + HBAR * d * n**2 * sp.sin(k * z) ** 2
    curv = float(sp.diff(pot, z, 2).subs(z, 0))
    assert abs(curv) < 1e-12 * n * M_RB87 * cfg.nu**2
    zs = np.linspace(-1e-7, 1e-7, 5)
    num = [float(pot.subs(z, v)) for v in zs]
    assert np.allclose(dominant_mode_potential(zs, cfg, d), num, rtol=1e-12, atol=0)
    # and the D at the critical pump (epsilon = 1, T = 0) is that strength
    om = critical_pump(cfg, DebyeWallerEpsilon(), temperature=0.0)
    det = thermal_detuning(cfg, 0.0)
    assert float(cavity_potential_strength(cfg, det, om)) == pytest.approx(d, rel=1e-12)


def test_dominant_mode_coordinate_sign_pattern():
    cfg = ExperimentConfig(n_atoms=4)
    c = tweezer_centers(cfg)
    shift = 10e-9 * np.array([1, -1, 1, -1])
    s = AtomArrayState(c + shift, np.zeros(4), c)
    assert dominant_mode_coordinate(s, cfg.spacing, cfg.wavelength) == pytest.approx(10e-9)


@settings(max_examples=60, deadline=None)
@given(
    u=st.lists(st.floats(-200e-9, 200e-9), min_size=3, max_size=12),
    rabi=st.floats(0.0, 60.0),
)
def test_mirror_flips_order_parameter_and_field(u, rabi):
    n = len(u)
    cfg = ExperimentConfig(n_atoms=n)
    c = tweezer_centers(cfg)
    u = np.asarray(u)
    a = snapshot(AtomArrayState(c + u, np.zeros(n), c), cfg, rabi * MHZ)
    b = snapshot(AtomArrayState(c - u, np.zeros(n), c), cfg, rabi * MHZ)
    assert b.theta == pytest.approx(-a.theta, abs=1e-12)
    assert b.eff_detuning == pytest.approx(a.eff_detuning, rel=1e-12)
    assert b.c_proj == pytest.approx(-a.c_proj, abs=1e-9 * (1 + abs(a.c_proj)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), t=st.floats(0.0, 80.0))
def test_critical_pump_scales_inverse_sqrt_n_with_unit_epsilon(n, t):
    # holding the thermal detuning fixed isolates the 1/sqrt(N) prefactor
    cfg = ExperimentConfig(n_atoms=n, temperature=t * UK)
    det = thermal_detuning(cfg)
    one = lambda temp, c: 1.0
    a = critical_pump(cfg, one, detuning=det)
    b = critical_pump(cfg.replace(n_atoms=4 * n), one, detuning=det)
    assert a / b == pytest.approx(2.0, rel=1e-12)
