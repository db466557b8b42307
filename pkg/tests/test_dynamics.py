import math

import numpy as np
import pytest

from selforg.config import ExperimentConfig
from selforg.constants import K_B, M_RB87, MHZ, US
from selforg.dynamics import (
    HeatingModel, RampSchedule, TimestepTooLargeError, force, potential_energy, recoil_heating_rate, shot_seed,
    simulate_ensemble, simulate_shot, step, thermal_initialize, total_energy,
)
from selforg.model import AtomArrayState, DebyeWallerEpsilon, critical_pump, tweezer_centers


def quiet(**kw) -> ExperimentConfig:
    base = dict(n_atoms=8, heating=False, detuning_mode="frozen", ramp_time=0.0, record_time=40 * US)
    base.update(kw)
    return ExperimentConfig(**base)


def test_ramp_schedule():
    s = RampSchedule(50 * US, 200 * US, 30 * MHZ)
    assert s.rabi(0.0) == 0.0
    assert s.rabi(25 * US) == pytest.approx(15 * MHZ)
    assert s.rabi(120 * US) == 30 * MHZ
    assert s.duration == pytest.approx(250 * US)


def test_thermal_initialize_zero_temperature_sits_on_centres():
    cfg = ExperimentConfig(n_atoms=5, temperature=0.0, tweezer_bias=30e-9)
    s = thermal_initialize(cfg, np.random.default_rng(0))
    assert np.array_equal(s.positions, tweezer_centers(cfg))
    assert not s.momenta.any()


@pytest.mark.parametrize("dims", [1, 3])
def test_equipartition(dims):
    cfg = ExperimentConfig(n_atoms=20, dims=dims)
    rng = np.random.default_rng(4)
    states = [thermal_initialize(cfg, rng) for _ in range(3000)]
    p = np.array([s.momenta for s in states])
    u = np.array([s.positions - s.tweezer_centers for s in states])
    kt = K_B * cfg.temperature
    kin = np.mean(p**2, axis=(0, 1)) / M_RB87
    assert np.allclose(kin / kt, 1.0, atol=0.02)
    nus = np.array([cfg.nu] if dims == 1 else [cfg.transverse_nus[0], cfg.transverse_nus[1], cfg.nu])
    pot = M_RB87 * nus**2 * np.mean(u**2, axis=(0, 1))
    assert np.allclose(pot / kt, 1.0, atol=0.02)


@pytest.mark.parametrize("dims", [1, 3])
def test_force_is_gradient_of_potential(dims):
    cfg = quiet(dims=dims, tweezer_bias=40e-9)
    rabi = 1.4 * critical_pump(cfg, DebyeWallerEpsilon())
    s = thermal_initialize(cfg, np.random.default_rng(1))
    f = force(s, cfg, rabi)
    h = 1e-13
    num = np.zeros_like(s.positions)
    for idx in np.ndindex(s.positions.shape):
        up, dn = s.positions.copy(), s.positions.copy()
        up[idx] += h
        dn[idx] -= h
        e_up = potential_energy(AtomArrayState(up, s.momenta, s.tweezer_centers), cfg, rabi)
        e_dn = potential_energy(AtomArrayState(dn, s.momenta, s.tweezer_centers), cfg, rabi)
        num[idx] = -(e_up - e_dn) / (2 * h)
    assert np.max(np.abs(f - num)) < 1e-6 * np.max(np.abs(f))


def _energy_error(dt: float, periods: float = 20.0):
    cfg = quiet(record_time=periods * 2 * math.pi / ExperimentConfig().nu, dt=dt)
    rabi = 1.3 * critical_pump(cfg, DebyeWallerEpsilon())
    cfg = cfg.replace(rabi_peak=rabi)
    tr = simulate_shot(cfg, rng_seed=2)
    e = np.array([total_energy(s, cfg, rabi) for s in tr.states])
    rel = e / e[0] - 1
    return np.polyfit(tr.times / (2 * math.pi / cfg.nu), rel, 1)[0], np.max(np.abs(rel))


def test_energy_conserved_without_heating():
    slope, wobble = _energy_error(20e-9)
    assert abs(slope) < 1e-6  # secular drift per trap period
    assert wobble < 5e-4
    # the bounded part is the second-order integrator error
    _, finer = _energy_error(10e-9)
    assert 2.5 < wobble / finer < 6


def test_deterministic_and_batch_independent():
    cfg = ExperimentConfig(n_atoms=6, record_time=80 * US)
    seeds = [shot_seed(9, i) for i in range(3)]
    a = simulate_ensemble(cfg, seeds)
    b = simulate_ensemble(cfg, seeds)
    assert np.array_equal(a.c_proj, b.c_proj)
    alone = simulate_ensemble(cfg, [seeds[1]])
    assert np.array_equal(alone.c_proj[0], a.c_proj[1])


def test_mirror_symmetry_of_trajectories():
    cfg = quiet(rabi_peak=0.0)
    cfg = cfg.replace(rabi_peak=1.5 * critical_pump(cfg, DebyeWallerEpsilon()))
    s = thermal_initialize(cfg, np.random.default_rng(7))
    c = s.tweezer_centers
    m = AtomArrayState(2 * c - s.positions, -s.momenta, c)
    tr = simulate_ensemble(cfg, [0, 0], initial_states=[s, m], record_positions=True)
    assert np.max(np.abs(tr.c_proj[0] + tr.c_proj[1])) < 1e-9 * np.max(np.abs(tr.c_proj))
    du = (tr.positions[0] - c) + (tr.positions[1] - c)
    assert np.max(np.abs(du)) < 1e-9 * np.max(np.abs(tr.positions[0] - c))


def test_recoil_heating_matches_rate():
    cfg = quiet(n_atoms=10, heating=True, temperature=10e-6, record_time=100 * US)
    rabi = 0.3 * critical_pump(cfg, DebyeWallerEpsilon())
    cfg = cfg.replace(rabi_peak=rabi)
    tr = simulate_ensemble(cfg, [shot_seed(3, i) for i in range(200)], record_positions=True)
    energies = np.array([[total_energy(s, cfg, rabi) for s in tr.shot(i).states[::50]] for i in range(200)])
    t = tr.times[::50]
    slope = np.polyfit(t, energies.mean(axis=0), 1)[0] / (cfg.n_atoms * K_B)
    assert slope == pytest.approx(recoil_heating_rate(rabi, cfg), rel=0.1)


def test_friction_relaxes_to_bath():
    cfg = quiet(n_atoms=10, rabi_peak=0.0, friction=2e5, temperature=20e-6, record_time=60 * US)
    rest = AtomArrayState(tweezer_centers(cfg), np.zeros(10), tweezer_centers(cfg))
    tr = simulate_ensemble(cfg, [shot_seed(5, i) for i in range(300)], initial_states=[rest] * 300)
    assert tr.kinetic_temperature[0] == 0.0
    assert tr.kinetic_temperature[-50:].mean() == pytest.approx(20e-6, rel=0.05)


def test_heating_model_axis_share():
    cfg1, cfg3 = ExperimentConfig(), ExperimentConfig(dims=3)
    h = HeatingModel()
    assert h.kick_variance(1e8, 1e-6, cfg3) == pytest.approx(h.kick_variance(1e8, 1e-6, cfg1) / 3)
    assert HeatingModel(enabled=False).kick_variance(1e8, 1e-6, cfg1) == 0


def test_timestep_guard():
    cfg = ExperimentConfig()
    s = thermal_initialize(cfg, np.random.default_rng(0))
    with pytest.raises(TimestepTooLargeError):
        step(s, cfg, 1 * US, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        step(s, cfg, 20e-9, 0.0, None)


def test_relaxation_field_follows_adiabatic():
    cfg = quiet(n_atoms=10, record_time=30 * US)
    cfg = cfg.replace(rabi_peak=1.2 * critical_pump(cfg, DebyeWallerEpsilon()))
    s = thermal_initialize(cfg, np.random.default_rng(2))
    a = simulate_ensemble(cfg, [0], initial_states=[s])
    b = simulate_ensemble(cfg.replace(field_mode="relaxation", dt=5e-9), [0], initial_states=[s])
    # compare after the field has settled (1/kappa ~ 0.3 us) and before the trajectories decorrelate
    early = (a.times > 1.5 * US) & (a.times < 4 * US)
    scale = np.max(np.abs(a.c_proj[0, early]))
    assert np.max(np.abs(a.c_proj[0, early] - b.c_proj[0, early])) < 0.1 * scale
