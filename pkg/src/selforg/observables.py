"""Ensemble observables: g1 coherence, dwell statistics, susceptibility, scaling fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .config import ExperimentConfig
from .constants import K_B, M_RB87, US
from .criticality import CriticalPointEstimator, FitError, NoSignChangeError, fit_boltzmann
from .dynamics import EnsembleTrace, shot_seed, simulate_ensemble
from .model import (
    _critical_numerator,
    critical_strength,
    dominant_mode_potential,
    thermal_detuning,
    thermal_sigma,
)
from .signal_chain import moving_average

MIN_SHOTS_G1 = 20


class ObservableError(ValueError):
    pass


class ZeroVarianceError(ObservableError):
    pass


class InsufficientGridError(ObservableError):
    pass


class ReferenceZeroError(ObservableError):
    pass


# -- coherence -------------------------------------------------------------------


@dataclass
class CoherenceCurve:
    times: np.ndarray  # t2 - t1
    g1: np.ndarray
    n_shots: int
    window: Optional[float] = None
    flagged: bool = False  # some |g1| beyond 1 + 3/sqrt(shots)

    @property
    def noise_floor(self) -> float:
        return 3.0 / math.sqrt(self.n_shots)


def g1_matrix(shots) -> np.ndarray:
    """g1(t1, t2) = <c*(t1) c(t2)> / sqrt(<|c(t1)|^2><|c(t2)|^2>) over the shot axis."""
    c = np.asarray(shots)
    if c.ndim != 2:
        raise ObservableError("expected (shots, times)")
    if c.shape[0] < MIN_SHOTS_G1:
        raise ObservableError(f"g1 needs at least {MIN_SHOTS_G1} shots, got {c.shape[0]}")
    p = np.mean(np.abs(c) ** 2, axis=0)
    if np.any(p <= 0):
        raise ZeroVarianceError("a time slice has no fluctuation")
    cross = np.conj(c).T @ c / c.shape[0]
    g = cross / np.sqrt(np.outer(p, p))
    return g.real if not np.iscomplexobj(c) else g


def g1(shots, t1: int = 0, dt: float = 1.0, window: Optional[float] = None) -> CoherenceCurve:
    """g1(t1, t1 + tau) for tau >= 0 from an ensemble of traces sampled every ``dt``."""
    c = np.asarray(shots)
    if c.ndim != 2:
        raise ObservableError("expected (shots, times)")
    if c.shape[0] < MIN_SHOTS_G1:
        raise ObservableError(f"g1 needs at least {MIN_SHOTS_G1} shots, got {c.shape[0]}")
    if not 0 <= t1 < c.shape[1]:
        raise ObservableError("t1 outside the trace")
    ref = c[:, t1]
    rest = c[:, t1:]
    p1 = np.mean(np.abs(ref) ** 2)
    p2 = np.mean(np.abs(rest) ** 2, axis=0)
    if p1 <= 0 or np.any(p2 <= 0):
        raise ZeroVarianceError("a time slice has no fluctuation")
    val = np.mean(np.conj(ref)[:, None] * rest, axis=0) / np.sqrt(p1 * p2)
    if not np.iscomplexobj(c):
        val = val.real
    tau = np.arange(rest.shape[1]) * dt
    flagged = bool(np.any(np.abs(val) > 1.0 + 3.0 / math.sqrt(c.shape[0])))
    return CoherenceCurve(tau, val, c.shape[0], window, flagged)


def decay_time(curve: CoherenceCurve, level: float = math.exp(-1.0)) -> float:
    """First time after which |g1| stays below ``level``; inf if it never does."""
    above = np.nonzero(np.abs(curve.g1) >= level)[0]
    if above.size == 0:
        return 0.0
    last = above[-1]
    if last == curve.g1.size - 1:
        return math.inf
    return float(curve.times[last + 1])


def oscillation_frequency(curve: CoherenceCurve) -> float:
    """Frequency from zero crossings of Re g1, up to the first half-cycle whose peak is within the noise floor."""
    g = np.real(curve.g1)
    t = curve.times
    idx = [i for i in range(g.size - 1) if g[i] == 0 or g[i] * g[i + 1] < 0]
    crossings = []
    start = 0
    for i in idx:
        if np.max(np.abs(g[start:i + 1])) < curve.noise_floor:
            break
        crossings.append(t[i] + (t[i + 1] - t[i]) * g[i] / (g[i] - g[i + 1]))
        start = i + 1
    if len(crossings) < 2:
        return float("nan")
    return (len(crossings) - 1) / (2.0 * (crossings[-1] - crossings[0]))


def softened_frequency(nu: float, omega_ratio: float) -> float:
    """Dominant-mode oscillation frequency (Hz) below threshold: nu*sqrt(1 - r^2)/(2 pi)."""
    if omega_ratio >= 1:
        return 0.0
    return nu * math.sqrt(1.0 - omega_ratio**2) / (2.0 * math.pi)


# -- dwell statistics ---------------------------------------------------------------

CLASSES = ("symmetry-breaking", "switching", "rapid-oscillation")


@dataclass
class DwellStatistics:
    dwells: list  # (state, duration) pairs, state in {+1, -1}
    states: np.ndarray
    threshold: float
    band: float
    switches: int
    classification: str
    high_freq_fraction: float

    @property
    def mean_dwell(self) -> float:
        return float(np.mean([d for _, d in self.dwells]))


def dwell_threshold(samples) -> tuple[float, float]:
    """(threshold, band) = (0.5, 0.25) x the fitted bimodal peak, or x the rms if unimodal."""
    x = np.ravel(np.asarray(samples, dtype=float))
    try:
        f = fit_boltzmann(x)
        peaks = [abs(m) for m in f.maxima if m != 0]
        peak = max(peaks) if peaks else float(np.sqrt(np.mean(x * x)))
    except (FitError, ValueError):
        peak = float(np.sqrt(np.mean(x * x)))
    return 0.5 * peak, 0.25 * peak


def _assign_states(x: np.ndarray, threshold: float, band: float) -> np.ndarray:
    s = np.zeros(x.size, dtype=int)
    strong = np.nonzero(np.abs(x) > band)[0]
    if strong.size:
        state = 1 if x[strong[0]] > 0 else -1
    else:
        state = 1 if np.mean(x) >= 0 else -1
    for i, v in enumerate(x):
        if v >= threshold:
            state = 1
        elif v <= -threshold:
            state = -1
        s[i] = state
    return s


def dwell_statistics(trace, threshold: float, dt: float, band: Optional[float] = None,
                     min_dwell: Optional[float] = None, max_switches: Optional[int] = None,
                     rapid_fraction: float = 0.5) -> DwellStatistics:
    """Hysteresis state assignment of an averaged c_proj trace (one sample per ``dt``).

    The state flips to + at or above ``threshold`` and to - at or below
    ``-threshold``; the starting state comes from the first sample beyond
    ``band`` (default threshold/2). Rapid oscillation: more than
    ``rapid_fraction`` of the state signal's AC power above 1/(4 dt).
    """
    x = np.asarray(trace, dtype=float).ravel()
    if x.size == 0:
        raise ObservableError("empty trace")
    band = 0.5 * threshold if band is None else band
    min_dwell = dt if min_dwell is None else min_dwell
    s = _assign_states(x, threshold, band)
    edges = np.nonzero(np.diff(s))[0] + 1
    bounds = np.concatenate([[0], edges, [x.size]])
    dwells = [(int(s[a]), (b - a) * dt) for a, b in zip(bounds[:-1], bounds[1:])]
    switches = int(edges.size)

    spec = np.abs(np.fft.rfft(s - s.mean())) ** 2
    freqs = np.fft.rfftfreq(s.size, dt)
    total = spec[1:].sum()
    frac = float(spec[freqs > 1.0 / (4.0 * dt)].sum() / total) if total > 0 else 0.0

    if switches == 0:
        cls = "symmetry-breaking"
    elif frac > rapid_fraction:
        cls = "rapid-oscillation"
    elif max_switches is not None and switches > max_switches:
        cls = "rapid-oscillation"
    elif all(d >= min_dwell - 1e-12 for _, d in dwells[1:-1]):
        cls = "switching"
    else:
        cls = "rapid-oscillation"
    return DwellStatistics(dwells, s, threshold, band, switches, cls, frac)


def classify_ensemble(traces, dt: float, threshold: Optional[float] = None) -> list[DwellStatistics]:
    x = np.asarray(traces, dtype=float)
    thr, band = dwell_threshold(x) if threshold is None else (threshold, 0.5 * threshold)
    return [dwell_statistics(row, thr, dt, band) for row in x]


def mean_dwell_table(ensembles: Mapping[int, np.ndarray], dt: float, n_boot: int = 200,
                     rng=None) -> list[dict]:
    """Per-N mean dwell with a bootstrap-over-shots standard error."""
    rng = np.random.default_rng(rng)
    rows = []
    for n in sorted(ensembles):
        stats = classify_ensemble(ensembles[n], dt)
        per_shot = np.array([s.mean_dwell for s in stats])
        boot = [per_shot[rng.integers(0, per_shot.size, per_shot.size)].mean() for _ in range(n_boot)]
        rows.append({"n_atoms": n, "mean_dwell": float(per_shot.mean()), "stderr": float(np.std(boot, ddof=1)),
                     "switch_fraction": float(np.mean([s.switches > 0 for s in stats]))})
    return rows


def nominal_critical_points(omegas, traces: Sequence[np.ndarray], dt: float, averaging_times: Sequence[float],
                            window: Optional[tuple[float, float]] = None, random_state=0) -> dict:
    """Omega_c from Boltzmann fits of block-averaged c_proj at each averaging time.

    ``traces[i]`` is ``(shots, times)`` at pump ``omegas[i]``; ``window``
    trims the time axis to an analysis span given as index bounds.
    Returns {averaging_time: omega_c or nan}.
    """
    out = {}
    for tav in averaging_times:
        sets = []
        for tr in traces:
            x = np.asarray(tr)
            if window is not None:
                x = x[:, window[0]:window[1]]
            sets.append(moving_average(x, tav, dt).ravel())
        try:
            est = CriticalPointEstimator(random_state=random_state).fit(omegas, sets)
            out[tav] = est.omega_c_
        except NoSignChangeError:
            out[tav] = float("nan")
    return out


# -- susceptibility --------------------------------------------------------------


@dataclass
class SusceptibilityResult:
    chi: float
    chi_err: float
    slope: float
    intercept: float
    c_an: float
    c_an_err: float
    delta_z: np.ndarray
    means: np.ndarray  # c_proj mean / c_an per grid point
    errors: np.ndarray
    wavelength: float
    omega_ratio: Optional[float] = None
    n_atoms: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "chi": self.chi, "chi_err": self.chi_err, "slope": self.slope, "intercept": self.intercept,
            "c_an": self.c_an, "c_an_err": self.c_an_err, "omega_ratio": self.omega_ratio, "n_atoms": self.n_atoms,
        }


def _shot_means(x) -> tuple[float, float]:
    a = np.asarray(x, dtype=float)
    per_shot = a.mean(axis=1) if a.ndim == 2 else a
    err = per_shot.std(ddof=1) / math.sqrt(per_shot.size) if per_shot.size > 1 else 0.0
    return float(per_shot.mean()), float(err)


def susceptibility(delta_z, ensembles: Sequence, reference, wavelength: float, *, reference_scale: float = 1.0,
                   max_abs: float = 0.01, omega_ratio: Optional[float] = None,
                   n_atoms: Optional[int] = None) -> SusceptibilityResult:
    """chi = (1/k) d(c_proj / c_an)/d(delta z) from a straight-line fit on |delta z| <= max_abs*lambda.

    ``ensembles[i]`` holds c_proj samples (shots x times, already restricted
    to the analysis window) at bias ``delta_z[i]``; ``reference`` is the
    antinode ensemble, multiplied by ``reference_scale`` before use.
    """
    dz = np.asarray(delta_z, dtype=float)
    if dz.size != len(ensembles):
        raise ObservableError("need one ensemble per delta_z")
    c_an, c_an_err = _shot_means(reference)
    c_an, c_an_err = c_an * reference_scale, c_an_err * abs(reference_scale)
    if not c_an > 2.0 * c_an_err or c_an <= 0:
        raise ReferenceZeroError(f"antinode reference {c_an:.3g} +- {c_an_err:.3g} is consistent with zero")
    stats = [_shot_means(e) for e in ensembles]
    means = np.array([m for m, _ in stats]) / c_an
    errs = np.array([e for _, e in stats]) / c_an
    inner = np.abs(dz) <= max_abs * wavelength * (1 + 1e-9)
    if inner.sum() < 3 or not (np.any(dz[inner] > 0) and np.any(dz[inner] < 0)):
        raise InsufficientGridError("need at least three inner points on both sides of zero")
    x, y = dz[inner], means[inner]
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    # propagate the per-point standard errors through the unweighted fit
    pinv = np.linalg.pinv(A)
    slope_err = float(np.sqrt(np.sum((pinv[0] * errs[inner]) ** 2)))
    k = 2.0 * math.pi / wavelength
    rel = c_an_err / c_an
    chi = float(coef[0] / k)
    chi_err = float(math.hypot(slope_err / k, chi * rel))
    return SusceptibilityResult(chi, chi_err, float(coef[0]), float(coef[1]), c_an, c_an_err, dz, means, errs,
                                wavelength, omega_ratio, n_atoms)


DEFAULT_DZ = (-0.01, -0.005, 0.0, 0.005, 0.01)


def reference_config(config: ExperimentConfig, rabi: float) -> ExperimentConfig:
    """Antinode reference: array shifted by lambda/4, detuning compensated to the node's thermal value."""
    lam = config.wavelength
    ref = config.replace(tweezer_bias=lam / 4.0, rabi_peak=rabi)
    shift = thermal_detuning(config.replace(tweezer_bias=0.0)) - thermal_detuning(ref)
    return ref.replace(delta_pc=config.delta_pc + shift)


def simulate_susceptibility(config: ExperimentConfig, omega_c: float, shots: int = 100, seed: int = 0,
                            delta_z=DEFAULT_DZ, window: float = 50.0 * US, reference_ratio: float = 0.5,
                            omega_ratio: Optional[float] = None) -> SusceptibilityResult:
    """Run the bias grid (in units of lambda) plus the antinode reference and compute chi.

    The reference is pumped at ``min(Omega, reference_ratio*Omega_c)`` and
    rescaled linearly to Omega, so it stays below threshold.
    """
    lam = config.wavelength
    dz = np.asarray(delta_z, dtype=float) * lam
    seeds = [shot_seed(seed, i) for i in range(shots)]
    ens = []
    for d in dz:
        tr = simulate_ensemble(config.replace(tweezer_bias=float(d)), seeds)
        ens.append(tr.c_proj[:, tr.hold_mask(0.0, window)])
    r_ref = min(config.rabi_peak, reference_ratio * omega_c)
    ref_cfg = reference_config(config, r_ref)
    tr = simulate_ensemble(ref_cfg, [shot_seed(seed + 1, i) for i in range(shots)])
    ref = tr.c_proj[:, tr.hold_mask(0.0, window)]
    ratio = config.rabi_peak / omega_c if omega_ratio is None else omega_ratio
    return susceptibility(dz, ens, ref, lam, reference_scale=config.rabi_peak / r_ref, omega_ratio=ratio,
                          n_atoms=config.n_atoms)


def saturation_chi(config: ExperimentConfig, temperature: Optional[float] = None) -> float:
    """Large-pump limit N M nu^2 lambda^2 / (16 k_B T)."""
    t = config.temperature if temperature is None else temperature
    return config.n_atoms * M_RB87 * config.nu**2 * config.wavelength**2 / (16.0 * K_B * t)


def dominant_mode_chi(config: ExperimentConfig, omega_ratio: float, temperature: Optional[float] = None) -> float:
    """Thermal model: chi = N M nu^2 <dz_dom^2> / (k_B T) in the dominant-mode Boltzmann distribution.

    The cavity strength is ``omega_ratio**2`` times the value that flattens
    the dominant-mode curvature, so the model's own threshold sits at 1.
    """
    t = config.temperature if temperature is None else temperature
    n = config.n_atoms
    d = omega_ratio**2 * critical_strength(config, 1.0)
    kt = K_B * t
    # the saturated double well sits at +-lambda/4; farther wells are lifted by the trap
    half = config.wavelength
    z = np.linspace(-half, half, 80001)
    v = dominant_mode_potential(z, config, d)
    w = np.exp(-(v - v.min()) / kt)
    norm = integrate.trapezoid(w, z)
    mean = integrate.trapezoid(z * w, z) / norm
    var = integrate.trapezoid((z - mean) ** 2 * w, z) / norm
    return n * M_RB87 * config.nu**2 * var / kt


def equilibrium_chi(config: ExperimentConfig, chains: int = 2000, sweeps: int = 2000, burn: int = 400,
                    rng=None, temperature: Optional[float] = None) -> tuple[float, float]:
    """Full N-atom Metropolis estimate of N M nu^2 <dz_dom^2> / (k_B T).

    Samples exp(-H/k_B T) for all N cavity-axis coordinates, with H the trap
    energy plus hbar D (sum_n sin k z_n)^2 at the frozen thermal detuning and
    pump ``config.rabi_peak``. Unlike :func:`dominant_mode_chi`, the other
    N - 1 modes are kept. Returns (chi, bootstrap-over-chains stderr).
    """
    from .constants import HBAR
    from .model import cavity_potential_strength, tweezer_centers

    rng = np.random.default_rng(rng)
    t = config.temperature if temperature is None else temperature
    kt = K_B * t
    n = config.n_atoms
    k = config.k
    d = float(cavity_potential_strength(config, thermal_detuning(config), config.rabi_peak))
    centers = tweezer_centers(config, 0.0)
    sgn = np.where(np.arange(n) % 2 == 0, 1.0, -1.0) if config.staggered else np.ones(n)
    sig = thermal_sigma(t, config)
    z = centers + sig * rng.standard_normal((chains, n))
    s = np.sin(k * z).sum(axis=1)
    trap = 0.5 * M_RB87 * config.nu**2
    step = 0.8 * sig
    acc_sum = np.zeros(chains)
    acc_sq = np.zeros(chains)
    count = 0
    for sweep in range(sweeps):
        for i in range(n):
            old = z[:, i]
            new = old + step * rng.standard_normal(chains)
            s_new = s + np.sin(k * new) - np.sin(k * old)
            de = trap * ((new - centers[i]) ** 2 - (old - centers[i]) ** 2) + HBAR * d * (s_new**2 - s**2)
            ok = np.log(rng.random(chains)) < -de / kt
            z[ok, i] = new[ok]
            s = np.where(ok, s_new, s)
        if sweep >= burn:
            zd = ((z - centers) * sgn).mean(axis=1)
            acc_sum += zd
            acc_sq += zd * zd
            count += 1
    m1, m2 = acc_sum / count, acc_sq / count

    def chi_of(idx):
        mean = m1[idx].mean()
        return n * M_RB87 * config.nu**2 * (m2[idx].mean() - mean**2) / kt

    chi = float(chi_of(np.arange(chains)))
    boot = [chi_of(rng.integers(0, chains, chains)) for _ in range(100)]
    return chi, float(np.std(boot, ddof=1))


# -- scaling fits ------------------------------------------------------------------


@dataclass
class ScalingFit:
    kind: str  # "power" or "linear"
    slope: float
    slope_err: float
    intercept: float
    intercept_err: float
    r_squared: float
    temperature: Optional[float] = None
    temperature_err: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _linfit(x, y, sigma=None):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 4:
        raise ObservableError("scaling fits need at least 4 points")
    w = None if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    (a, b), cov = np.polyfit(x, y, 1, w=w, cov="unscaled" if sigma is not None else True)
    resid = y - (a * x + b)
    r2 = 1.0 - np.sum(resid**2) / np.sum((y - y.mean()) ** 2) if np.ptp(y) > 0 else 1.0
    return a, b, math.sqrt(max(cov[0, 0], 0.0)), math.sqrt(max(cov[1, 1], 0.0)), float(r2)


def power_law_fit(n_atoms, omega_c, sigma=None) -> ScalingFit:
    """log Omega_c = slope * log N + intercept."""
    x = np.log(np.asarray(n_atoms, dtype=float))
    y = np.log(np.asarray(omega_c, dtype=float))
    s = None if sigma is None else np.asarray(sigma, dtype=float) / np.asarray(omega_c, dtype=float)
    a, b, sa, sb, r2 = _linfit(x, y, s)
    return ScalingFit("power", a, sa, b, sb, r2)


def linear_fit(abs_delta_pa, omega_c, sigma=None, config: Optional[ExperimentConfig] = None,
               detuning: Optional[float] = None, epsilon_model: Optional[Callable] = None) -> ScalingFit:
    """Omega_c = slope * |Delta_pa| + intercept.

    With ``config`` given, the slope of a zero-intercept fit is inverted
    through the critical-pump formula for an effective temperature (the
    thermal detuning is held at ``detuning``, default the config's value).
    """
    a, b, sa, sb, r2 = _linfit(abs_delta_pa, omega_c, sigma)
    fit = ScalingFit("linear", a, sa, b, sb, r2)
    if config is not None:
        x = np.asarray(abs_delta_pa, dtype=float)
        y = np.asarray(omega_c, dtype=float)
        w = None if sigma is None else 1.0 / np.asarray(sigma, dtype=float) ** 2
        w = np.ones_like(x) if w is None else w
        s0 = float(np.sum(w * x * y) / np.sum(w * x * x))
        s0_err = float(math.sqrt(1.0 / np.sum(w * x * x))) if sigma is not None else sa
        t, t_err = effective_temperature(config, s0, s0_err, detuning, epsilon_model)
        fit.temperature, fit.temperature_err = t, t_err
    return fit


def effective_temperature(config: ExperimentConfig, slope: float, slope_err: float = 0.0,
                          detuning: Optional[float] = None, epsilon_model: Optional[Callable] = None):
    """Temperature at which d Omega_c / d|Delta_pa| equals ``slope``."""
    from .model import calibrated_epsilon

    model = calibrated_epsilon() if epsilon_model is None else epsilon_model
    det = thermal_detuning(config) if detuning is None else detuning

    def slope_at(t):
        cfg = config.replace(delta_pa=-1.0)
        return math.sqrt(_critical_numerator(cfg, det) / model(t, cfg))

    def solve(target):
        lo, hi = 1e-9, 1e-2
        if not (slope_at(lo) - target) * (slope_at(hi) - target) < 0:
            return float("nan")
        return optimize.brentq(lambda t: slope_at(t) - target, lo, hi, xtol=1e-15)

    t = solve(slope)
    if slope_err > 0:
        up, down = solve(slope + slope_err), solve(slope - slope_err)
        err = 0.5 * abs(up - down)
    else:
        err = 0.0
    return t, err
