"""Landau/Boltzmann fits of c_proj distributions and critical-point interpolation.

The density model is p(x) ~ exp(-B x^2 - D x^4) with D > 0. ``B`` changes sign
at the transition; the critical pump strength is the zero of the line through
the two sampled points that bracket B = 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_samples


class FitError(RuntimeError):
    """The Boltzmann fit did not converge or the data are degenerate."""


class InsufficientSamplesError(ValueError):
    pass


class NoSignChangeError(ValueError):
    pass


MIN_SAMPLES = 50
_GRID_POINTS = 4001


def _grid(half_width: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.linspace(-half_width, half_width, _GRID_POINTS)
    w = np.full(x.shape, x[1] - x[0])
    w[0] = w[-1] = 0.5 * (x[1] - x[0])
    return x, np.log(w)


def _log_z(b: float, d: float, x: np.ndarray, logw: np.ndarray) -> tuple[float, np.ndarray]:
    logp = -b * x**2 - d * x**4 + logw
    lz = logsumexp(logp)
    return lz, np.exp(logp - lz)


class BoltzmannFit(BaseEstimator):
    """Maximum-likelihood fit of exp(-B x^2 - D x^4) to one-dimensional samples.

    Samples are rescaled by their rms about zero before fitting, and the
    normalisation is a quadrature over +-``domain_sigmas`` rms (widened to
    cover every sample). Fitted attributes: ``b_coeff_``, ``d_coeff_``,
    ``log_norm_`` (log of the normalising integral in sample units),
    ``nll_`` (mean negative log-likelihood) and ``residual_`` (reduced
    chi-square of a histogram against the fitted density).
    """

    def __init__(self, domain_sigmas: float = 6.0, tol: float = 1e-8, max_iter: int = 500, hist_bins: int = 30):
        self.domain_sigmas = domain_sigmas
        self.tol = tol
        self.max_iter = max_iter
        self.hist_bins = hist_bins

    def fit(self, X, y=None, sample_weight=None):
        x = as_samples(X)
        if sample_weight is None and x.size < MIN_SAMPLES:
            raise InsufficientSamplesError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
        if sample_weight is None:
            w = np.full(x.size, 1.0 / x.size)
        else:
            w = np.asarray(sample_weight, dtype=float).ravel()
            if w.shape != x.shape or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("sample_weight must be non-negative and match X")
            w = w / w.sum()
        scale = math.sqrt(float(np.sum(w * x**2)))
        if not scale > 0:
            raise FitError("all samples are zero")
        u = x / scale
        m2 = float(np.sum(w * u**2))
        m4 = float(np.sum(w * u**4))
        if m4 - m2**2 < 1e-10:
            raise FitError("degenerate sample: |x| takes a single value")
        half = max(self.domain_sigmas, 1.05 * float(np.max(np.abs(u))))
        grid, logw = _grid(half)

        def nll(params):
            b, eta = params
            d = math.exp(eta)
            lz, p = _log_z(b, d, grid, logw)
            e2 = float(p @ grid**2)
            e4 = float(p @ grid**4)
            val = b * m2 + d * m4 + lz
            return val, np.array([m2 - e2, d * (m4 - e4)])

        best = None
        for b0, eta0 in ((0.5, math.log(0.05)), (-1.0, math.log(0.5)), (0.0, 0.0)):
            res = optimize.minimize(
                nll, x0=[b0, eta0], jac=True, method="L-BFGS-B",
                bounds=[(-1e3, 1e3), (-30.0, 12.0)],
                options={"maxiter": self.max_iter, "ftol": 1e-15, "gtol": 1e-11},
            )
            if best is None or res.fun < best.fun:
                best = res
        b, eta = best.x
        b, eta, val = self._newton_polish(b, eta, m2, m4, grid, logw)
        if not np.isfinite(val) or abs(b) >= 1e3 - 1e-6 or eta >= 12.0 - 1e-9:
            raise FitError("Boltzmann fit did not converge")
        # gradient check on the log-likelihood
        d = math.exp(eta)
        lz, p = _log_z(b, d, grid, logw)
        g = np.array([m2 - p @ grid**2, d * (m4 - p @ grid**4)])
        if eta > -29.0 and np.max(np.abs(g)) > math.sqrt(self.tol):
            raise FitError(f"Boltzmann fit did not converge (gradient {np.max(np.abs(g)):.2e})")

        self.scale_ = scale
        self.b_coeff_ = b / scale**2
        self.d_coeff_ = d / scale**4
        self.log_norm_ = lz + math.log(scale)
        self.nll_ = val + math.log(scale)
        self.n_samples_ = int(x.size)
        self.residual_ = self._hist_residual(x, w) if sample_weight is None else float("nan")
        return self

    def _newton_polish(self, b, eta, m2, m4, grid, logw, steps: int = 20):
        """Newton iterations in the natural (B, D) parameters, where the problem is convex."""
        d = math.exp(eta)
        val_prev = None
        for _ in range(steps):
            lz, p = _log_z(b, d, grid, logw)
            val = b * m2 + d * m4 + lz
            g2, g4 = grid**2, grid**4
            e2, e4 = p @ g2, p @ g4
            grad = np.array([m2 - e2, m4 - e4])
            c22 = p @ (g2 * g2) - e2 * e2
            c24 = p @ (g2 * g4) - e2 * e4
            c44 = p @ (g4 * g4) - e4 * e4
            hess = np.array([[c22, c24], [c24, c44]])
            try:
                delta = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                break
            # keep D positive and the step a descent step
            t = 1.0
            while t > 1e-6:
                nb, nd = b + t * delta[0], d + t * delta[1]
                if nd > 0:
                    nval = nb * m2 + nd * m4 + _log_z(nb, nd, grid, logw)[0]
                    if nval <= val + 1e-15:
                        break
                t *= 0.5
            else:
                break
            b, d = nb, nd
            if val_prev is not None and abs(val_prev - nval) < 1e-15:
                val = nval
                break
            val_prev = nval
            val = nval
        return b, math.log(d), b * m2 + d * m4 + _log_z(b, d, grid, logw)[0]

    def _hist_residual(self, x, w):
        counts, edges = np.histogram(x, bins=self.hist_bins)
        expected = x.size * np.diff(self.cdf(edges))
        mask = expected > 5
        if mask.sum() <= 2:
            return float("nan")
        chi2 = np.sum((counts[mask] - expected[mask]) ** 2 / expected[mask])
        return float(chi2 / (mask.sum() - 2))

    # -- fitted-density helpers ---------------------------------------------

    def score_samples(self, X):
        check_is_fitted(self, "b_coeff_")
        x = as_samples(X, min_samples=1)
        return -self.b_coeff_ * x**2 - self.d_coeff_ * x**4 - self.log_norm_

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def pdf(self, x):
        check_is_fitted(self, "b_coeff_")
        x = np.asarray(x, dtype=float)
        return np.exp(-self.b_coeff_ * x**2 - self.d_coeff_ * x**4 - self.log_norm_)

    def cdf(self, x):
        check_is_fitted(self, "b_coeff_")
        x = np.asarray(x, dtype=float)
        lim = max(np.max(np.abs(x)), self.domain_sigmas * self.scale_) * 1.2
        g = np.linspace(-lim, lim, 20001)
        c = np.concatenate([[0.0], np.cumsum(0.5 * (self.pdf(g[1:]) + self.pdf(g[:-1])) * np.diff(g))])
        return np.interp(x, g, c / c[-1])

    @property
    def bimodal(self) -> bool:
        check_is_fitted(self, "b_coeff_")
        return self.b_coeff_ < 0

    @property
    def maxima(self) -> tuple[float, ...]:
        """Locations of the density maxima: (0,) when unimodal, +-sqrt(-B/2D) otherwise."""
        check_is_fitted(self, "b_coeff_")
        if self.b_coeff_ >= 0:
            return (0.0,)
        xm = math.sqrt(-self.b_coeff_ / (2.0 * self.d_coeff_))
        return (-xm, xm)


def fit_boltzmann(samples, **kwargs) -> BoltzmannFit:
    return BoltzmannFit(**kwargs).fit(samples)


class BootstrapResult(NamedTuple):
    mean: float
    std: float
    n_failed: int
    flagged: bool


def bootstrap_b(samples, n_boot: int = 10, rng=None, max_fail_fraction: float = 0.3) -> BootstrapResult:
    """Resample with replacement ``n_boot`` times, refit, and summarise B.

    The result is flagged when more than ``max_fail_fraction`` of the refits
    fail; mean and std are NaN when none succeed.
    """
    x = as_samples(samples, min_samples=1)
    rng = np.random.default_rng(rng)
    bs = []
    failed = 0
    for _ in range(n_boot):
        draw = x[rng.integers(0, x.size, x.size)]
        try:
            bs.append(BoltzmannFit().fit(draw).b_coeff_)
        except (FitError, InsufficientSamplesError):
            failed += 1
    flagged = failed > max_fail_fraction * n_boot
    if not bs:
        return BootstrapResult(float("nan"), float("nan"), failed, True)
    bs = np.asarray(bs)
    std = float(bs.std(ddof=1)) if bs.size > 1 else float("nan")
    return BootstrapResult(float(bs.mean()), std, failed, flagged)


# --- critical point -----------------------------------------------------------


@dataclass(frozen=True)
class CriticalPointEstimate:
    omega_c: float
    sigma_stat: float
    bracket: tuple[tuple[float, float], tuple[float, float]]
    gradient: tuple[float, float, float, float]  # d/dB1, d/dB2, d/dOmega1, d/dOmega2
    systematic_up: float = 0.06
    systematic_down: float = 0.085
    n_crossings: int = 1

    def to_dict(self) -> dict:
        (o1, b1), (o2, b2) = self.bracket
        return {
            "omega_c": self.omega_c, "sigma_stat": self.sigma_stat,
            "omega_1": o1, "b_1": b1, "omega_2": o2, "b_2": b2,
            "systematic_up": self.systematic_up, "systematic_down": self.systematic_down,
            "n_crossings": self.n_crossings,
        }


def crossing(omega1: float, b1: float, omega2: float, b2: float) -> float:
    """x-intercept of the line through (omega1, b1) and (omega2, b2)."""
    return omega1 - b1 * (omega1 - omega2) / (b1 - b2)


def crossing_gradient(omega1, b1, omega2, b2) -> tuple[float, float, float, float]:
    """Partial derivatives of :func:`crossing` w.r.t. (b1, b2, omega1, omega2)."""
    den = b1 - b2
    d_b1 = (omega1 - omega2) * b2 / den**2
    d_b2 = -(omega1 - omega2) * b1 / den**2
    d_o1 = -b2 / den
    d_o2 = b1 / den
    return d_b1, d_b2, d_o1, d_o2


def sign_changes(omegas, bs) -> list[int]:
    """Indices i where B goes from >= 0 at omega_i to < 0 at omega_{i+1} (omegas sorted)."""
    bs = np.asarray(bs, dtype=float)
    return [i for i in range(len(bs) - 1) if bs[i] >= 0 > bs[i + 1]]


def interpolate_critical(points: Iterable[Sequence[float]], sigma_omega_frac: float = 0.10,
                         systematic_up: float = 0.06, systematic_down: float = 0.085) -> CriticalPointEstimate:
    """Critical pump strength from (omega, B, sigma_B) points.

    Uses the lowest-omega pair bracketing B = 0 (warning if B crosses zero
    more than once). The statistical error propagates the bootstrap sigma_B
    of both points and a ``sigma_omega_frac`` relative uncertainty on each
    omega in quadrature.
    """
    pts = sorted((float(p[0]), float(p[1]), float(p[2]) if len(p) > 2 else 0.0) for p in points)
    if len(pts) < 2:
        raise NoSignChangeError("need at least two points")
    om = [p[0] for p in pts]
    bs = [p[1] for p in pts]
    idx = sign_changes(om, bs)
    if not idx:
        raise NoSignChangeError("B does not change sign from positive to negative")
    if len(idx) > 1:
        warnings.warn(f"B changes sign {len(idx)} times; using the lowest-omega crossing", RuntimeWarning)
    i = idx[0]
    (o1, b1, s1), (o2, b2, s2) = pts[i], pts[i + 1]
    omega_c = crossing(o1, b1, o2, b2)
    grad = crossing_gradient(o1, b1, o2, b2)
    var = (grad[0] * s1) ** 2 + (grad[1] * s2) ** 2 + (grad[2] * sigma_omega_frac * o1) ** 2 + (grad[3] * sigma_omega_frac * o2) ** 2
    return CriticalPointEstimate(omega_c, math.sqrt(var), ((o1, b1), (o2, b2)), grad,
                                 systematic_up, systematic_down, len(idx))


class CriticalPointEstimator(BaseEstimator):
    """Fit B at every pump strength, bootstrap its error and interpolate Omega_c.

    ``fit(omegas, sample_sets)`` takes one array of c_proj samples per omega.
    """

    def __init__(self, n_boot: int = 10, sigma_omega_frac: float = 0.10, random_state=0):
        self.n_boot = n_boot
        self.sigma_omega_frac = sigma_omega_frac
        self.random_state = random_state

    def fit(self, omegas, sample_sets):
        omegas = np.asarray(omegas, dtype=float)
        if len(sample_sets) != omegas.size:
            raise ValueError("need one sample set per omega")
        seeds = np.random.SeedSequence(self.random_state).spawn(omegas.size)
        fits, rows = [], []
        for om, xs, ss in zip(omegas, sample_sets, seeds):
            f = fit_boltzmann(xs)
            boot = bootstrap_b(xs, self.n_boot, np.random.default_rng(ss))
            fits.append(f)
            rows.append((om, f.b_coeff_, boot.std, f.d_coeff_, boot.mean, boot.flagged))
        self.fits_ = fits
        self.table_ = rows
        self.estimate_ = interpolate_critical([(r[0], r[1], r[2]) for r in rows], self.sigma_omega_frac)
        self.omega_c_ = self.estimate_.omega_c
        return self


# --- detector-noise systematic -------------------------------------------------


@dataclass(frozen=True)
class NoiseCorrection:
    factor: float
    omega_c_in: float
    omega_c_shifted: float
    reliable: bool
    b_shifted: tuple = field(default=())


def _density_grid(fits: Sequence[BoltzmannFit], sigma: float) -> np.ndarray:
    half = max(max(f.domain_sigmas * f.scale_ for f in fits), 1.0e-300) + 6.0 * sigma
    return np.linspace(-half, half, 4001)


def convolve_density(fit: BoltzmannFit, sigma: float, grid: np.ndarray) -> np.ndarray:
    """Fitted density convolved with a zero-mean Gaussian of width ``sigma`` on ``grid``."""
    p = fit.pdf(grid)
    if sigma == 0:
        return p / p.sum()
    dx = grid[1] - grid[0]
    m = int(math.ceil(6.0 * sigma / dx))
    kx = np.arange(-m, m + 1) * dx
    kernel = np.exp(-0.5 * (kx / sigma) ** 2)
    q = np.convolve(p, kernel / kernel.sum(), mode="same")
    return q / q.sum()


def _fit_density(grid, weights) -> BoltzmannFit:
    keep = weights > 1e-300
    return BoltzmannFit().fit(grid[keep], sample_weight=weights[keep])


def _forward_b(fit: BoltzmannFit, sigma: float, grid: np.ndarray) -> float:
    return _fit_density(grid, convolve_density(fit, sigma, grid)).b_coeff_


class _Params:
    """Stand-in fitted density with given coefficients."""

    domain_sigmas = 6.0

    def __init__(self, b, d, scale):
        self.b_coeff_, self.d_coeff_, self.scale_ = b, d, scale

    def pdf(self, x):
        return np.exp(-self.b_coeff_ * x**2 - self.d_coeff_ * x**4)


def _invert_fit(fit: BoltzmannFit, sigma: float, grid: np.ndarray) -> Optional[float]:
    """Find the noiseless B whose noise-convolved density refits to ``fit``."""
    s = fit.scale_
    target = np.array([fit.b_coeff_ * s**2, math.log(fit.d_coeff_ * s**4)])

    def resid(p):
        cand = _Params(p[0] / s**2, math.exp(p[1]) / s**4, s)
        f = _fit_density(grid, convolve_density(cand, sigma, grid))
        return np.array([f.b_coeff_ * s**2, math.log(f.d_coeff_ * s**4)]) - target

    try:
        sol = optimize.least_squares(resid, target, method="lm", xtol=1e-10, ftol=1e-12)
    except (FitError, ValueError, FloatingPointError):
        return None
    if not sol.success or np.max(np.abs(sol.fun)) > 1e-4:
        return None
    return sol.x[0] / s**2


def noise_correction(fits: Sequence[tuple[float, BoltzmannFit]], detector_sigma: float,
                     method: str = "invert", max_shift: float = 0.25) -> NoiseCorrection:
    """Multiplicative correction to Omega_c for Gaussian detection noise of width ``detector_sigma``.

    ``fits`` are (omega, fitted density) pairs from the measured distributions.

    * ``"forward"``: convolve each fitted density with the noise, refit B,
      re-interpolate, and return Omega_c(fits) / Omega_c(convolved). This
      estimates the shift caused by noise and assumes the measured data moved
      by the same amount.
    * ``"invert"`` (default): for each omega find the noiseless density whose
      noise-convolved refit reproduces the measured fit, then return
      Omega_c(noiseless) / Omega_c(fits).

    The correction is flagged unreliable when no sign change survives or the
    shift exceeds ``max_shift``.
    """
    pairs = sorted(((float(o), f) for o, f in fits), key=lambda p: p[0])
    omegas = [o for o, _ in pairs]
    b_in = [f.b_coeff_ for _, f in pairs]
    omega_in = interpolate_critical([(o, b, 0.0) for o, b in zip(omegas, b_in)]).omega_c
    if detector_sigma == 0:
        return NoiseCorrection(1.0, omega_in, omega_in, True, tuple(b_in))
    if detector_sigma < 0:
        raise ValueError("detector_sigma must be >= 0")
    grid = _density_grid([f for _, f in pairs], detector_sigma)
    if method == "forward":
        b_new = [_forward_b(f, detector_sigma, grid) for _, f in pairs]
    elif method == "invert":
        b_new = [_invert_fit(f, detector_sigma, grid) for _, f in pairs]
        if any(b is None for b in b_new):
            return NoiseCorrection(float("nan"), omega_in, float("nan"), False, tuple(b_new))
    else:
        raise ValueError(f"unknown method {method!r}")
    try:
        omega_new = interpolate_critical([(o, b, 0.0) for o, b in zip(omegas, b_new)]).omega_c
    except NoSignChangeError:
        return NoiseCorrection(float("nan"), omega_in, float("nan"), False, tuple(b_new))
    factor = omega_in / omega_new if method == "forward" else omega_new / omega_in
    reliable = abs(factor - 1.0) <= max_shift
    return NoiseCorrection(factor, omega_in, omega_new, reliable, tuple(b_new))
