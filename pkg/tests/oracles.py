"""Independent reference implementations and synthetic ground truth for the tests."""

import math

import numpy as np
import sympy as sp
from scipy import integrate


def sample_quartic(b: float, d: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection samples from p(x) ~ exp(-b x^2 - d x^4) with a uniform envelope."""
    if b < 0:
        xm = math.sqrt(-b / (2 * d))
        logmax = b * b / (4 * d)
    else:
        xm, logmax = 0.0, 0.0
    # support: where the log density is 40 below its maximum
    half = xm + 1.0
    while -b * half**2 - d * half**4 - logmax > -40:
        half *= 1.5
    out = np.empty(0)
    while out.size < n:
        x = rng.uniform(-half, half, 4 * n)
        keep = np.log(rng.random(x.size)) < -b * x**2 - d * x**4 - logmax
        out = np.concatenate([out, x[keep]])
    return out[:n]


def quartic_moments(b: float, d: float) -> tuple[float, float]:
    """<x^2>, <x^4> of exp(-b x^2 - d x^4) by quadrature."""
    w = lambda x, m: x**m * math.exp(-b * x * x - d * x**4)
    z = integrate.quad(w, -np.inf, np.inf, args=(0,))[0]
    return (integrate.quad(w, -np.inf, np.inf, args=(2,))[0] / z,
            integrate.quad(w, -np.inf, np.inf, args=(4,))[0] / z)


_o1, _b1, _o2, _b2 = sp.symbols("omega1 b1 omega2 b2", real=True)
_CROSS = _o1 - _b1 * (_o1 - _o2) / (_b1 - _b2)
_GRAD = [sp.lambdify((_o1, _b1, _o2, _b2), sp.diff(_CROSS, v), "mpmath") for v in (_b1, _b2, _o1, _o2)]
_CROSS_F = sp.lambdify((_o1, _b1, _o2, _b2), _CROSS, "mpmath")


def symbolic_crossing(o1, b1, o2, b2) -> tuple[float, tuple[float, ...]]:
    """Zero crossing and its gradient (d/db1, d/db2, d/do1, d/do2) from symbolic differentiation."""
    import mpmath

    mpmath.mp.dps = 40
    args = [mpmath.mpf(v) for v in (o1, b1, o2, b2)]
    return float(_CROSS_F(*args)), tuple(float(g(*args)) for g in _GRAD)


def synthetic_sequence(rng, drift_total: float, het, n_node: int = 10, snr: float = 5.0, fast: bool = True,
                       record: float = 250e-6, gap: float = 1e-3):
    """Reference, node frames with known c_proj(t) and random signs, reference; under a linear LO drift.

    Returns (calibrated node frames, true signs, true c_proj traces as (t, c) pairs).
    """
    from selforg.signal_chain import LoDrift, acquire_frames, calibrate_frames

    sig = het.window_sigma
    t = np.linspace(0.0, record, 1251)
    ref_angle = rng.uniform(-math.pi, math.pi)
    tilt = rng.uniform(-0.3, 0.3)
    ref = (t, 3 * sig * np.exp(1j * ref_angle) * np.ones_like(t))
    traces, signs, truth = [ref], [], []
    for _ in range(n_node):
        s = rng.choice([-1, 1])
        cp = s * snr * sig * (1 + 0.2 * np.sin(2 * np.pi * t / 80e-6 + rng.uniform(0, 2 * np.pi)))
        signs.append(s)
        truth.append((t, cp))
        # the node signal lies on the reference quadrature up to a small detuning-dependent tilt
        traces.append((t, cp * np.exp(1j * (ref_angle + tilt))))
    traces.append(ref)
    kinds = ["antinode"] + ["node"] * n_node + ["antinode"]
    starts = np.arange(n_node + 2) * (record + gap)
    span = starts[-1] + record
    drift = LoDrift(offset=rng.uniform(0, 2 * math.pi), rate=drift_total / span, bound=None)
    frames = acquire_frames(traces, kinds, starts, het, rng, drift, fast=fast)
    return calibrate_frames(frames), signs, truth
