"""Heterodyne detection chain: RF synthesis, windowed-FFT demodulation, phase calibration.

Field amplitudes are in sqrt(photon) units, so ``c_proj**2`` is an intracavity
photon number. The detector voltage is ``gain * |c| * sin(beat*t + arg c + phi_LO(t))``
plus white noise; demodulation returns ``c * exp(i*phi_LO)`` window by window.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal.windows import hann
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_traces
from .config import ExperimentConfig
from .constants import MHZ, US
from .dynamics import simulate_shot
from .model import critical_pump


class SignalChainError(ValueError):
    pass


class BinMisalignmentError(SignalChainError):
    """The beat frequency does not fall on an FFT bin of the demodulation window."""


class DegenerateCloudError(SignalChainError):
    """PCA cannot pick a major axis: the two principal variances are (nearly) equal."""


class DriftTooLargeError(SignalChainError):
    """LO phase drifted by pi or more between the reference frames."""


class AmbiguousPhaseError(SignalChainError):
    """A node frame's axis sits at (almost exactly) pi/2 from the interpolated reference."""


class TraceTooShortError(SignalChainError):
    pass


@dataclass(frozen=True)
class HeterodyneConfig:
    """Detector and demodulation settings.

    ``shot_noise_level`` is a field-equivalent noise density (sqrt(photon)/sqrt(Hz))
    per quadrature; ``detector_noise_level`` is additive voltage rms per sample.
    """

    beat_freq: float = 20.0 * MHZ
    sample_rate: float = 100e6
    window: float = 5.0 * US
    step: float = 1.0 * US
    gain: float = 1.0
    shot_noise_level: float = 1e-3
    detector_noise_level: float = 0.0

    def __post_init__(self):
        if not self.sample_rate > 4.0 * self.beat_freq / (2.0 * math.pi):
            raise SignalChainError("sample_rate must exceed 4x the beat frequency")
        for name in ("window", "step"):
            n = getattr(self, name) * self.sample_rate
            if abs(n - round(n)) > 1e-6 or round(n) < 1:
                raise SignalChainError(f"{name} must be a whole number of samples")
        if self.gain <= 0:
            raise SignalChainError("gain must be positive")
        if self.shot_noise_level < 0 or self.detector_noise_level < 0:
            raise SignalChainError("noise levels must be >= 0")

    @property
    def window_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def step_samples(self) -> int:
        return int(round(self.step * self.sample_rate))

    @property
    def beat_bin(self) -> int:
        """FFT bin of the beat note; raises if it is not an integer."""
        b = self.beat_freq / (2.0 * math.pi) * self.window
        if abs(b - round(b)) > 1e-6:
            raise BinMisalignmentError(
                f"beat frequency sits at fractional bin {b:.4f} of a {self.window_samples}-sample window"
            )
        return int(round(b))

    @property
    def sample_sigma(self) -> float:
        """Per-sample white-noise std in field units (shot + detector)."""
        shot = self.shot_noise_level**2 * self.sample_rate / 2.0
        det = (self.detector_noise_level / self.gain) ** 2
        return math.sqrt(shot + det)

    @property
    def window_sigma(self) -> float:
        """Per-quadrature std of one demodulated point: the shot-noise band."""
        w = hann(self.window_samples, sym=False)
        return self.sample_sigma * math.sqrt(2.0 * np.sum(w * w)) / np.sum(w)


@dataclass
class LoDrift:
    """LO phase model: offset + linear drift + reflected random walk.

    With ``bound`` set, the walk is kept within the budget left over by the
    linear part, so the total excursion never exceeds ``bound``.
    """

    offset: float = 0.0
    rate: float = 0.0  # rad/s
    walk: float = 0.0  # rad/sqrt(s)
    bound: Optional[float] = 0.9 * math.pi
    grid: float = 1.0 * US

    def realize(self, t_start: float, t_stop: float, rng: Optional[np.random.Generator] = None) -> Callable:
        span = t_stop - t_start
        linear_budget = abs(self.rate) * span
        if self.bound is not None and linear_budget > self.bound + 1e-12:
            raise SignalChainError(f"linear drift {linear_budget:.3f} rad exceeds the bound {self.bound:.3f}")
        n = max(2, int(math.ceil(span / self.grid)) + 1)
        tg = t_start + np.arange(n) * self.grid
        rw = np.zeros(n)
        if self.walk > 0:
            if rng is None:
                raise SignalChainError("a random-walk LO drift needs an rng")
            steps = self.walk * math.sqrt(self.grid) * rng.standard_normal(n - 1)
            rw[1:] = np.cumsum(steps)
            if self.bound is not None:
                lim = max(self.bound - linear_budget, 0.0)
                rw = _reflect(rw, lim)
        ph = self.offset + self.rate * (tg - t_start) + rw

        def phase(t):
            return np.interp(t, tg, ph)

        return phase


def _reflect(x: np.ndarray, lim: float) -> np.ndarray:
    if lim == 0:
        return np.zeros_like(x)
    period = 4.0 * lim
    y = np.mod(x + lim, period)
    return np.where(y <= 2 * lim, y, period - y) - lim


@dataclass
class VoltageTrace:
    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0
    gain: float = 1.0
    seed: Optional[int] = None
    frame_id: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate


@dataclass
class DemodTrace:
    """One complex point per window step; ``times`` are window centres."""

    times: np.ndarray
    amplitudes: np.ndarray
    frame_id: int = 0
    kind: str = "node"
    window_sigma: float = 0.0
    pca_angle: Optional[float] = None
    phase: Optional[float] = None  # full reference angle used for projection
    c_proj: Optional[np.ndarray] = None

    @property
    def mid_time(self) -> float:
        return float(0.5 * (self.times[0] + self.times[-1]))


def _field_arrays(field_trace) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(field_trace, tuple):
        t, c = field_trace
    else:
        t, c = field_trace.times, field_trace.field
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=complex)
    if t.ndim != 1 or t.shape != c.shape or t.size < 2:
        raise SignalChainError("field trace needs matching 1D times and amplitudes")
    return t, c


def _baseband(field_trace, het: HeterodyneConfig, t0: float, phase: Optional[Callable]):
    t, c = _field_arrays(field_trace)
    n = int(math.floor((t[-1] - t[0]) * het.sample_rate + 1e-9))
    local = t[0] + np.arange(n) / het.sample_rate
    cs = np.interp(local, t, c.real) + 1j * np.interp(local, t, c.imag)
    ts = t0 + local
    if phase is not None:
        cs = cs * np.exp(1j * phase(ts))
    return ts, cs


def synthesize_voltage(field_trace, het: HeterodyneConfig, rng: Optional[np.random.Generator] = None, *,
                       t0: float = 0.0, phase: Optional[Callable] = None, seed: Optional[int] = None,
                       frame_id: int = 0) -> VoltageTrace:
    """Sample the detector voltage for a field trace (``(times, field)`` or a trajectory).

    ``t0`` places the trace on the absolute clock that drives the carrier and
    the LO phase function ``phase(t)``.
    """
    ts, cs = _baseband(field_trace, het, t0, phase)
    v = het.gain * np.imag(cs * np.exp(1j * het.beat_freq * ts))
    sd = het.gain * het.sample_sigma
    if sd > 0:
        if rng is None:
            raise SignalChainError("noise needs an rng")
        v = v + sd * rng.standard_normal(v.size)
    return VoltageTrace(v, het.sample_rate, float(ts[0]), het.gain, seed, frame_id)


def _windows(x: np.ndarray, het: HeterodyneConfig) -> np.ndarray:
    L = het.window_samples
    if x.size < L:
        raise TraceTooShortError(f"trace of {x.size} samples is shorter than one window ({L})")
    return sliding_window_view(x, L)[:: het.step_samples]


def demodulate(voltage: VoltageTrace, het: HeterodyneConfig, kind: str = "node") -> DemodTrace:
    """Hann-windowed FFT at the beat bin, gain-corrected, stepped by ``het.step``."""
    if abs(voltage.sample_rate - het.sample_rate) > 1e-9 * het.sample_rate:
        raise SignalChainError("voltage sample rate differs from the demodulator's")
    b = het.beat_bin
    L = het.window_samples
    w = hann(L, sym=False)
    frames = _windows(np.asarray(voltage.samples, dtype=float), het)
    spec = np.fft.rfft(frames * w, axis=1)[:, b]
    starts = voltage.t0 + np.arange(frames.shape[0]) * het.step_samples / het.sample_rate
    # FFT phases refer to each window's first sample; move them to the absolute clock
    spec = spec * np.exp(-1j * het.beat_freq * starts)
    amps = 2j * spec / (np.sum(w) * voltage.gain)
    centres = starts + (L // 2) / het.sample_rate
    return DemodTrace(centres, amps, voltage.frame_id, kind, het.window_sigma)


def fast_demodulate(field_trace, het: HeterodyneConfig, rng: Optional[np.random.Generator] = None, *,
                    t0: float = 0.0, phase: Optional[Callable] = None, frame_id: int = 0,
                    kind: str = "node") -> DemodTrace:
    """Demod output without the RF carrier.

    Circular complex noise with per-quadrature variance 2*sample_sigma**2 reproduces the
    window-to-window noise covariance of the RF path; the signal part differs
    only by the rejected 2x-beat image.
    """
    ts, cs = _baseband(field_trace, het, t0, phase)
    sd = math.sqrt(2.0) * het.sample_sigma
    if sd > 0:
        if rng is None:
            raise SignalChainError("noise needs an rng")
        cs = cs + sd * (rng.standard_normal(cs.size) + 1j * rng.standard_normal(cs.size))
    L = het.window_samples
    w = hann(L, sym=False)
    frames = _windows(cs, het)
    amps = frames @ w / np.sum(w)
    starts = ts[0] + np.arange(frames.shape[0]) * het.step_samples / het.sample_rate
    return DemodTrace(starts + (L // 2) / het.sample_rate, amps, frame_id, kind, het.window_sigma)


def pca_phase(points, rel_tol: float = 1e-3) -> float:
    """Major-axis angle in [0, pi) of the (uncentred) second-moment matrix of a 2D cloud."""
    z = np.asarray(points, dtype=complex).ravel()
    if z.size < 2:
        raise SignalChainError("pca_phase needs at least two points")
    x, y = z.real, z.imag
    m = np.array([[np.mean(x * x), np.mean(x * y)], [np.mean(x * y), np.mean(y * y)]])
    vals, vecs = np.linalg.eigh(m)
    if vals[1] <= 0 or (vals[1] - vals[0]) <= rel_tol * vals[1]:
        raise DegenerateCloudError("principal variances are equal within tolerance")
    v = vecs[:, 1]
    return float(np.mod(math.atan2(v[1], v[0]), math.pi))


def anisotropy(points) -> float:
    """Ratio of major to minor principal second moment."""
    z = np.asarray(points, dtype=complex).ravel()
    x, y = z.real, z.imag
    m = np.array([[np.mean(x * x), np.mean(x * y)], [np.mean(x * y), np.mean(y * y)]])
    vals = np.linalg.eigvalsh(m)
    return float(vals[1] / vals[0]) if vals[0] > 0 else math.inf


def _wrap(a, period: float = 2.0 * math.pi):
    """Map to (-period/2, period/2]."""
    return period / 2.0 - np.mod(period / 2.0 - np.asarray(a), period)


def _reference_phase(frame: DemodTrace) -> float:
    ax = pca_phase(frame.amplitudes)
    proj = np.mean(np.real(frame.amplitudes * np.exp(-1j * ax)))
    return ax if proj >= 0 else ax + math.pi


def calibrate_frames(frames: Sequence[DemodTrace], *, axis: str = "pca", ambiguity_tol: float = 0.05,
                     min_anisotropy: float = 2.0) -> list[DemodTrace]:
    """Phase-calibrate a multi-frame sequence and return the node frames with ``c_proj`` filled.

    The two antinode references fix the positive direction. Their phase
    difference is unwrapped by following the PCA axes of the node frames in
    time order (each step assumed < pi/2); with no usable node axis the
    wrapped difference is taken. Node frames are projected on their own PCA
    axis (``axis="pca"``) or on the interpolated reference (``"interpolated"``).
    """
    if axis not in ("pca", "interpolated"):
        raise ValueError("axis must be 'pca' or 'interpolated'")
    if len(frames) < 3 or frames[0].kind != "antinode" or frames[-1].kind != "antinode":
        raise SignalChainError("sequence must start and end with antinode reference frames")
    if any(f.kind != "node" for f in frames[1:-1]):
        raise SignalChainError("only node frames may sit between the references")
    first, last = frames[0], frames[-1]
    pa, pb = _reference_phase(first), _reference_phase(last)
    ta, tb = first.mid_time, last.mid_time
    if not tb > ta:
        raise SignalChainError("frames must be in time order")

    nodes = list(frames[1:-1])
    axes: list[Optional[float]] = []
    track = pa
    for f in nodes:
        try:
            ax = pca_phase(f.amplitudes)
        except DegenerateCloudError:
            axes.append(None)
            continue
        axes.append(ax)
        if anisotropy(f.amplitudes) >= min_anisotropy:
            track = track + float(_wrap(ax - track, math.pi))
    pb_unwrapped = track + float(_wrap(pb - track))
    drift = pb_unwrapped - pa
    if abs(drift) >= math.pi:
        raise DriftTooLargeError(f"reference phase drifted by {drift / math.pi:.2f} pi")

    out = []
    for f, ax in zip(nodes, axes):
        interp = pa + drift * (f.mid_time - ta) / (tb - ta)
        if axis == "interpolated" or ax is None:
            ph = interp
        else:
            off = float(_wrap(ax - interp, math.pi))
            if abs(abs(off) - math.pi / 2.0) < ambiguity_tol:
                raise AmbiguousPhaseError(f"frame {f.frame_id}: axis is {off:.3f} rad from the interpolated phase")
            ph = interp + off
        cp = np.real(f.amplitudes * np.exp(-1j * ph))
        out.append(replace(f, pca_angle=ax, phase=float(ph), c_proj=cp))
    return out


def moving_average(trace, averaging_time: float, dt: float, stride: Optional[float] = None,
                   min_averaging: float = 5.0 * US) -> np.ndarray:
    """Block means of ``trace`` (1D, or 2D with one row per shot).

    Non-overlapping blocks by default; ``stride`` gives a sliding average
    sampled every ``stride``. Returns ``(shots, blocks)``.
    """
    if averaging_time < min_averaging * (1 - 1e-9):
        raise SignalChainError(f"averaging time must be >= {min_averaging:g} s")
    x = np.asarray(trace, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = int(round(averaging_time / dt))
    hop = n if stride is None else max(1, int(round(stride / dt)))
    if x.shape[1] < n:
        raise TraceTooShortError(f"trace of {x.shape[1]} points is shorter than the {n}-point window")
    return sliding_window_view(x, n, axis=1)[:, ::hop].mean(axis=-1)


# -- sequences ---------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    kind: str  # "antinode" | "node"
    config: ExperimentConfig


@dataclass
class FrameSequence:
    """Antinode reference, node measurement frames, antinode reference.

    Frames start every ``record_time + gap`` (the gap stands in for cooling
    and tweezer moves between pumping frames).
    """

    frames: list
    gap: float = 1e-3

    def __post_init__(self):
        if len(self.frames) < 3:
            raise SignalChainError("need two references and at least one node frame")
        if self.frames[0].kind != "antinode" or self.frames[-1].kind != "antinode":
            raise SignalChainError("first and last frames must be antinode references")
        if any(f.kind != "node" for f in self.frames[1:-1]):
            raise SignalChainError("middle frames must be node frames")

    @classmethod
    def standard(cls, config: ExperimentConfig, n_node: int = 10, reference_rabi: Optional[float] = None,
                 gap: float = 1e-3) -> "FrameSequence":
        """References at 5 lambda spacing on the positive antinodes, pumped below threshold."""
        if not 1 <= n_node:
            raise SignalChainError("n_node must be >= 1")
        lam = config.wavelength
        if reference_rabi is None:
            reference_rabi = 0.5 * critical_pump(config)
        ref = config.replace(spacing=5.0 * lam, tweezer_bias=lam / 4.0, rabi_peak=reference_rabi)
        frames = [Frame("antinode", ref)] + [Frame("node", config)] * n_node + [Frame("antinode", ref)]
        return cls(frames, gap)

    @property
    def starts(self) -> np.ndarray:
        return np.cumsum([0.0] + [f.config.record_time + self.gap for f in self.frames[:-1]])

    @property
    def span(self) -> float:
        return float(self.starts[-1] + self.frames[-1].config.record_time)


def acquire_frames(field_traces: Sequence, kinds: Sequence[str], starts: Sequence[float], het: HeterodyneConfig,
                   rng: np.random.Generator, drift: Optional[LoDrift] = None, fast: bool = True) -> list[DemodTrace]:
    """Detect a list of field traces placed at absolute ``starts`` under one LO drift realization."""
    if not (len(field_traces) == len(kinds) == len(starts)):
        raise SignalChainError("need one kind and start time per field trace")
    span = float(starts[-1]) + float(np.ptp(_field_arrays(field_traces[-1])[0]))
    phase = (drift or LoDrift()).realize(float(starts[0]), span, rng)
    out = []
    for i, (tr, kind, t0) in enumerate(zip(field_traces, kinds, starts)):
        if fast:
            out.append(fast_demodulate(tr, het, rng, t0=t0, phase=phase, frame_id=i, kind=kind))
        else:
            v = synthesize_voltage(tr, het, rng, t0=t0, phase=phase, frame_id=i)
            out.append(demodulate(v, het, kind))
    return out


def run_sequence(sequence: FrameSequence, het: HeterodyneConfig, seed: int, drift: Optional[LoDrift] = None,
                 fast: bool = True):
    """Simulate every frame (one shot each), detect, and calibrate.

    Returns ``(calibrated node DemodTraces, simulated trajectories)``.
    """
    ss = np.random.SeedSequence(seed)
    sim_seeds = ss.spawn(len(sequence.frames))
    rng = np.random.default_rng(ss.spawn(1)[0])
    trajs = [simulate_shot(f.config, rng_seed=s) for f, s in zip(sequence.frames, sim_seeds)]
    demod = acquire_frames(trajs, [f.kind for f in sequence.frames], sequence.starts, het, rng, drift, fast)
    return calibrate_frames(demod), trajs


# -- sklearn-style wrappers ----------------------------------------------------


class HeterodyneDemodulator(TransformerMixin, BaseEstimator):
    """Rows of raw voltage samples -> rows of complex demodulated amplitudes."""

    def __init__(self, beat_freq: float = 20.0 * MHZ, sample_rate: float = 100e6, window: float = 5.0 * US,
                 step: float = 1.0 * US, gain: float = 1.0):
        self.beat_freq = beat_freq
        self.sample_rate = sample_rate
        self.window = window
        self.step = step
        self.gain = gain

    def fit(self, X=None, y=None):
        self.het_ = HeterodyneConfig(self.beat_freq, self.sample_rate, self.window, self.step, self.gain, 0.0, 0.0)
        self.het_.beat_bin
        return self

    def transform(self, X):
        X = as_traces(X)
        het = self.het_ if hasattr(self, "het_") else self.fit().het_
        return np.stack([demodulate(VoltageTrace(row, het.sample_rate, 0.0, het.gain), het).amplitudes for row in X])


class MovingAverage(TransformerMixin, BaseEstimator):
    """Rows of c_proj traces -> block-averaged samples."""

    def __init__(self, averaging_time: float = 5.0 * US, dt: float = 1.0 * US, stride: Optional[float] = None):
        self.averaging_time = averaging_time
        self.dt = dt
        self.stride = stride

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return moving_average(as_traces(X), self.averaging_time, self.dt, self.stride)


# -- file formats ----------------------------------------------------------------

_MAGIC = b"SOVOLT1\n"


def save_voltage(path: str | Path, trace: VoltageTrace) -> None:
    """Binary: magic, uint32 header length, JSON header, float64 little-endian samples."""
    header = json.dumps({
        "sample_rate": trace.sample_rate, "gain": trace.gain, "seed": trace.seed, "t0": trace.t0,
        "frame_id": trace.frame_id, "n": int(trace.samples.size), "dtype": "<f8",
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.asarray(trace.samples, dtype="<f8").tobytes())


def load_voltage(path: str | Path) -> VoltageTrace:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise SignalChainError(f"{path}: not a voltage trace file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    header = json.loads(raw[off + 4:off + 4 + hlen])
    data = np.frombuffer(raw[off + 4 + hlen:], dtype=header["dtype"])
    if data.size != header["n"]:
        raise SignalChainError(f"{path}: expected {header['n']} samples, found {data.size}")
    return VoltageTrace(data.astype(float), header["sample_rate"], header["t0"], header["gain"], header["seed"],
                        header["frame_id"])


def demod_rows(traces: Sequence[DemodTrace]) -> list[dict]:
    rows = []
    for tr in traces:
        cp = tr.c_proj if tr.c_proj is not None else np.full(tr.times.size, np.nan)
        for t, a, c in zip(tr.times, tr.amplitudes, cp):
            rows.append({"t": float(t), "re": float(a.real), "im": float(a.imag), "c_proj": float(c),
                         "frame": int(tr.frame_id)})
    return rows


def write_demod(path: str | Path, traces: Sequence[DemodTrace]) -> None:
    """CSV or JSON lines, chosen by suffix (``.csv`` / ``.jsonl``)."""
    path = Path(path)
    rows = demod_rows(traces)
    if path.suffix == ".jsonl":
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return
    lines = ["t,re,im,c_proj,frame"]
    lines += [f"{r['t']!r},{r['re']!r},{r['im']!r},{r['c_proj']!r},{r['frame']}" for r in rows]
    path.write_text("\n".join(lines) + "\n")
