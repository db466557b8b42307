"""Experiment configuration with unit-suffixed text I/O.

Everything is stored in SI (rad/s, m, s, K). Config files carry explicit unit
suffixes, e.g. ``delta_pa: -80 MHz`` or ``temperature: 35 uK``; frequencies in
Hz/kHz/MHz are ordinary frequencies and get multiplied by 2*pi on the way in.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .constants import KHZ, MHZ, NM, UK, US


class ConfigError(ValueError):
    """A configuration value is missing, malformed or violates a constraint."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


_TWO_PI = 2.0 * math.pi

# unit -> (dimension, factor to SI)
_UNITS: dict[str, tuple[str, float]] = {
    "rad/s": ("frequency", 1.0),
    "Hz": ("frequency", _TWO_PI),
    "kHz": ("frequency", _TWO_PI * 1e3),
    "MHz": ("frequency", _TWO_PI * 1e6),
    "GHz": ("frequency", _TWO_PI * 1e9),
    "m": ("length", 1.0),
    "mm": ("length", 1e-3),
    "um": ("length", 1e-6),
    "nm": ("length", 1e-9),
    "lambda": ("length", float("nan")),  # resolved against the wavelength
    "s": ("time", 1.0),
    "ms": ("time", 1e-3),
    "us": ("time", 1e-6),
    "ns": ("time", 1e-9),
    "K": ("temperature", 1.0),
    "mK": ("temperature", 1e-3),
    "uK": ("temperature", 1e-6),
    "nK": ("temperature", 1e-9),
    "1/s": ("rate", 1.0),
    "1/ms": ("rate", 1e3),
    "1/us": ("rate", 1e6),
}
_UNITS["μs"] = _UNITS["us"]
_UNITS["μm"] = _UNITS["um"]
_UNITS["μK"] = _UNITS["uK"]
_UNITS["λ"] = _UNITS["lambda"]

_SI_NAME = {"frequency": "rad/s", "length": "m", "time": "s", "temperature": "K", "rate": "1/s"}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*((?:1/)?[^\s\d].*)?$")

DETUNING_MODES = ("self_consistent", "frozen")
FIELD_MODES = ("adiabatic", "relaxation")


@dataclass(frozen=True)
class ExperimentConfig:
    """Physical and protocol parameters of one experimental setting (SI units)."""

    n_atoms: int = 20
    rabi_peak: float = 30.0 * MHZ
    delta_pa: float = -80.0 * MHZ
    delta_pc: float = -1.9 * MHZ
    g0: float = 3.1 / math.sqrt(2.0) * MHZ
    kappa: float = 0.53 * MHZ
    gamma: float = 3.0 * MHZ
    nu: float = 93.0 * KHZ
    wavelength: float = 780.0 * NM
    spacing: float = 4.5 * 780.0 * NM
    temperature: float = 35.0 * UK
    ramp_time: float = 50.0 * US
    record_time: float = 250.0 * US
    tweezer_bias: float = 0.0
    dims: int = 1
    transverse_nus: tuple[float, float] = (93.0 * KHZ, 15.0 * KHZ)
    # integrator / model switches
    detuning_mode: str = "self_consistent"
    field_mode: str = "adiabatic"
    heating: bool = True
    friction: float = 0.0  # optional Langevin damping rate (1/s) towards a bath at `temperature`
    dt: float = 20e-9
    snapshot_interval: float = 0.2 * US

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ConfigError("n_atoms", "must be an integer >= 1")
        for name in ("kappa", "nu", "wavelength", "dt", "snapshot_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if self.friction < 0:
            raise ConfigError("friction", "must be >= 0")
        if self.temperature < 0:
            raise ConfigError("temperature", "must be >= 0")
        if self.delta_pa == 0:
            raise ConfigError("delta_pa", "must be nonzero")
        half = self.spacing / (self.wavelength / 2.0)
        if not (self.spacing > 0 and abs(half - round(half)) < 1e-6 and round(half) >= 1):
            raise ConfigError("spacing", "must be a positive multiple of wavelength/2")
        if self.dims not in (1, 3):
            raise ConfigError("dims", "must be 1 or 3")
        if len(self.transverse_nus) != 2 or min(self.transverse_nus) <= 0:
            raise ConfigError("transverse_nus", "needs two positive angular frequencies")
        if self.ramp_time < 0 or self.record_time <= self.ramp_time:
            raise ConfigError("record_time", "must exceed ramp_time (which must be >= 0)")
        if self.detuning_mode not in DETUNING_MODES:
            raise ConfigError("detuning_mode", f"must be one of {DETUNING_MODES}")
        if self.field_mode not in FIELD_MODES:
            raise ConfigError("field_mode", f"must be one of {FIELD_MODES}")
        if self.snapshot_interval < self.dt:
            raise ConfigError("snapshot_interval", "must be >= dt")

    @property
    def k(self) -> float:
        return _TWO_PI / self.wavelength

    @property
    def staggered(self) -> bool:
        """True for odd multiples of wavelength/2, where neighbours move in antiphase."""
        return round(self.spacing / (self.wavelength / 2.0)) % 2 == 1

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def digest(self) -> str:
        """Stable hash over every field; changes iff some field changes."""
        payload = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_DIMENSION = {
    "rabi_peak": "frequency",
    "delta_pa": "frequency",
    "delta_pc": "frequency",
    "g0": "frequency",
    "kappa": "frequency",
    "gamma": "frequency",
    "nu": "frequency",
    "wavelength": "length",
    "spacing": "length",
    "tweezer_bias": "length",
    "temperature": "temperature",
    "ramp_time": "time",
    "record_time": "time",
    "dt": "time",
    "snapshot_interval": "time",
    "friction": "rate",
    "transverse_nus": "frequency",
}
_PLAIN = {"n_atoms": int, "dims": int, "heating": bool, "detuning_mode": str, "field_mode": str}


def parse_quantity(text: Any, dimension: str, field_name: str = "value", wavelength: float | None = None) -> float:
    """Parse ``"80 MHz"``-style text into an SI float of the given dimension."""
    if isinstance(text, bool) or not isinstance(text, (str, int, float)):
        raise ConfigError(field_name, f"expected a quantity with units, got {text!r}")
    if isinstance(text, (int, float)):
        if text == 0:
            return 0.0
        raise ConfigError(field_name, f"missing unit suffix on {text!r}")
    m = _QUANTITY.match(text)
    if not m:
        raise ConfigError(field_name, f"cannot parse quantity {text!r}")
    number, unit = float(m.group(1)), (m.group(2) or "").strip()
    if not unit:
        if number == 0:
            return 0.0
        raise ConfigError(field_name, f"missing unit suffix on {text!r}")
    if unit not in _UNITS:
        raise ConfigError(field_name, f"unknown unit {unit!r}")
    dim, factor = _UNITS[unit]
    if dim != dimension:
        raise ConfigError(field_name, f"unit {unit!r} is a {dim}, expected a {dimension}")
    if unit in ("lambda", "λ"):
        if wavelength is None:
            raise ConfigError(field_name, "wavelength units need a wavelength")
        factor = wavelength
    return number * factor


def format_quantity(value: float, dimension: str) -> str:
    return f"{value!r} {_SI_NAME[dimension]}"


def config_from_mapping(data: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from a mapping of unit-suffixed strings; unknown keys are errors."""
    base = base or ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(str(key), "unknown configuration key")
    wavelength = base.wavelength
    if "wavelength" in data:
        wavelength = parse_quantity(data["wavelength"], "length", "wavelength")
    changes: dict[str, Any] = {}
    for key, raw in data.items():
        if key in _PLAIN:
            kind = _PLAIN[key]
            if kind is bool and not isinstance(raw, bool):
                raise ConfigError(key, "expected true/false")
            if kind is int and (isinstance(raw, bool) or not isinstance(raw, int)):
                raise ConfigError(key, "expected an integer")
            if kind is str and not isinstance(raw, str):
                raise ConfigError(key, "expected a string")
            changes[key] = raw
        elif key == "transverse_nus":
            if not isinstance(raw, (list, tuple)) or len(raw) != 2:
                raise ConfigError(key, "expected a list of two frequencies")
            changes[key] = tuple(parse_quantity(v, "frequency", key) for v in raw)
        else:
            changes[key] = parse_quantity(raw, _DIMENSION[key], key, wavelength)
    if "wavelength" in changes and "spacing" not in changes:
        changes["spacing"] = base.spacing / base.wavelength * changes["wavelength"]
    return dataclasses.replace(base, **changes)


def config_to_mapping(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _PLAIN:
            out[f.name] = v
        elif f.name == "transverse_nus":
            out[f.name] = [format_quantity(x, "frequency") for x in v]
        else:
            out[f.name] = format_quantity(v, _DIMENSION[f.name])
    return out


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config file must hold a mapping")
    return config_from_mapping(data, base)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_mapping(cfg), sort_keys=False, allow_unicode=True)
