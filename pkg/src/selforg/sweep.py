"""Parameter sweeps with a resumable manifest, plus the on-disk formats.

Layout of an output directory::

    manifest.yaml            spec, per-point seeds/status/file hashes
    points/<key>/traces.npz  c_proj, field and temperature per shot
    points/<key>/samples.csv block-averaged c_proj samples
    points/<key>/result.json one row per averaging time
    results.csv / results.jsonl
    plot_data.csv            long format (figure, series, x, y, yerr)
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import io
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml
from filelock import FileLock, Timeout

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_mapping, config_to_mapping, parse_quantity
from .constants import MHZ, US
from .criticality import FitError, InsufficientSamplesError, bootstrap_b, fit_boltzmann
from .dynamics import shot_seed, simulate_ensemble
from .model import DebyeWallerEpsilon, critical_pump
from .signal_chain import HeterodyneConfig, fast_demodulate, moving_average

WORKERS_ENV = "SELFORG_WORKERS"

AXES = ("n_atoms", "rabi_peak", "rabi_ratio", "delta_pa", "delta_pc", "tweezer_bias", "temperature")
_AXIS_DIMENSION = {"rabi_peak": "frequency", "delta_pa": "frequency", "delta_pc": "frequency",
                   "tweezer_bias": "length", "temperature": "temperature"}


class SweepError(RuntimeError):
    pass


class SweepLockedError(SweepError):
    pass


@dataclass
class SweepSpec:
    """Cartesian grid over config fields; ``averaging_times`` is an analysis-only axis.

    ``rabi_ratio`` (dimensionless) sets the pump relative to the Debye-Waller
    critical pump of each point's configuration.
    """

    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    axes: dict = field(default_factory=dict)
    averaging_times: tuple = (5.0 * US,)
    shots: int = 180
    seed: int = 0
    output: Path = Path("sweep-out")
    budget: int = 2000
    analysis_start: float = 0.0
    analysis_stop: float = 100.0 * US
    detection: str = "ideal"  # or "fast": demodulated with heterodyne noise
    shot_noise_level: float = 1e-3
    n_boot: int = 10

    def __post_init__(self):
        for name in self.axes:
            if name not in AXES:
                raise ConfigError(name, f"not a sweepable axis (choose from {AXES})")
        if "rabi_peak" in self.axes and "rabi_ratio" in self.axes:
            raise ConfigError("rabi_ratio", "cannot sweep rabi_peak and rabi_ratio together")
        if self.shots < 1:
            raise ConfigError("shots", "must be >= 1")
        if self.detection not in ("ideal", "fast"):
            raise ConfigError("detection", "must be 'ideal' or 'fast'")
        if self.size > self.budget:
            raise ConfigError("axes", f"grid has {self.size} points, over the budget of {self.budget}")
        if not self.analysis_stop > self.analysis_start >= 0:
            raise ConfigError("analysis_stop", "analysis window must be non-empty")
        for p in self.points():
            self.config_for(p)  # every point must be a valid configuration

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.axes.values()) if self.axes else 1

    def points(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def config_for(self, coords: dict) -> ExperimentConfig:
        changes = {k: v for k, v in coords.items() if k != "rabi_ratio"}
        if "n_atoms" in changes:
            changes["n_atoms"] = int(changes["n_atoms"])
        cfg = self.base.replace(**changes)
        if "rabi_ratio" in coords:
            cfg = cfg.replace(rabi_peak=float(coords["rabi_ratio"]) * critical_pump(cfg, DebyeWallerEpsilon()))
        return cfg

    def to_mapping(self) -> dict:
        axes = {}
        for k, vals in self.axes.items():
            if k in _AXIS_DIMENSION:
                axes[k] = [f"{float(v)!r} {_si(_AXIS_DIMENSION[k])}" for v in vals]
            else:
                axes[k] = [v if k == "n_atoms" else float(v) for v in vals]
        return {
            "base": config_to_mapping(self.base), "axes": axes,
            "averaging_times": [f"{t!r} s" for t in self.averaging_times],
            "shots": self.shots, "seed": self.seed, "budget": self.budget,
            "analysis_window": [f"{self.analysis_start!r} s", f"{self.analysis_stop!r} s"],
            "detection": self.detection, "shot_noise_level": self.shot_noise_level, "n_boot": self.n_boot,
        }


def _si(dim: str) -> str:
    return {"frequency": "rad/s", "length": "m", "temperature": "K", "time": "s"}[dim]


def spec_from_mapping(data: dict, output: Optional[Path] = None) -> SweepSpec:
    known = {"base", "axes", "averaging_times", "shots", "seed", "budget", "analysis_window", "detection",
             "shot_noise_level", "n_boot", "output"}
    for key in data:
        if key not in known:
            raise ConfigError(str(key), "unknown sweep key")
    base = config_from_mapping(data.get("base") or {})
    axes = {}
    raw_axes = dict(data.get("axes") or {})
    if "averaging_time" in raw_axes:  # analysis-only: never part of the simulated grid
        if "averaging_times" in data:
            raise ConfigError("averaging_time", "give averaging times either as an axis or as averaging_times")
        data = {**data, "averaging_times": raw_axes.pop("averaging_time")}
    for name, vals in raw_axes.items():
        if name not in AXES:
            raise ConfigError(name, f"not a sweepable axis (choose from {AXES})")
        if not isinstance(vals, list) or not vals:
            raise ConfigError(name, "axis needs a non-empty list")
        if name == "n_atoms":
            axes[name] = [int(v) for v in vals]
        elif name == "rabi_ratio":
            axes[name] = [float(v) for v in vals]
        else:
            axes[name] = [parse_quantity(v, _AXIS_DIMENSION[name], name, base.wavelength) for v in vals]
    kw: dict[str, Any] = {"base": base, "axes": axes}
    if "averaging_times" in data:
        kw["averaging_times"] = tuple(parse_quantity(v, "time", "averaging_times") for v in data["averaging_times"])
    if "analysis_window" in data:
        a, b = (parse_quantity(v, "time", "analysis_window") for v in data["analysis_window"])
        kw["analysis_start"], kw["analysis_stop"] = a, b
    for key in ("shots", "seed", "budget", "n_boot"):
        if key in data:
            kw[key] = int(data[key])
    for key in ("detection",):
        if key in data:
            kw[key] = str(data[key])
    if "shot_noise_level" in data:
        kw["shot_noise_level"] = float(data["shot_noise_level"])
    out = output or data.get("output")
    if out is not None:
        kw["output"] = Path(out)
    return SweepSpec(**kw)


def load_spec(path: str | Path, output: Optional[Path] = None) -> SweepSpec:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "sweep file must hold a mapping")
    return spec_from_mapping(data, output)


def point_key(coords: dict) -> str:
    """Stable, readable directory name for a grid point."""
    if not coords:
        return "point"
    parts = [f"{k}={coords[k]!r}" for k in sorted(coords)]
    digest = hashlib.sha256("|".join(parts).encode()).hexdigest()[:10]
    return f"p{digest}"


def point_seed(master_seed: int, coords: dict) -> int:
    """Seed from (master seed, coordinates) only, so other points never shift it."""
    payload = json.dumps([int(master_seed), sorted((k, repr(v)) for k, v in coords.items())])
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:8], "little")


# -- per-point pipeline ------------------------------------------------------------


def detect_c_proj(trace, mode: str, het: Optional[HeterodyneConfig], seed: int) -> tuple[np.ndarray, float]:
    """c_proj per shot and its sample spacing.

    ``ideal`` returns the simulated projection at the snapshot grid. ``fast``
    runs the baseband detection path with heterodyne noise and projects on
    the shot's mean projection angle (a perfectly calibrated LO phase).
    """
    if mode == "ideal":
        return trace.c_proj, float(trace.times[1] - trace.times[0])
    het = het or HeterodyneConfig()
    rng = np.random.default_rng(seed)
    rows = []
    from .model import projection_angle

    for i in range(trace.n_shots):
        d = fast_demodulate((trace.times, trace.field[i]), het, rng)
        ang = float(np.mean(projection_angle(trace.eff_detuning[i], trace.config.kappa)))
        rows.append(np.real(d.amplitudes * np.exp(-1j * ang)))
    return np.array(rows), het.step


def _analysis_slice(times: np.ndarray, config: ExperimentConfig, start: float, stop: float, dt: float) -> slice:
    t = times - config.ramp_time
    idx = np.nonzero((t >= start - 1e-12) & (t < stop - 1e-12))[0]
    if idx.size == 0:
        raise SweepError("analysis window lies outside the recorded trace")
    return slice(int(idx[0]), int(idx[-1]) + 1)


def run_point(spec: SweepSpec, coords: dict) -> dict:
    """Simulate and analyse one grid point; returns arrays and result rows (no I/O)."""
    cfg = spec.config_for(coords)
    seed = point_seed(spec.seed, coords)
    seeds = [shot_seed(seed, i) for i in range(spec.shots)]
    trace = simulate_ensemble(cfg, seeds)
    het = HeterodyneConfig(shot_noise_level=spec.shot_noise_level) if spec.detection == "fast" else None
    cp, dt = detect_c_proj(trace, spec.detection, het, seed)
    if spec.detection == "ideal":
        sl = _analysis_slice(trace.times, cfg, spec.analysis_start, spec.analysis_stop, dt)
    else:
        centres = trace.times[0] + het.window / 2.0 + np.arange(cp.shape[1]) * het.step
        sl = _analysis_slice(centres, cfg, spec.analysis_start, spec.analysis_stop, dt)
    window = cp[:, sl]
    rows, samples = [], {}
    hold = trace.hold_mask(spec.analysis_start, spec.analysis_stop)
    t_kin = float(trace.kinetic_temperature[hold].mean())
    for tav in spec.averaging_times:
        row = {
            "n_atoms": cfg.n_atoms, "rabi_peak": cfg.rabi_peak, "delta_pa": cfg.delta_pa, "delta_pc": cfg.delta_pc,
            "tweezer_bias": cfg.tweezer_bias, "temperature": cfg.temperature, "averaging_time": tav,
            "rabi_ratio": coords.get("rabi_ratio"), "seed": seed, "kinetic_temperature": t_kin,
        }
        x = moving_average(window, tav, dt).ravel()
        samples[tav] = x
        row.update(n_samples=int(x.size), mean_c_proj=float(x.mean()), std_c_proj=float(x.std()))
        try:
            f = fit_boltzmann(x)
            boot = bootstrap_b(x, spec.n_boot, np.random.default_rng(seed))
            peaks = f.maxima
            row.update(b=float(f.b_coeff_), d=float(f.d_coeff_), b_std=float(boot.std),
                       b_flagged=bool(boot.flagged), peak=float(max(abs(p) for p in peaks)),
                       residual=float(f.residual_), fit_status="ok")
        except (FitError, InsufficientSamplesError) as exc:
            row.update(b=float("nan"), d=float("nan"), b_std=float("nan"), b_flagged=True, peak=float("nan"),
                       residual=float("nan"), fit_status=f"failed: {exc}")
        rows.append(row)
    return {"rows": rows, "samples": samples, "times": trace.times, "c_proj": trace.c_proj,
            "field": trace.field, "kinetic_z": trace.kinetic_z}


# -- persistence --------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_point(directory: Path, out: dict) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, times=out["times"], c_proj=out["c_proj"], field=out["field"], kinetic_z=out["kinetic_z"])
    (directory / "traces.npz").write_bytes(buf.getvalue())
    lines = ["averaging_time,index,c_proj"]
    for tav, x in out["samples"].items():
        lines += [f"{tav!r},{i},{v!r}" for i, v in enumerate(x)]
    (directory / "samples.csv").write_text("\n".join(lines) + "\n")
    (directory / "result.json").write_text(json.dumps(out["rows"], indent=1, sort_keys=True) + "\n")
    return {name: _sha256(directory / name) for name in ("traces.npz", "samples.csv", "result.json")}


@dataclass
class RunManifest:
    tool_version: str
    config_digest: str
    spec: dict
    points: list = field(default_factory=list)  # dicts: key, coords, seed, status, files, started, finished, error

    def to_yaml(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=False)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        data = yaml.safe_load(path.read_text())
        return cls(**data)

    @property
    def failed(self) -> list:
        return [p for p in self.points if p["status"] == "failed"]


def _coords_plain(coords: dict) -> dict:
    return {k: (int(v) if k == "n_atoms" else float(v)) for k, v in coords.items()}


def _done(entry: dict, directory: Path) -> bool:
    if entry.get("status") != "done":
        return False
    for name, digest in (entry.get("files") or {}).items():
        p = directory / name
        if not p.exists() or _sha256(p) != digest:
            return False
    return True


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise SweepError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def run_sweep(spec: SweepSpec, workers: Optional[int] = None) -> RunManifest:
    """Run (or resume) a sweep; completed points with intact files are skipped.

    Points execute in a process pool; files and the manifest are written by
    this process only, in grid order. One sweep per directory (file lock).
    """
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise SweepLockedError(f"{out} is in use by another sweep") from exc
    try:
        return _run_locked(spec, out, workers or worker_count())
    finally:
        lock.release()


def _run_locked(spec: SweepSpec, out: Path, workers: int) -> RunManifest:
    mpath = out / "manifest.yaml"
    previous = {}
    if mpath.exists():
        old = RunManifest.load(mpath)
        previous = {p["key"]: p for p in old.points}
    coords_list = spec.points()
    manifest = RunManifest(__version__, spec.base.digest(), spec.to_mapping())
    todo = []
    for coords in coords_list:
        key = point_key(coords)
        prev = previous.get(key)
        pdir = out / "points" / key
        if prev is not None and _done(prev, pdir):
            manifest.points.append(prev)
        else:
            entry = {"key": key, "coords": _coords_plain(coords), "seed": point_seed(spec.seed, coords),
                     "status": "pending", "files": {}, "started": None, "finished": None, "error": None}
            manifest.points.append(entry)
            todo.append((entry, coords))

    def commit(entry, result, error):
        entry["finished"] = _now()
        if error is not None:
            entry["status"], entry["error"] = "failed", error
        else:
            files = _write_point(out / "points" / entry["key"], result)
            entry["status"], entry["files"] = "done", files
        mpath.write_text(manifest.to_yaml())

    for entry, _ in todo:
        entry["started"] = _now()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_point, spec, c) for _, c in todo]
            for (entry, _), fut in zip(todo, futures):
                try:
                    commit(entry, fut.result(), None)
                except Exception as exc:  # recorded per point, sweep continues
                    commit(entry, None, f"{type(exc).__name__}: {exc}")
    else:
        for entry, c in todo:
            try:
                result = run_point(spec, c)
            except Exception as exc:
                commit(entry, None, f"{type(exc).__name__}: {exc}")
                continue
            commit(entry, result, None)
    mpath.write_text(manifest.to_yaml())
    write_results(out, manifest)
    return manifest


def collect_rows(out: Path, manifest: RunManifest) -> list[dict]:
    rows = []
    for entry in manifest.points:
        if entry["status"] != "done":
            continue
        rows.extend(json.loads((out / "points" / entry["key"] / "result.json").read_text()))
    return rows


RESULT_COLUMNS = ("n_atoms", "rabi_peak", "rabi_ratio", "delta_pa", "delta_pc", "tweezer_bias", "temperature",
                  "averaging_time", "seed", "n_samples", "mean_c_proj", "std_c_proj", "b", "b_std", "d", "peak",
                  "residual", "b_flagged", "kinetic_temperature", "fit_status")


def write_table(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    """CSV (repr floats, header row) or JSON lines, by suffix."""
    if path.suffix == ".jsonl":
        path.write_text("".join(json.dumps({c: r.get(c) for c in columns}) + "\n" for r in rows))
        return
    lines = [",".join(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c)
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for h, v in zip(head, cells):
            if v == "":
                row[h] = None
                continue
            try:
                row[h] = int(v) if v.lstrip("-").isdigit() else float(v)
            except ValueError:
                row[h] = v == "True" if v in ("True", "False") else v
        out.append(row)
    return out


def write_results(out: Path, manifest: RunManifest) -> list[dict]:
    rows = collect_rows(out, manifest)
    write_table(out / "results.csv", rows, RESULT_COLUMNS)
    write_table(out / "results.jsonl", rows, RESULT_COLUMNS)
    plot = []
    for r in rows:
        series = f"N={r['n_atoms']},avg={r['averaging_time'] / US:g}us"
        x = r["rabi_peak"] / MHZ
        if r.get("peak") is not None and not math.isnan(r["peak"]):
            plot.append({"figure": "bifurcation", "series": series, "x": x, "y": r["peak"], "yerr": None})
            plot.append({"figure": "bifurcation", "series": series, "x": x, "y": -r["peak"], "yerr": None})
        plot.append({"figure": "b_coefficient", "series": series, "x": x, "y": r["b"], "yerr": r["b_std"]})
    write_table(out / "plot_data.csv", plot, ("figure", "series", "x", "y", "yerr"))
    return rows


# -- report ---------------------------------------------------------------------------


def report(out: str | Path, group_by: Sequence[str] = ("n_atoms", "delta_pa", "averaging_time")) -> dict:
    """Critical points per group from a finished sweep, plus N and |Delta_pa| scaling fits.

    Writes ``critical_points.csv``, ``scaling.json`` and appends the critical
    point series to ``plot_data.csv``.
    """
    from .criticality import NoSignChangeError, interpolate_critical
    from .observables import ObservableError, linear_fit, power_law_fit

    out = Path(out)
    rows = read_csv(out / "results.csv")
    groups: dict[tuple, list] = {}
    for r in rows:
        if r.get("b") is None or isinstance(r["b"], str) or math.isnan(r["b"]):
            continue
        groups.setdefault(tuple(r[g] for g in group_by), []).append(r)
    table = []
    for key, members in sorted(groups.items()):
        rec = dict(zip(group_by, key))
        pts = [(m["rabi_peak"], m["b"], 0.0 if m["b_std"] is None or math.isnan(m["b_std"]) else m["b_std"])
               for m in members]
        try:
            est = interpolate_critical(pts)
            rec.update(omega_c=est.omega_c, sigma_stat=est.sigma_stat, n_crossings=est.n_crossings, status="ok")
        except NoSignChangeError as exc:
            rec.update(omega_c=float("nan"), sigma_stat=float("nan"), n_crossings=0, status=str(exc))
        ordered = sorted(members, key=lambda m: m["rabi_peak"])
        om = np.array([m["rabi_peak"] for m in ordered])
        tk = np.array([m["kinetic_temperature"] for m in ordered])
        # temperature at the crossing; the grid mean when there is none
        rec["kinetic_temperature"] = float(np.interp(rec["omega_c"], om, tk)) if rec["status"] == "ok" else float(tk.mean())
        table.append(rec)
    cols = tuple(group_by) + ("omega_c", "sigma_stat", "n_crossings", "kinetic_temperature", "status")
    write_table(out / "critical_points.csv", table, cols)

    fits = {}
    ok = [r for r in table if r["status"] == "ok"]
    for tav in sorted({r.get("averaging_time") for r in ok}, key=lambda v: (v is None, v)):
        sub = [r for r in ok if r.get("averaging_time") == tav]
        label = "all" if tav is None else f"{tav / US:g}us"
        for axis, fitter in (("n_atoms", power_law_fit), ("delta_pa", None)):
            vals = {r[axis] for r in sub}
            if len(vals) < 4:
                continue
            others = [g for g in group_by if g not in (axis, "averaging_time")]
            if any(len({r[g] for r in sub}) > 1 for g in others):
                continue
            x = np.array([r[axis] for r in sub], dtype=float)
            y = np.array([r["omega_c"] for r in sub])
            s = np.array([r["sigma_stat"] for r in sub])
            try:
                f = fitter(x, y, s) if fitter else linear_fit(np.abs(x), y, s)
            except (ObservableError, ValueError) as exc:
                fits[f"{axis}/{label}"] = {"error": str(exc)}
                continue
            fits[f"{axis}/{label}"] = dataclasses.asdict(f)
    (out / "scaling.json").write_text(json.dumps(fits, indent=1, sort_keys=True, default=float) + "\n")

    plot = read_csv(out / "plot_data.csv") if (out / "plot_data.csv").exists() else []
    plot = [p for p in plot if p["figure"] != "critical_points"]
    for r in ok:
        series = ",".join(f"{g}={r[g]!r}" for g in group_by if g != "n_atoms")
        plot.append({"figure": "critical_points", "series": series, "x": float(r["n_atoms"]),
                     "y": r["omega_c"] / MHZ, "yerr": r["sigma_stat"] / MHZ})
    write_table(out / "plot_data.csv", plot, ("figure", "series", "x", "y", "yerr"))
    return {"critical_points": table, "fits": fits}
