"""Command-line entry point: ``selforg <command> [options]``.

Exit status: 0 on success, 1 when some sweep points failed, 2 on invalid
input or any other error (the message names the offending field).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, config_from_mapping, dump_config, load_config, parse_quantity
from .constants import US
from .criticality import CriticalPointEstimator, bootstrap_b, fit_boltzmann
from .dynamics import shot_seed, simulate_ensemble
from .model import DebyeWallerEpsilon, critical_pump
from .observables import (
    classify_ensemble, decay_time, dominant_mode_chi, g1, oscillation_frequency, saturation_chi,
    simulate_susceptibility,
)
from .signal_chain import (
    FrameSequence, HeterodyneConfig, LoDrift, demodulate, load_voltage, moving_average, run_sequence, write_demod,
)


def _time(text: str) -> float:
    return parse_quantity(text if any(c.isalpha() for c in text) else f"{text} us", "time", "averaging-time")


def build_config(path: Optional[str], overrides: Sequence[str]) -> ExperimentConfig:
    cfg = load_config(path) if path else ExperimentConfig()
    if overrides:
        data = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            data[key.strip()] = yaml.safe_load(value)
        cfg = config_from_mapping(data, cfg)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


# -- commands -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = build_config(args.config, args.set)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    trace = simulate_ensemble(cfg, [shot_seed(args.seed, i) for i in range(args.shots)])
    (out / "config.yaml").write_text(dump_config(cfg))
    np.savez(out / "traces.npz", times=trace.times, rabi=trace.rabi, theta=trace.theta,
             eff_detuning=trace.eff_detuning, field=trace.field, c_proj=trace.c_proj, kinetic_z=trace.kinetic_z)
    hold = trace.hold_mask(0.0)
    dt = float(trace.times[1] - trace.times[0])
    summary = {"shots": args.shots, "seed": args.seed, "digest": cfg.digest(),
               "kinetic_temperature_hold": float(trace.kinetic_temperature[hold].mean()),
               "critical_pump_dw": critical_pump(cfg, DebyeWallerEpsilon()),
               "mean_abs_c_proj_hold": float(np.abs(trace.c_proj[:, hold]).mean())}
    if args.averaging_time:
        x = moving_average(trace.c_proj[:, hold], _time(args.averaging_time), dt).ravel()
        np.savetxt(out / "samples.csv", x, header="c_proj", comments="")
        summary["n_samples"] = int(x.size)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, default=float))
    return 0


def cmd_demod(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    het = HeterodyneConfig(shot_noise_level=args.shot_noise)
    if args.voltage:
        traces = [demodulate(load_voltage(p), het) for p in args.voltage]
        write_demod(out / f"demod.{args.format}", traces)
        print(f"demodulated {len(traces)} file(s)")
        return 0
    cfg = build_config(args.config, args.set)
    drift = LoDrift(rate=args.drift / 1e-3 if args.drift else 0.0)
    seq = FrameSequence.standard(cfg, n_node=args.shots)
    nodes, _ = run_sequence(seq, het, args.seed, drift, fast=not args.rf)
    write_demod(out / f"demod.{args.format}", nodes)
    print(f"calibrated {len(nodes)} node frame(s)")
    return 0


def _read_samples(path: Path) -> tuple[Optional[np.ndarray], np.ndarray]:
    """(omegas or None, samples). ``.npy`` holds samples; CSV holds ``c_proj`` or ``omega,c_proj``."""
    if path.suffix == ".npy":
        return None, np.load(path).ravel()
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    head = [h.strip() for h in lines[0].split(",")]
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=float)
    if head == ["c_proj"]:
        return None, body[:, 0]
    if head == ["omega", "c_proj"]:
        return body[:, 0], body[:, 1]
    raise ConfigError(str(path), "expected a 'c_proj' or 'omega,c_proj' header")


def fit_record(omegas: Optional[np.ndarray], samples: np.ndarray, n_boot: int, seed: int) -> dict:
    """Same numbers as the library estimators on the same inputs."""
    if omegas is None:
        f = fit_boltzmann(samples)
        boot = bootstrap_b(samples, n_boot, np.random.default_rng(seed))
        return {"b": f.b_coeff_, "d": f.d_coeff_, "b_std": boot.std, "b_flagged": boot.flagged,
                "maxima": list(f.maxima), "residual": f.residual_, "n_samples": f.n_samples_}
    levels = np.unique(omegas)
    sets = [samples[omegas == o] for o in levels]
    est = CriticalPointEstimator(n_boot=n_boot, random_state=seed).fit(levels, sets)
    rec = est.estimate_.to_dict()
    rec["table"] = [{"omega": r[0], "b": r[1], "b_std": r[2], "d": r[3]} for r in est.table_]
    return rec


def cmd_fit(args) -> int:
    omegas, samples = _read_samples(Path(args.samples))
    rec = fit_record(omegas, samples, args.n_boot, args.seed)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "fit.json", rec)
    print(json.dumps(rec, default=float))
    return 0


def cmd_gone(args) -> int:
    data = np.load(Path(args.traces))
    times, cp = data["times"], data["c_proj"]
    dt = float(times[1] - times[0])
    cfg = load_config(Path(args.traces).with_name("config.yaml")) if Path(args.traces).with_name(
        "config.yaml").exists() else ExperimentConfig()
    t = times - cfg.ramp_time
    hold = (t >= -1e-12) & (t < (args.window * US if args.window else math.inf) - 1e-12)
    x = cp[:, hold]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    curve = g1(x, 0, dt)
    np.savetxt(out / "g1.csv", np.column_stack([curve.times, curve.g1]), delimiter=",", header="tau,g1",
               comments="")
    tav = _time(args.averaging_time or "5 us")
    avg = moving_average(x, tav, dt, stride=tav)
    stats = classify_ensemble(avg, tav)
    rows = ["shot,classification,switches,mean_dwell"]
    rows += [f"{i},{s.classification},{s.switches},{s.mean_dwell!r}" for i, s in enumerate(stats)]
    (out / "dwell.csv").write_text("\n".join(rows) + "\n")
    summary = {"decay_time": decay_time(curve), "oscillation_frequency": oscillation_frequency(curve),
               "g1_flagged": curve.flagged, "noise_floor": curve.noise_floor,
               "classes": {c: sum(s.classification == c for s in stats) for c in
                           ("symmetry-breaking", "switching", "rapid-oscillation")}}
    _write_json(out / "gone.json", summary)
    print(json.dumps(summary, default=float))
    return 0


def cmd_susceptibility(args) -> int:
    cfg = build_config(args.config, args.set)
    omega_c = critical_pump(cfg, DebyeWallerEpsilon())
    if args.omega_ratio is not None:
        cfg = cfg.replace(rabi_peak=args.omega_ratio * omega_c)
    res = simulate_susceptibility(cfg, omega_c, shots=args.shots, seed=args.seed)
    rec = res.to_dict()
    rec.update(saturation=saturation_chi(cfg), dominant_mode_oracle=dominant_mode_chi(cfg, cfg.rabi_peak / omega_c))
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "susceptibility.json", rec)
    print(json.dumps(rec, default=float))
    return 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep, spec_from_mapping

    raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "sweep file must hold a mapping")
    if args.set:
        base = raw.get("base") or {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            base[key.strip()] = yaml.safe_load(value)
        raw["base"] = base
    if args.shots is not None:
        raw["shots"] = args.shots
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.averaging_time:
        raw["averaging_times"] = [a if any(c.isalpha() for c in a) else f"{a} us" for a in args.averaging_time]
    spec = spec_from_mapping(raw, Path(args.output) if args.output else None)
    manifest = run_sweep(spec, args.workers)
    failed = manifest.failed
    done = sum(p["status"] == "done" for p in manifest.points)
    print(f"{done}/{len(manifest.points)} points done, {len(failed)} failed")
    for p in failed:
        print(f"  {p['key']} {p['coords']}: {p['error']}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args) -> int:
    from .sweep import report

    rep = report(args.directory)
    for r in rep["critical_points"]:
        print(json.dumps(r, default=float))
    for name, f in rep["fits"].items():
        print(name, json.dumps(f, default=float))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selforg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, shots=32, seed=0, config=True):
        if config:
            sp.add_argument("--config", help="YAML experiment config (unit-suffixed values)")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config field, e.g. --set 'temperature=20 uK'")
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--shots", type=int, default=shots)

    sp = sub.add_parser("simulate", help="simulate a shot ensemble")
    common(sp)
    sp.add_argument("--averaging-time", help="also write block-averaged hold samples (e.g. '5 us')")
    sp.add_argument("--output", "-o", default="sim-out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("demod", help="demodulate voltage files or run a calibrated frame sequence")
    common(sp, shots=10)
    sp.add_argument("--voltage", nargs="*", help="voltage trace files to demodulate")
    sp.add_argument("--drift", type=float, default=0.0, help="LO drift in rad per ms for --sequence runs")
    sp.add_argument("--shot-noise", type=float, default=1e-3)
    sp.add_argument("--rf", action="store_true", help="synthesize and demodulate the full RF trace")
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    sp.add_argument("--output", "-o", default="demod-out")
    sp.set_defaults(func=cmd_demod)

    sp = sub.add_parser("fit", help="Boltzmann fit or critical point from a sample file")
    sp.add_argument("samples", help=".npy or CSV with 'c_proj' or 'omega,c_proj' columns")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-boot", type=int, default=10)
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("gone", help="g1 coherence and dwell statistics of simulated traces")
    sp.add_argument("traces", help="traces.npz written by 'simulate'")
    sp.add_argument("--averaging-time", help="block length for dwell analysis (default 5 us)")
    sp.add_argument("--window", type=float, help="analysis span after the ramp, in us")
    sp.add_argument("--output", "-o", default="gone-out")
    sp.set_defaults(func=cmd_gone)

    sp = sub.add_parser("susceptibility", help="finite-difference susceptibility at one pump strength")
    common(sp, shots=100)
    sp.add_argument("--omega-ratio", type=float, help="pump relative to the Debye-Waller critical pump")
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_susceptibility)

    sp = sub.add_parser("sweep", help="run or resume a parameter sweep")
    sp.add_argument("spec", help="YAML sweep file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--shots", type=int)
    sp.add_argument("--averaging-time", nargs="*")
    sp.add_argument("--workers", type=int, help="overrides SELFORG_WORKERS")
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="critical points and scaling fits of a finished sweep")
    sp.add_argument("directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
