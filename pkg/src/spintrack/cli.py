"""Batch command line: simulate, track, calibrate, sweep, optimize-weights.

Units everywhere: time in us, angles in rad, Larmor frequency in rad/us,
atom and photon numbers dimensionless, spin variances in spin^2.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .calibration import (
    CalibrationConstants,
    CalibrationFitError,
    DegenerateGeometryError,
    ElongatedCloud,
    GaussianBeam,
    PropagationError,
    StroboscopicConfig,
    compute_alpha,
    coupling_moments,
    fit_mu1,
    fit_mu2,
)
from .estimator import ConditioningError, EnsembleError, FitError, RankError, WeightParams, default_te_grid, track_ensemble
from .records import (
    RecordError,
    json_text,
    read_points_csv,
    read_traces,
    report_csv,
    report_summary,
    residuals_csv,
    write_text,
    write_traces,
)
from .spin_core import CoherentSpinStateSpec, ProbeCoupling, StateValidityError
from .trajectory_sim import PulseTrainConfig, TraceError, simulate_ensemble
from .tuning import SWEEP_CANDIDATES, SWEEP_T_E, TUNED_WEIGHTS, optimize_weights, sweep_delta_t

log = logging.getLogger("spintrack")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

UNITS = {
    "time": "us",
    "angle": "rad",
    "larmor_omega": "rad/us",
    "g": "rad/spin",
    "atoms": "dimensionless",
    "photons": "dimensionless",
    "variance": "spin^2",
}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

_defaults_train = PulseTrainConfig(ProbeCoupling(g=1.0, photons_v=1.0), CoherentSpinStateSpec(1.0))

# key -> (type, default); a default of REQUIRED marks a mandatory key
REQUIRED = object()
SCHEMA: dict[str, tuple[type, Any]] = {
    "g": (float, REQUIRED),
    "atoms_mean": (float, REQUIRED),
    "photons_v": (float, REQUIRED),
    "repetitions": (int, REQUIRED),
    "photons_h": (float, 0.0),
    "eta": (float, 0.0),
    "p_return": (float, 0.0),
    "atoms_poisson": (bool, True),
    "pump_efficiency": (float, 1.0),
    "projection_noise": (bool, True),
    "pulse_interval": (float, _defaults_train.pulse_interval),
    "pulse_count": (int, _defaults_train.pulse_count),
    "larmor_omega": (float, _defaults_train.larmor_omega),
    "t2_gradient": (float, _defaults_train.t2_gradient),
    "omega_jitter_rms": (float, _defaults_train.omega_jitter_rms),
    "phi0_offset": (float, 0.0),
    "phi0_drift_rms": (float, 0.0),
    "readout_scale": (float, 1.0),
    "backaction": (bool, True),
    "seed": (int, 0),
    "delta_t": (float, 270.0),
    "te_start": (float, 30.0),
    "te_stop": (float, 990.0),
    "te_step": (float, 40.0),
    "weights_amp": (float, TUNED_WEIGHTS.amp),
    "weights_width": (float, TUNED_WEIGHTS.width),
    "weights_slope": (float, TUNED_WEIGHTS.imbalance_slope),
    "optimize_weights": (bool, False),
    "optimize_t_e": (list, [500.0]),
    "sweep_candidates": (list, list(SWEEP_CANDIDATES)),
    "sweep_t_e": (list, list(SWEEP_T_E)),
    "trace_layout": (str, "long"),
    "output_dir": (str, "out"),
    "jobs": (int, 1),
}
# keys that do not change results and stay out of the manifest hash
_NON_SEMANTIC = {"output_dir", "jobs"}


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{key}: expected a list of numbers")
        return [float(v) for v in value]
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_config(path: Path | None, required: bool = True) -> dict[str, Any]:
    """Parse and validate a flat TOML run configuration."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (kind, default) in SCHEMA.items():
        if key in raw:
            cfg[key] = _coerce(key, raw[key], kind)
        elif default is REQUIRED:
            if required:
                raise ConfigError(f"missing required config key: {key}")
        else:
            cfg[key] = list(default) if isinstance(default, list) else default
    if cfg.get("trace_layout") not in ("long", "files"):
        raise ConfigError("trace_layout must be 'long' or 'files'")
    if required and cfg["repetitions"] < 1:
        raise ConfigError("repetitions must be at least 1")
    return cfg


def pulse_train(cfg: dict[str, Any]) -> PulseTrainConfig:
    try:
        return PulseTrainConfig(
            coupling=ProbeCoupling(
                g=cfg["g"], photons_v=cfg["photons_v"], photons_h=cfg["photons_h"],
                eta=cfg["eta"], p_return=cfg["p_return"],
            ),
            css=CoherentSpinStateSpec(
                atoms_mean=cfg["atoms_mean"], atoms_poisson=cfg["atoms_poisson"],
                pump_efficiency=cfg["pump_efficiency"], projection_noise=cfg["projection_noise"],
            ),
            pulse_interval=cfg["pulse_interval"],
            pulse_count=cfg["pulse_count"],
            larmor_omega=cfg["larmor_omega"],
            t2_gradient=cfg["t2_gradient"],
            omega_jitter_rms=cfg["omega_jitter_rms"],
            phi0_offset=cfg["phi0_offset"],
            phi0_drift_rms=cfg["phi0_drift_rms"],
            readout_scale=cfg["readout_scale"],
            backaction=cfg["backaction"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def weights_from(cfg: dict[str, Any]) -> WeightParams:
    try:
        return WeightParams(cfg["weights_amp"], cfg["weights_width"], cfg["weights_slope"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: dict[str, Any]) -> str:
    semantic = {k: v for k, v in sorted(cfg.items()) if k not in _NON_SEMANTIC}
    return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict[str, Any]) -> Path:
    semantic = {k: v for k, v in sorted(cfg.items()) if k not in _NON_SEMANTIC}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.get("seed"),
        "config_sha256": config_hash(cfg),
        "config": semantic,
        "units": UNITS,
    }
    return write_text(out / "manifest.json", json_text(manifest))


# -- commands --------------------------------------------------------------------


@dataclass
class Context:
    config: Path | None
    seed: int | None
    out: Path | None
    jobs: int | None

    def resolve(self, required: bool = True) -> tuple[dict[str, Any], Path, int]:
        cfg = load_config(self.config, required=required)
        if self.seed is not None:
            cfg["seed"] = self.seed
        out = self.out if self.out is not None else Path(cfg["output_dir"])
        jobs = self.jobs if self.jobs is not None else cfg["jobs"]
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")
        return cfg, out, jobs


def _require_config(ctx: Context) -> None:
    if ctx.config is None:
        raise ConfigError("this command needs --config")


def cmd_simulate(ctx: Context, args) -> int:
    _require_config(ctx)
    cfg, out, jobs = ctx.resolve()
    train = pulse_train(cfg)
    write_manifest(out, "simulate", cfg)
    traces = simulate_ensemble(train, cfg["repetitions"], jobs=jobs)
    paths = write_traces(out, traces, cfg["trace_layout"])
    log.info("wrote %d files to %s", len(paths), out)
    return 0


def _te_grid(cfg) -> list[float]:
    if not (cfg["te_step"] > 0 and cfg["te_stop"] >= cfg["te_start"]):
        raise ConfigError("invalid t_e grid")
    return default_te_grid(cfg["te_start"], cfg["te_stop"], cfg["te_step"])


def _optimized(traces, cfg, weights, jobs) -> tuple[WeightParams, dict]:
    res = optimize_weights(traces, cfg["g"], cfg["optimize_t_e"], cfg["delta_t"], init=weights, seed=cfg["seed"])
    info = {
        "amp": res.params.amp,
        "width": res.params.width,
        "imbalance_slope": res.params.imbalance_slope,
        "objective": res.value,
        "evaluations": res.evaluations,
        "restarts": res.restarts,
        "converged": res.converged,
        "history": res.history,
    }
    return res.params, info


def cmd_track(ctx: Context, args) -> int:
    _require_config(ctx)
    cfg, out, jobs = ctx.resolve()
    source = Path(args.traces) if args.traces else out
    traces = read_traces(source)
    write_manifest(out, "track", cfg)
    weights = weights_from(cfg)
    if cfg["optimize_weights"]:
        weights, info = _optimized(traces, cfg, weights, jobs)
        write_text(out / "weights.json", json_text(info))
    report = track_ensemble(traces, cfg["g"], _te_grid(cfg), cfg["delta_t"], weights, jobs=jobs)
    write_text(out / "report.csv", report_csv(report))
    write_text(out / "residuals.csv", residuals_csv(report))
    summary = report_summary(report)
    summary["weights"] = asdict(weights)
    summary["n_traces"] = len(traces)
    write_text(out / "summary.json", json_text(summary))
    return 0


def _ensemble_for(ctx: Context, args, cfg, jobs):
    if getattr(args, "traces", None):
        return read_traces(Path(args.traces))
    return simulate_ensemble(pulse_train(cfg), cfg["repetitions"], jobs=jobs)


def cmd_sweep(ctx: Context, args) -> int:
    _require_config(ctx)
    cfg, out, jobs = ctx.resolve()
    if args.candidates:
        try:
            cfg["sweep_candidates"] = [float(c) for c in args.candidates.split(",")]
        except ValueError:
            raise ConfigError("--candidates must be a comma-separated list of numbers") from None
    write_manifest(out, "sweep", cfg)
    traces = _ensemble_for(ctx, args, cfg, jobs)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = sweep_delta_t(traces, cfg["g"], cfg["sweep_t_e"], cfg["sweep_candidates"], weights_from(cfg), jobs=jobs)
    for w in caught:
        log.warning("%s", w.message)
    if not res.rows:
        raise EnsembleError("no sweep candidate could be evaluated")
    write_text(out / "sweep.csv", res.to_csv())
    write_text(out / "sweep_summary.json", json_text({
        "argmin_us": res.argmin,
        "interior_minimum": res.interior_minimum,
        "skipped": res.skipped,
        "t_e_us": cfg["sweep_t_e"],
    }))
    return 0


def cmd_optimize(ctx: Context, args) -> int:
    _require_config(ctx)
    cfg, out, jobs = ctx.resolve()
    write_manifest(out, "optimize-weights", cfg)
    traces = _ensemble_for(ctx, args, cfg, jobs)
    _, info = _optimized(traces, cfg, weights_from(cfg), jobs)
    write_text(out / "weights.json", json_text(info))
    return 0


def _emit(ctx: Context, name: str, text: str) -> None:
    sys.stdout.write(text)
    if ctx.out is not None:
        write_text(ctx.out / name, text)


def cmd_calibrate(ctx: Context, args) -> int:
    which = args.which
    if which == "alpha":
        try:
            scfg = StroboscopicConfig(n_pulses=args.np, chi=args.chi, p_return=args.p, photons=args.photons)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        beta, alpha = compute_alpha(scfg)
        consts = CalibrationConstants(alpha=alpha, beta=beta)
    elif which == "mu1":
        fit = fit_mu1(read_points_csv(args.input))
        consts = CalibrationConstants(mu1=fit.mu1, stderr={"mu1": fit.mu1_se})
        extra = {"a0": fit.a0, "a0_se": fit.a0_se}
        _emit(ctx, "calibration_mu1.json", json_text({**json.loads(consts.to_json()), **extra}))
        return 0
    elif which == "mu2":
        fit = fit_mu2(read_points_csv(args.input), args.alpha)
        consts = CalibrationConstants(mu2=fit.mu2, v2=fit.mu2, alpha=args.alpha, stderr={"mu2": fit.mu2_se})
        extra = {"a0": fit.a0, "a1": fit.a1, "a2": fit.a2, "a1_se": fit.a1_se}
        _emit(ctx, "calibration_mu2.json", json_text({**json.loads(consts.to_json()), **extra}))
        return 0
    else:
        cloud = ElongatedCloud(axial_fwhm=args.axial_fwhm, radial_sigma=args.radial_sigma)
        beam = GaussianBeam(g_peak=args.g_peak, waist=args.waist, wavelength=args.wavelength)
        seed = ctx.seed if ctx.seed is not None else 0
        m = coupling_moments(cloud, beam, args.samples, seed)
        consts = CalibrationConstants(mu1=m.mu1, mu2=m.mu2, v2=m.v2, stderr={"mu1": m.mu1_se, "mu2": m.mu2_se})
    _emit(ctx, f"calibration_{which}.json", consts.to_json())
    return 0


# -- argument parsing -------------------------------------------------------------


def _global_flags(sup: bool) -> argparse.ArgumentParser:
    # the flags are accepted before and after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if sup else {"default": None}
    p.add_argument("--config", type=Path, help="flat TOML run configuration", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
    p.add_argument("--out", type=Path, help="output directory (overrides the config)", **kw)
    p.add_argument("--jobs", type=int, help="worker processes; results do not depend on it", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **({"default": argparse.SUPPRESS} if sup else {}))
    return p


def build_parser() -> argparse.ArgumentParser:
    sub_flags = _global_flags(True)
    parser = argparse.ArgumentParser(
        prog="spintrack",
        parents=[_global_flags(False)],
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[sub_flags], help="simulate traces and truth sidecars")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", parents=[sub_flags], help="predictive/confirming tracking report")
    p.add_argument("--traces", help="trace directory or long CSV (default: the output directory)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("sweep", parents=[sub_flags], help="window-length sweep")
    p.add_argument("--traces", help="use these traces instead of simulating")
    p.add_argument("--candidates", help="comma-separated window lengths, us")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize-weights", parents=[sub_flags], help="simplex search of the fit weights")
    p.add_argument("--traces", help="use these traces instead of simulating")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("calibrate", parents=[sub_flags], help="calibration constants as JSON")
    cal = p.add_subparsers(dest="which", required=True)
    a = cal.add_parser("alpha", parents=[sub_flags], help="stroboscopic noise factor alpha = 8 beta")
    a.add_argument("--chi", type=float, default=0.99, help="survival per pulse")
    a.add_argument("--p", type=float, default=0.7, help="return probability of scattered atoms")
    a.add_argument("--np", type=int, default=36, help="number of pulses")
    a.add_argument("--photons", type=float, default=3.15e7, help="photons per pulse")
    m1 = cal.add_parser("mu1", parents=[sub_flags], help="linear fit of mean rotation vs N_A")
    m1.add_argument("--input", type=Path, required=True, help="CSV with columns N_A,value")
    m2 = cal.add_parser("mu2", parents=[sub_flags], help="quadratic fit of rotation variance vs N_A")
    m2.add_argument("--input", type=Path, required=True, help="CSV with columns N_A,value")
    m2.add_argument("--alpha", type=float, required=True)
    mo = cal.add_parser("moments", parents=[sub_flags], help="Monte Carlo coupling moments")
    mo.add_argument("--samples", type=int, default=1_000_000)
    mo.add_argument("--axial-fwhm", type=float, default=4000.0, help="um")
    mo.add_argument("--radial-sigma", type=float, default=33.0, help="um")
    mo.add_argument("--waist", type=float, default=20.0, help="probe waist, um")
    mo.add_argument("--wavelength", type=float, default=0.78, help="um")
    mo.add_argument("--g-peak", type=float, default=1.0, help="on-axis coupling, rad/spin")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx = Context(config=args.config, seed=args.seed, out=args.out, jobs=args.jobs)
    try:
        return args.func(ctx, args)
    except (ConfigError, RecordError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnsembleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TraceError, FitError, RankError, ConditioningError, StateValidityError,
            PropagationError, CalibrationFitError, DegenerateGeometryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
