"""Command-line driver: simulate | calibrate | estimate | sweep.

Exit codes: 0 ok, 2 config error, 3 data error, 4 calibration error,
5 numerical divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .calibration import (
    CalibrationError,
    NotHurwitzError,
    calibrate_noise,
    choose_hyperdiffusion,
    continuous_generator,
    lyapunov_stationary,
    mode_covariance,
    quasistationary_variances,
)
from .kalman import NotPositiveDefiniteError
from .mean_iteration import MeanEvolutionError, run_outer_iteration
from .scenarios import FourierSpec, simulate_twin, twin_measurements
from .simulator import MeasurementSet, SimulationDivergedError, TruthTrajectory
from .spectral import ModelConfig, collocation_points, uniform_sensors

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CALIBRATION, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("diffusivity_kalman")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

MODEL_KEYS = {
    "n_modes": int, "kappa0": float, "mu1": float, "mu2": float,
    "alpha1": float, "beta1": float, "alpha2": float, "beta2": float,
    "dt": float, "n_steps": int,
}
OPTIONAL_MODEL_KEYS = {"sensor_locations", "sensor_sigmas", "theta_prior_var"}
TOP_KEYS = {"model", "truth", "source", "seed", "measurement", "estimate"}
TRUTH_KEYS = {"kappa", "theta_noise", "spinup_steps"}
MEASUREMENT_KEYS = {"every", "seed"}
ESTIMATE_KEYS = {"max_iters", "tol", "window_factor", "damping"}


def _reject_unknown(d: dict, allowed: set, where: str):
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(raw: dict, name: str, allowed: set) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    _reject_unknown(sec, allowed, name)
    return sec


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _reject_unknown(raw, TOP_KEYS, "config")
    return raw


def model_config(raw: dict) -> ModelConfig:
    m = _section(raw, "model", set(MODEL_KEYS) | OPTIONAL_MODEL_KEYS)
    params = {}
    for key, typ in MODEL_KEYS.items():
        if key not in m:
            raise ConfigError(f"missing required field model.{key}")
        try:
            params[key] = typ(m[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.{key} must be a {typ.__name__}") from exc
    if "sensor_locations" not in m:
        raise ConfigError("missing required field model.sensor_locations")
    loc = m["sensor_locations"]
    if isinstance(loc, dict):
        _reject_unknown(loc, {"uniform"}, "model.sensor_locations")
        if "uniform" not in loc:
            raise ConfigError("model.sensor_locations mapping needs 'uniform'")
        loc = uniform_sensors(int(loc["uniform"]))
    params["sensor_locations"] = np.asarray(loc, dtype=float)
    params["sensor_sigmas"] = np.asarray(m.get("sensor_sigmas", 1e-3), dtype=float)
    tpv = m.get("theta_prior_var")
    params["theta_prior_var"] = None if tpv is None else np.asarray(tpv, dtype=float)
    try:
        return ModelConfig(**params)
    except ValueError as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


def _field(spec, where: str, default: FourierSpec) -> FourierSpec:
    if spec is None:
        return default
    if not isinstance(spec, dict):
        raise ConfigError(f"{where} must be a mapping with constant/cos/sin")
    try:
        return FourierSpec.from_dict(spec)
    except KeyError as exc:
        raise ConfigError(f"{where}: {exc.args[0]}") from exc


def scenario(raw: dict, seed_override: int | None = None) -> dict:
    """Everything a command needs, parsed and validated."""
    cfg = model_config(raw)
    truth = _section(raw, "truth", TRUTH_KEYS)
    meas = _section(raw, "measurement", MEASUREMENT_KEYS)
    est = _section(raw, "estimate", ESTIMATE_KEYS)
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    every = int(meas.get("every", 1))
    if every < 1:
        raise ConfigError("measurement.every must be >= 1")
    return {
        "config": cfg,
        "kappa": _field(truth.get("kappa"), "truth.kappa", FourierSpec(cfg.kappa0)),
        "source": _field(raw.get("source"), "source", FourierSpec()),
        "theta_noise": bool(truth.get("theta_noise", False)),
        "spinup_steps": truth.get("spinup_steps"),
        "seed": seed,
        "measurement_seed": int(meas.get("seed", seed)),
        "measure_every": every,
        "max_iters": int(est.get("max_iters", 10)),
        "tol": float(est.get("tol", 1e-4)),
        "window_factor": float(est.get("window_factor", 4.0)),
        "damping": float(est.get("damping", 0.5)),
    }


# ---------------------------------------------------------------------------
# persistence


def _header(columns: list[str]) -> list[str]:
    return [f"# format_version={FORMAT_VERSION}", ",".join(columns)]


def write_csv(path: Path, columns: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        fh.write("\n".join(_header(columns)) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _field_triples(times: np.ndarray, values: np.ndarray):
    x = collocation_points((values.shape[1] - 1) // 2)
    for i, t in enumerate(times):
        for j, xv in enumerate(x):
            yield (float(xv), float(t), float(values[i, j]))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "package": pkg}


def write_manifest(out: Path, command: str, raw: dict, sc: dict, timings: dict,
                   files: list[Path], convergence=None) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": raw,
        "seeds": {"truth": sc["seed"], "measurement": sc["measurement_seed"]} if sc else {},
        "versions": _versions(),
        "timings": timings,
        "convergence": convergence or [],
        "files": {p.name: _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def save_truth(out: Path, truth: TruthTrajectory) -> Path:
    path = out / "truth.npz"
    np.savez(path, format_version=np.array(FORMAT_VERSION), times=truth.times,
             temperature=truth.temperature, theta=truth.theta,
             kappa=truth.kappa_values(), x=collocation_points(truth.n_modes))
    return path


def load_truth(path: Path) -> TruthTrajectory:
    with np.load(path) as z:
        return TruthTrajectory(z["times"], z["temperature"], z["theta"], None)


def save_measurements(out: Path, meas: MeasurementSet) -> Path:
    path = out / "measurements.csv"
    cols = ["step", "time"] + [f"y{j}" for j in range(meas.values.shape[0])]
    rows = ([int(s), float(t)] + [float(v) for v in meas.values[:, j]]
            for j, (s, t) in enumerate(zip(meas.steps, meas.times)))
    write_csv(path, cols, rows)
    return path


def load_measurements(path: Path, config: ModelConfig) -> MeasurementSet:
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"measurement file not found: {path}") from exc
    body = [ln for ln in lines if not ln.startswith("#")]
    if not body:
        raise DataError("measurement file has no header row")
    reader = csv.reader(body)
    header = next(reader)
    n_y = len(header) - 2
    if header[:2] != ["step", "time"] or n_y < 1:
        raise DataError("measurement header must be step,time,y0,...")
    if n_y != config.n_sensors:
        raise DataError(f"measurements have {n_y} sensor columns but config has {config.n_sensors} sensors")
    steps, times, values = [], [], []
    for idx, row in enumerate(reader):
        if len(row) != len(header):
            raise DataError(f"measurement row {idx} has {len(row)} fields, expected {len(header)}")
        try:
            nums = [float(v) for v in row]
        except ValueError as exc:
            raise DataError(f"measurement row {idx} is not numeric") from exc
        if not np.all(np.isfinite(nums)):
            raise DataError(f"measurement row {idx} contains NaN or inf")
        step = int(nums[0])
        if step != nums[0] or not 1 <= step <= config.n_steps:
            raise DataError(f"measurement row {idx} has step {nums[0]} outside 1..{config.n_steps}")
        steps.append(step)
        times.append(nums[1])
        values.append(nums[2:])
    if not steps:
        raise DataError("measurement file has no data rows")
    if len(set(steps)) != len(steps):
        raise DataError("duplicate measurement steps")
    return MeasurementSet(np.array(steps), np.array(times), np.array(values).T,
                          config.sensor_locations.copy(), config.sensor_sigmas.copy())


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(raw: dict, out: Path, seed: int | None = None,
                 measure_every: int | None = None) -> int:
    sc = scenario(raw, seed)
    if measure_every is not None:
        sc["measure_every"] = measure_every
    cfg = sc["config"]
    t0 = time.perf_counter()
    truth = simulate_twin(cfg, sc["kappa"], sc["source"], seed=sc["seed"],
                          theta_noise=sc["theta_noise"], spinup_steps=sc["spinup_steps"])
    meas = twin_measurements(truth, cfg, seed=sc["measurement_seed"], measure_every=sc["measure_every"])
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    files = [save_truth(out, truth), save_measurements(out, meas)]
    write_manifest(out, "simulate", raw, sc, {"simulate_s": elapsed}, files)
    log.info("wrote truth and %d measurement columns to %s", meas.steps.size, out)
    return EXIT_OK


def run_estimate(sc: dict, meas: MeasurementSet, out: Path, truth: TruthTrajectory | None = None,
                 max_iters: int | None = None, tol: float | None = None):
    cfg = sc["config"]
    max_iters = sc["max_iters"] if max_iters is None else max_iters
    tol = sc["tol"] if tol is None else tol
    if max_iters < 0:
        raise ConfigError("max_iters must be >= 0")
    kappa_true = None if truth is None else truth.kappa_values()
    t0 = time.perf_counter()
    result = run_outer_iteration(cfg, meas, sc["source"], max_iters=max_iters, tol=tol,
                                 kappa_true=kappa_true, window_factor=sc["window_factor"],
                                 damping=sc["damping"])
    elapsed = time.perf_counter() - t0
    means, smoothed, report = result
    out.mkdir(parents=True, exist_ok=True)
    times = cfg.times
    kappa = means.kappa_values()
    temp = means.temperature_values()
    std = np.sqrt(np.maximum(np.array([np.diag(P) for P in smoothed.covs]), 0.0))
    files = []
    path = out / "estimate.npz"
    np.savez(path, format_version=np.array(FORMAT_VERSION), times=times,
             x=collocation_points(cfg.n_modes), t_bar=means.t_bar, theta_bar=means.theta_bar,
             flux_bar=means.flux_bar, kappa_bar=kappa, smoothed_means=smoothed.means,
             smoothed_std=std)
    files.append(path)
    path = out / "kappa_bar.csv"
    write_csv(path, ["x", "t", "kappa"], _field_triples(times, kappa))
    files.append(path)
    path = out / "t_bar.csv"
    write_csv(path, ["x", "t", "temperature"], _field_triples(times, temp))
    files.append(path)
    rows = report.as_rows()
    path = out / "convergence.csv"
    write_csv(path, ["iteration", "objective", "change", "theta_diag_change", "min_kappa", "max_imag_residue"],
              ([r["iteration"], r["objective"], r["change"], r["theta_diag_change"],
                r["min_kappa"], r["max_imag_residue"]] for r in rows))
    files.append(path)
    if truth is not None:
        path = out / "errors.csv"
        write_csv(path, ["iteration", "kappa_relative_l2_error"],
                  ([r["iteration"], r["kappa_error"]] for r in rows))
        files.append(path)
    return result, files, elapsed


def cmd_estimate(raw: dict, measurements_path: Path, out: Path, seed=None,
                 max_iters=None, tol=None) -> int:
    sc = scenario(raw, seed)
    meas = load_measurements(measurements_path, sc["config"])
    truth_path = Path(measurements_path).parent / "truth.npz"
    truth = load_truth(truth_path) if truth_path.exists() else None
    if truth is not None and truth.temperature.shape != (sc["config"].n_steps + 1, sc["config"].block_size):
        raise DataError("stored truth does not match the configured grid")
    result, files, elapsed = run_estimate(sc, meas, out, truth, max_iters, tol)
    write_manifest(out, "estimate", raw, sc, {"estimate_s": elapsed}, files, result.report.as_rows())
    if result.report.diverged:
        log.warning("outer iteration diverged; kept best iterate %d", result.report.best_iteration)
    return EXIT_OK


def cmd_calibrate(raw: dict, targets_path: Path, out: Path) -> int:
    sc = scenario(raw)
    cfg = sc["config"]
    try:
        targets = json.loads(Path(targets_path).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read targets: {exc}") from exc
    _reject_unknown(targets, {"modes", "var_T", "var_theta", "mu1_candidates"}, "targets")
    var_T = targets.get("var_T", [])
    var_th = targets.get("var_theta", [])
    if not var_T or not var_th:
        raise CalibrationError("targets are empty")
    fit = calibrate_noise(var_T, var_th, cfg, targets.get("modes"))
    cand = targets.get("mu1_candidates", [cfg.mu1])
    fitted = cfg.replace(alpha1=fit.alpha1, beta1=fit.beta1, alpha2=fit.alpha2, beta2=fit.beta2)
    mu1_star, curve = choose_hyperdiffusion(fitted, sc["source"].field(cfg.n_modes), cand)
    fitted = fitted.replace(mu1=mu1_star)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    path = out / "calibration.json"
    path.write_text(json.dumps({"format_version": FORMAT_VERSION, **fit._asdict(), "mu1": mu1_star},
                               indent=2) + "\n")
    files.append(path)
    path = out / "mu1_curve.csv"
    write_csv(path, ["mu1", "expected_error"], curve.tolist())
    files.append(path)
    F, Q = continuous_generator(fitted)
    stat = lyapunov_stationary(F, Q)
    C = mode_covariance(stat.c0, cfg.n_modes)
    b = cfg.block_size
    n = cfg.n_modes
    qT, qth = quasistationary_variances(fitted)
    rows = []
    for k in range(1, n + 1):
        rows.append([k, C[n + k, n + k].real, qT[k - 1], C[b + n + k, b + n + k].real, qth[k - 1]])
    path = out / "covariance_comparison.csv"
    write_csv(path, ["k", "lyapunov_T", "quasistationary_T", "lyapunov_theta", "quasistationary_theta"], rows)
    files.append(path)
    write_manifest(out, "calibrate", raw, sc, {}, files)
    return EXIT_OK


SWEEP_PARAMETERS = {"sensor_sigma", "n_sensors"}


def cmd_sweep(raw: dict, sweep_path: Path, out: Path, seed=None, max_iters=None, tol=None) -> int:
    try:
        spec = json.loads(Path(sweep_path).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep spec: {exc}") from exc
    _reject_unknown(spec, {"parameter", "values"}, "sweep")
    param = spec.get("parameter")
    values = spec.get("values", [])
    if param not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}")
    if not values:
        raise ConfigError("sweep value list is empty")
    base = scenario(raw, seed)
    truth = simulate_twin(base["config"], base["kappa"], base["source"], seed=base["seed"],
                          theta_noise=base["theta_noise"], spinup_steps=base["spinup_steps"])
    out.mkdir(parents=True, exist_ok=True)
    rows, files = [], [save_truth(out, truth)]
    t0 = time.perf_counter()
    for i, v in enumerate(values):
        variant = copy.deepcopy(raw)
        model = variant.setdefault("model", {})
        if param == "sensor_sigma":
            model["sensor_sigmas"] = float(v)
        else:
            model["sensor_locations"] = {"uniform": int(v)}
            if isinstance(model.get("sensor_sigmas"), list):
                # per-sensor sigmas cannot follow a change of m; keep the first
                model["sensor_sigmas"] = model["sensor_sigmas"][0]
        sc = scenario(variant, seed)
        cfg = sc["config"]
        meas = twin_measurements(truth, cfg, seed=sc["measurement_seed"], measure_every=sc["measure_every"])
        result, _, _ = run_estimate(sc, meas, out / f"run_{i:02d}", truth, max_iters, tol)
        err = float(np.linalg.norm(result.means.kappa_values() - truth.kappa_values())
                    / np.linalg.norm(truth.kappa_values()))
        rows.append([v, err, len(result.report.records) - 1, int(result.report.converged),
                     int(result.report.diverged)])
    # errors should not grow as the data improve
    order = sorted(range(len(rows)), key=lambda j: -rows[j][0] if param == "sensor_sigma" else rows[j][0])
    ordered = [rows[j][1] for j in order]
    flag = int(any(b > a for a, b in zip(ordered, ordered[1:])))
    if flag:
        log.warning("final error is not monotone in %s", param)
    path = out / "sweep.csv"
    write_csv(path, [param, "final_kappa_error", "iterations", "converged", "diverged", "monotone_violation"],
              ([*r, flag] for r in rows))
    files.append(path)
    write_manifest(out, "sweep", raw, base, {"sweep_s": time.perf_counter() - t0}, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffusivity-kalman", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the truth seed")
        return sp

    s = common(sub.add_parser("simulate", help="simulate truth and sensor data"))
    s.add_argument("--measure-every", type=int)
    s = common(sub.add_parser("calibrate", help="fit noise spectra and choose mu1"))
    s.add_argument("--targets", required=True, help="JSON file of per-mode variance targets")
    for name, helptext in (("estimate", "run the outer iteration on measurements"),
                           ("sweep", "repeat estimation over noise levels or sensor counts")):
        s = common(sub.add_parser(name, help=helptext))
        s.add_argument("--max-iters", type=int)
        s.add_argument("--tol", type=float)
        if name == "estimate":
            s.add_argument("--measurements", required=True, help="measurement CSV")
        else:
            s.add_argument("--sweep", required=True, help="JSON sweep spec")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        raw = load_config(args.config)
        if args.command == "simulate":
            if args.measure_every is not None and args.measure_every < 1:
                raise ConfigError("--measure-every must be >= 1")
            return cmd_simulate(raw, out, args.seed, args.measure_every)
        if args.command == "calibrate":
            return cmd_calibrate(raw, Path(args.targets), out)
        if args.command == "estimate":
            return cmd_estimate(raw, Path(args.measurements), out, args.seed, args.max_iters, args.tol)
        return cmd_sweep(raw, Path(args.sweep), out, args.seed, args.max_iters, args.tol)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, NotHurwitzError) as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (SimulationDivergedError, MeanEvolutionError, NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
