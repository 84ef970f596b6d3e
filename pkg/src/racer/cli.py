"""Command-line entry points: seeded experiments, metric export, GP evaluation.

Configs are JSON. Every run directory gets a ``manifest.json`` (config hash,
seed, version), CSV time series and a ``summary.json`` whose content depends
only on the resolved config and the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import headtohead as hh
from . import timetrial as tt
from .errors import ConfigError, DimensionMismatch, RacerError
from .gp import GpDataset, GpModel
from .track import Track, TrackGenSpec, random_track, stadium_track
from .vehicle import VehicleParams

log = logging.getLogger("racer")

SUMMARY_KEYS = ("lap_times_planned", "lap_times_measured", "gp_rmse", "overtake_time_mean",
                "overtake_time_std", "pred_err_by_step")
RESIDUAL_NAMES = ("vy", "r")


# ------------------------------------------------------------ config helpers
def _as_field_value(current, value):
    if dataclasses.is_dataclass(current) and isinstance(value, dict):
        return override(current, value)
    if isinstance(current, tuple) and isinstance(value, list):
        return _tuplify(value)
    return value


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def override(instance, values: dict):
    """Copy of a (nested, frozen) dataclass with fields replaced from a JSON dict."""
    if not isinstance(values, dict):
        raise ConfigError(f"expected an object for {type(instance).__name__}")
    names = {f.name for f in dataclasses.fields(instance)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {type(instance).__name__} fields: {', '.join(unknown)}")
    changes = {k: _as_field_value(getattr(instance, k), v) for k, v in values.items()}
    try:
        return dataclasses.replace(instance, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{type(instance).__name__}: {exc}") from exc


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def config_hash(resolved: dict) -> str:
    text = json.dumps(_jsonable(resolved), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw, path.parent


def _check_keys(raw: dict, allowed) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _file(base: Path, name) -> Path:
    if not isinstance(name, str):
        raise ConfigError("file references must be strings")
    path = (base / name) if not Path(name).is_absolute() else Path(name)
    if not path.is_file():
        raise ConfigError(f"referenced file does not exist: {path}")
    return path


def _vehicle(raw: dict, base: Path, default: VehicleParams) -> tuple[VehicleParams, dict]:
    ref = raw.get("vehicle")
    if ref is None:
        return default, default.to_dict()
    p = VehicleParams.load(_file(base, ref))
    return p, p.to_dict()


def _track(raw, base: Path) -> tuple[Track, dict]:
    raw = raw if raw is not None else {"kind": "stadium"}
    if isinstance(raw, str):
        raw = {"file": raw}
    if not isinstance(raw, dict):
        raise ConfigError("track must be an object or a file name")
    if "file" in raw:
        track = Track.load(_file(base, raw["file"]))
    elif raw.get("kind", "stadium") == "stadium":
        track = stadium_track(*(float(raw[k]) for k in ("w_l", "w_r") if k in raw))
    elif raw["kind"] == "random":
        track = random_track(int(raw.get("seed", 0)), override(TrackGenSpec(), raw.get("spec", {})))
    else:
        raise ConfigError(f"unknown track kind {raw['kind']!r}")
    return track, track.to_dict()


# ------------------------------------------------------------ time trial
def resolve_timetrial(raw: dict, base: Path):
    _check_keys(raw, ("mode", "alphas", "track", "vehicle", "timetrial", "validation"))
    alphas = raw.get("alphas")
    if not isinstance(alphas, list) or not alphas:
        raise ConfigError("timetrial needs a nonempty alpha schedule 'alphas'")
    try:
        alphas = [float(a) for a in alphas]
    except (TypeError, ValueError) as exc:
        raise ConfigError("alphas must be numbers") from exc
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas must lie in [0, 1]")
    track, track_dict = _track(raw.get("track"), base)
    p, p_dict = _vehicle(raw, base, VehicleParams.default())
    config = override(tt.TimeTrialConfig(), raw.get("timetrial", {}))
    validation = raw.get("validation", {"seed": 12345})
    if validation is not None and not isinstance(validation, dict):
        raise ConfigError("validation must be an object or null")
    if validation is not None and not set(validation) <= {"seed", "amplitude", "speed_spread", "base"}:
        raise ConfigError("validation accepts seed, amplitude, speed_spread and base")
    resolved = {"mode": "timetrial", "alphas": alphas, "track": track_dict, "vehicle": p_dict,
                "timetrial": config, "validation": validation}
    return resolved, (alphas, track, p, config, validation)


def run_timetrial(raw: dict, base: Path, seed: int, out: Path) -> dict:
    resolved, (alphas, track, p, config, validation) = resolve_timetrial(raw, base)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, resolved, seed)
    (out / "iterations").mkdir(exist_ok=True)
    state, wlog = tt.warmup(track, p, config, seed)
    wlog.write_csv(out / "iterations" / "warmup.csv")
    planned, measured = [], []
    for j, alpha in enumerate(alphas):
        try:
            it = tt.run_iteration(j, alpha, state, track, p, config, seed)
        except RacerError as exc:
            log.error("iteration %d failed: %s", j, exc)
            planned.append(math.nan)
            measured.append(math.nan)
            continue
        it.write_csv(out / "iterations" / f"iteration_{j:02d}.csv")
        planned.append(it.lap_time_planned)
        measured.append(it.lap_time_measured)
        log.info("iteration %d alpha=%.3f lap %.3f s (planned %.3f s)", j, alpha,
                 it.lap_time_measured, it.lap_time_planned)
    rmse = None
    if validation is not None and state.track_gp is not None and state.plan_gp is not None:
        Z, Y_mpc, Y_plan = tt.validation_samples(track, p, config, **validation)
        _dump(out / "validation.json", GpDataset.from_arrays(Z, Y_mpc).to_dict())
        rmse = {"tracking": dict(zip(RESIDUAL_NAMES, tt.residual_rmse(state.track_gp, Z, Y_mpc))),
                "planning": dict(zip(RESIDUAL_NAMES, tt.residual_rmse(state.plan_gp, Z, Y_plan)))}
    for name in ("track", "plan"):
        gp = getattr(state, f"{name}_gp")
        if gp is not None:
            gp.save(out / f"{name}_gp.json")
    summary = _summary(lap_times_planned=planned, lap_times_measured=measured, gp_rmse=rmse)
    _dump(out / "summary.json", summary)
    return summary


# ------------------------------------------------------------ head to head
def resolve_h2h(raw: dict, base: Path):
    _check_keys(raw, ("mode", "vehicle", "h2h", "protocol"))
    p, p_dict = _vehicle(raw, base, VehicleParams.miniature())
    config = override(hh.H2hConfig(), raw.get("h2h", {}))
    protocol = override(hh.H2hProtocol(), raw.get("protocol", {}))
    resolved = {"mode": "h2h", "vehicle": p_dict, "h2h": config, "protocol": protocol}
    return resolved, (p, config, protocol)


def _arm_stats(logs, errs, T):
    times = hh.censored_overtake_times(logs, T)
    mean, std = hh.summarize_errors(errs)
    return times, {"mean": mean, "std": std, "count": [int(e.size) for e in errs]}


def run_h2h(raw: dict, base: Path, seed: int, out: Path) -> dict:
    resolved, (p, config, protocol) = resolve_h2h(raw, base)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, resolved, seed)
    report = hh.run_protocol(seed, protocol, config, p)
    for sub, logs in (("explore", report.explore_logs), ("eval_explore", report.eval_explore),
                      ("eval_baseline", report.eval_baseline)):
        (out / sub).mkdir(exist_ok=True)
        for i, race in enumerate(logs):
            race.write_csv(out / sub / f"race_{i:03d}.csv")
    initial, baseline = report.learners
    initial.gp.save(out / "gp_explore.json")
    baseline.gp.save(out / "gp_baseline.json")
    _dump(out / "eval_races.json", {"h2h": _jsonable(config), "horizon": config.N, "seed": seed,
                                    "races": [r.to_dict() for r in report.eval_explore + report.eval_baseline]})
    tx, ex = _arm_stats(report.eval_explore, report.err_explore, config.T)
    tb, eb = _arm_stats(report.eval_baseline, report.err_baseline, config.T)
    summary = _summary(
        overtake_time_mean={"explore": float(np.mean(tx)), "baseline": float(np.mean(tb))},
        overtake_time_std={"explore": float(np.std(tx)), "baseline": float(np.std(tb))},
        pred_err_by_step={"explore": ex, "baseline": eb},
        overtakes={"explore": sum(r.overtaken for r in report.eval_explore),
                   "baseline": sum(r.overtaken for r in report.eval_baseline)},
        collisions={"explore": sum(r.collisions for r in report.eval_explore),
                    "baseline": sum(r.collisions for r in report.eval_baseline)},
        dataset_size={"explore": report.explore_size, "baseline": report.baseline_size},
        exploration_races=len(report.explore_logs),
    )
    _dump(out / "summary.json", summary)
    return summary


# ------------------------------------------------------------ GP evaluation
def rmse(pred, target) -> np.ndarray:
    """Per-column root mean squared error."""
    pred, target = np.atleast_2d(np.asarray(pred, dtype=float)), np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    return np.sqrt(np.mean((pred - target) ** 2, axis=0))


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file is not valid JSON: {exc}") from exc


def run_evalgp(model_path, data_path, out: Path) -> dict:
    try:
        model = GpModel.from_dict(_read_json(model_path, "model"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model file does not describe a GP: {exc}") from exc
    data = _read_json(data_path, "data")
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(data, dict) and "races" in data:
        config = override(hh.H2hConfig(), _strip_nulls(data.get("h2h", {})))
        if model.n_z != hh.N_FEATURES or model.n_y != 4:
            raise DimensionMismatch(f"opponent data needs a {hh.N_FEATURES}-input, 4-output model")
        races = [hh.RaceLog.from_dict(r, int(data.get("horizon", config.N))) for r in data["races"]]
        opp = hh.OpponentModel(model, config.delta_scale)
        feats = np.vstack([r.features for r in races])
        deltas = np.vstack([r.deltas for r in races])
        mu, _ = opp.predict(feats)
        errs = hh.prediction_errors(opp, races, config, seed=int(data.get("seed", 0)))
        mean, std = hh.summarize_errors(errs)
        summary = _summary(gp_rmse=rmse(mu, deltas).tolist(),
                           pred_err_by_step={"mean": mean, "std": std, "count": [int(e.size) for e in errs]})
    else:
        try:
            ds = GpDataset.from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"data file does not describe a dataset: {exc}") from exc
        if ds.n_z != model.n_z or ds.n_y != model.n_y:
            raise DimensionMismatch(f"data has ({ds.n_z}, {ds.n_y}) dims, model ({model.n_z}, {model.n_y})")
        mu, _ = model.predict(ds.Z)
        summary = _summary(gp_rmse=rmse(mu, ds.Y).tolist())
    _dump(out / "summary.json", summary)
    return summary


def _strip_nulls(d):
    # JSON cannot hold inf; fields exported as null fall back to their defaults
    if isinstance(d, dict):
        return {k: _strip_nulls(v) for k, v in d.items() if v is not None}
    return d


# ------------------------------------------------------------ shared output
def _summary(**values) -> dict:
    out = {k: None for k in SUMMARY_KEYS}
    out.update(values)
    return out


def _write_manifest(out: Path, resolved: dict, seed: int) -> None:
    _dump(out / "config.json", resolved)
    _dump(out / "manifest.json", {"config_hash": config_hash(resolved), "seed": seed, "version": __version__,
                                  "mode": resolved["mode"]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="racer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("timetrial", "h2h"):
        cmd = sub.add_parser(mode)
        cmd.add_argument("--config", required=True, help="JSON experiment config")
        cmd.add_argument("--seed", type=int, default=0)
        cmd.add_argument("--out", required=True, help="output directory")
    cmd = sub.add_parser("evalgp")
    cmd.add_argument("--model", required=True, help="GP model JSON")
    cmd.add_argument("--data", required=True, help="dataset JSON or race bundle JSON")
    cmd.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.mode == "evalgp":
            run_evalgp(args.model, args.data, out)
            return 0
        raw, base = load_config(args.config)
        if raw.get("mode", args.mode) != args.mode:
            raise ConfigError(f"config is for mode {raw['mode']!r}, not {args.mode!r}")
        runner = run_timetrial if args.mode == "timetrial" else run_h2h
        runner(raw, base, args.seed, out)
    except (ConfigError, DimensionMismatch) as exc:
        log.error("%s", exc)
        print(f"racer: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
