"""Command-line entry point: ``loadcast {simulate,forecast,gsa,evaluate}``.

Every command reads an optional JSON/YAML config file, applies flag
overrides, validates the result and only then starts computing.  Exit codes:
0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__, grid_sim, metrics, nngp, pipeline
from .errors import ConfigurationError, DataIOError, LoadcastError, ValidationError

log = logging.getLogger("loadcast")

BUILTIN_SYSTEMS = {"8bus": grid_sim.eight_bus_feeder, "14bus": grid_sim.fourteen_bus_mesh}

DATASET_FILE = "dataset.csv"
SYSTEM_FILE = "system.json"
MANIFEST_FILE = "manifest.json"


# ---------------------------------------------------------------- config parsing


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} is not valid JSON/YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a mapping")
    return data


def _build(cls, data, where: str):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {where}: {exc}") from exc


def _check_keys(data: dict, allowed, where: str):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_int_list(text) -> list[int]:
    """``"3"``, ``"1,4,5"`` or ``"150:170"`` (half-open range)."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    out = []
    try:
        for part in str(text).split(","):
            if ":" in part:
                a, b = part.split(":")
                out.extend(range(int(a), int(b)))
            elif part.strip():
                out.append(int(part))
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse index list {text!r}") from exc
    if not out:
        raise ConfigurationError(f"empty index list {text!r}")
    return out


def _resolve_system(spec) -> grid_sim.BusSystem:
    if spec is None:
        spec = "8bus"
    if isinstance(spec, dict):
        return grid_sim.BusSystem.from_dict(spec)
    if spec in BUILTIN_SYSTEMS:
        return BUILTIN_SYSTEMS[spec]()
    return grid_sim.BusSystem.load(spec)


@dataclasses.dataclass(frozen=True)
class SimulateConfig:
    system: grid_sim.BusSystem
    days: int
    seed: int
    load_profile: grid_sim.LoadProfileSpec
    pv_profile: grid_sim.PVProfileSpec | None
    out: Path


@dataclasses.dataclass(frozen=True)
class ForecastConfig:
    data: Path
    customers: list
    days: list
    methods: tuple
    use_gsa: bool
    n_features: int
    angle_noise_std: float
    first: pipeline.FirstStageConfig
    second: pipeline.SecondStageConfig
    seed: int
    jobs: int
    out: Path


@dataclasses.dataclass(frozen=True)
class GSAConfig:
    data: Path
    stage: int
    customer: int
    component: int | None
    day: int
    samples: int
    angle_noise_std: float
    first: pipeline.FirstStageConfig
    second: pipeline.SecondStageConfig
    seed: int
    out: Path


def _first_stage(data) -> pipeline.FirstStageConfig:
    data = dict(data or {})
    nn = _build(nngp.NNGPConfig, data.pop("nngp", None) or {"noise_var": "mle"}, "first_stage.nngp")
    cfg = _build(pipeline.FirstStageConfig, data, "first_stage")
    return dataclasses.replace(cfg, nngp=nn)


def _override(cfg: dict, key, value):
    if value is not None:
        cfg[key] = value


def simulate_config(args) -> SimulateConfig:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"system", "days", "seed", "load_profile", "pv_profile", "out"}, "simulate config")
    _override(cfg, "system", args.system)
    _override(cfg, "days", args.days)
    _override(cfg, "seed", args.seed)
    _override(cfg, "out", args.out)
    if args.pv is not None:
        cfg["pv_profile"] = {} if args.pv == "on" else None
    days = int(cfg.get("days", 365))
    if days < grid_sim.MIN_DAYS:
        raise ConfigurationError(
            f"horizon of {days} days is too short: at least {grid_sim.MIN_DAYS} days are "
            "needed to hold a 60-day first-stage training window (n_t1) plus evaluation days"
        )
    pv = cfg.get("pv_profile", {})
    return SimulateConfig(
        system=_resolve_system(cfg.get("system")),
        days=days,
        seed=int(cfg.get("seed", 0)),
        load_profile=_build(grid_sim.LoadProfileSpec, cfg.get("load_profile"), "load_profile"),
        pv_profile=None if pv is None else _build(grid_sim.PVProfileSpec, pv, "pv_profile"),
        out=Path(cfg.get("out", "simulation")),
    )


def _check_data_dir(path) -> Path:
    path = Path(path)
    if not (path / DATASET_FILE).is_file():
        raise ValidationError(f"no {DATASET_FILE} in data directory {path}")
    return path


def forecast_config(args) -> ForecastConfig:
    cfg = _load_config(args.config)
    allowed = {"data", "customers", "days", "method", "gsa", "n_features", "angle_noise_std",
               "first_stage", "second_stage", "seed", "jobs", "out"}
    _check_keys(cfg, allowed, "forecast config")
    for key in ("data", "customers", "days", "method", "gsa", "seed", "jobs", "out"):
        _override(cfg, key, getattr(args, key))
    second = dict(cfg.get("second_stage") or {})
    _override(second, "interval_level", args.level)
    method = cfg.get("method", "nngp-nigp")
    methods = pipeline.METHODS if method == "both" else (method,)
    for m in methods:
        if m not in pipeline.METHODS:
            raise ConfigurationError(f"unknown method {m!r}")
    gsa_flag = cfg.get("gsa", "on")
    if gsa_flag not in ("on", "off", True, False):
        raise ConfigurationError("gsa must be 'on' or 'off'")
    jobs = int(cfg.get("jobs", 1))
    if jobs < 1:
        raise ConfigurationError("jobs must be at least 1")
    if "customers" not in cfg or "days" not in cfg:
        raise ConfigurationError("forecast needs --customers and --days")
    return ForecastConfig(
        data=_check_data_dir(cfg.get("data", "simulation")),
        customers=_parse_int_list(cfg["customers"]),
        days=_parse_int_list(cfg["days"]),
        methods=tuple(methods),
        use_gsa=gsa_flag in ("on", True),
        n_features=int(cfg.get("n_features", 1)),
        angle_noise_std=float(cfg.get("angle_noise_std", 0.0)),
        first=_first_stage(cfg.get("first_stage")),
        second=_build(pipeline.SecondStageConfig, second, "second_stage"),
        seed=int(cfg.get("seed", 0)),
        jobs=jobs,
        out=Path(cfg.get("out", "forecast")),
    )


def gsa_config(args) -> GSAConfig:
    cfg = _load_config(args.config)
    allowed = {"data", "stage", "customers", "component", "days", "samples", "angle_noise_std",
               "first_stage", "second_stage", "seed", "out"}
    _check_keys(cfg, allowed, "gsa config")
    for key in ("data", "stage", "customers", "component", "days", "samples", "seed", "out"):
        _override(cfg, key, getattr(args, key))
    stage = int(cfg.get("stage", 2))
    if stage not in (1, 2):
        raise ConfigurationError("stage must be 1 or 2")
    if "customers" not in cfg or "days" not in cfg:
        raise ConfigurationError("gsa needs --customers and --days")
    customers = _parse_int_list(cfg["customers"])
    days = _parse_int_list(cfg["days"])
    if len(customers) != 1 or len(days) != 1:
        raise ConfigurationError("gsa takes exactly one customer and one day")
    component = cfg.get("component")
    if stage == 1 and component is None:
        raise ConfigurationError("stage-1 analysis needs --component")
    samples = int(cfg.get("samples", 10_000))
    if samples < 100:
        raise ConfigurationError("samples must be at least 100")
    return GSAConfig(
        data=_check_data_dir(cfg.get("data", "simulation")),
        stage=stage,
        customer=customers[0],
        component=None if component is None else int(component),
        day=days[0],
        samples=samples,
        angle_noise_std=float(cfg.get("angle_noise_std", 0.0)),
        first=_first_stage(cfg.get("first_stage")),
        second=_build(pipeline.SecondStageConfig, cfg.get("second_stage"), "second_stage"),
        seed=int(cfg.get("seed", 0)),
        out=Path(cfg.get("out", "gsa")),
    )


# ---------------------------------------------------------------- commands


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    return obj


def _write_manifest(out: Path, command: str, config, extra: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": _jsonable(config),
        **_jsonable(extra),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _read_dataset(data_dir: Path) -> grid_sim.HourlyDataset:
    pv = True
    manifest = data_dir / MANIFEST_FILE
    if manifest.is_file():
        pv = bool(json.loads(manifest.read_text()).get("pv_adjusted", True))
    return grid_sim.HourlyDataset.from_csv(data_dir / DATASET_FILE, pv_adjusted=pv)


def cmd_simulate(cfg: SimulateConfig) -> dict:
    t = time.perf_counter()
    ds = grid_sim.generate_year(cfg.system, cfg.load_profile, cfg.pv_profile, cfg.seed, cfg.days)
    elapsed = time.perf_counter() - t
    out = _mkdir(cfg.out)
    ds.to_csv(out / DATASET_FILE)
    cfg.system.save(out / SYSTEM_FILE)
    _write_manifest(out, "simulate", {
        "system": cfg.system.to_dict(), "days": cfg.days, "seed": cfg.seed,
        "load_profile": dataclasses.asdict(cfg.load_profile),
        "pv_profile": None if cfg.pv_profile is None else dataclasses.asdict(cfg.pv_profile),
    }, {"pv_adjusted": ds.pv_adjusted, "timings": {"simulate": elapsed}})
    return {"hours": ds.n_hours, "buses": ds.n_buses}


def _forecast_customer(args):
    ds, i, cfg = args
    return pipeline.run(ds, [i], cfg.days, cfg.first, cfg.second, cfg.methods,
                        use_gsa=cfg.use_gsa, n_features=cfg.n_features, gsa_seed=cfg.seed)


def cmd_forecast(cfg: ForecastConfig) -> dict:
    ds = _read_dataset(cfg.data)
    for i in cfg.customers:
        if not 0 <= i < ds.n_buses:
            raise ValidationError(f"customer {i} outside 0..{ds.n_buses - 1}")
    ds = pipeline.observe(ds, cfg.angle_noise_std, cfg.seed)
    out = _mkdir(cfg.out)
    work = [(ds, i, cfg) for i in cfg.customers]
    if cfg.jobs > 1 and len(work) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            runs = list(pool.map(_forecast_customer, work))
    else:
        runs = [_forecast_customer(w) for w in work]
    days = [d for r in runs for d in r.days]
    summary = {}
    for m in cfg.methods:
        pipeline.write_forecast_csv(out / f"forecast_{m}.csv", days, m)
        rows = [(r.customer, r.day, metrics.evaluate_day(
            r.actuals, [f.point for f in r.forecasts[m]], [(f.lower, f.upper) for f in r.forecasts[m]]))
            for r in days]
        metrics.write_summary_csv(out / f"summary_{m}.csv", rows)
        summary[m] = {"mean_mape": float(np.mean([e.mape for *_, e in rows])),
                      "mean_cp": float(np.mean([e.cp for *_, e in rows]))}
    timings = {
        "per_day": [{"customer": r.customer, "day": r.day, **r.timings} for r in days],
        "selection": {str(i): t for r in runs for i, t in r.timings.items()},
    }
    stage_keys = sorted({k for r in days for k in r.timings})
    timings["mean_per_day"] = {k: float(np.mean([r.timings[k] for r in days])) for k in stage_keys}
    _write_manifest(out, "forecast", cfg, {
        "timings": timings,
        "use_gsa": cfg.use_gsa,
        "first_stage_configs": {str(i): c for r in runs for i, c in r.first_configs.items()},
        "second_stage_configs": {str(i): c for r in runs for i, c in r.second_configs.items()},
        "summary": summary,
    })
    return summary


def cmd_gsa(cfg: GSAConfig) -> dict:
    ds = pipeline.observe(_read_dataset(cfg.data), cfg.angle_noise_std, cfg.seed)
    h0 = metrics.HOURS_PER_DAY * cfg.day
    if not 0 <= cfg.customer < ds.n_buses:
        raise ValidationError(f"customer {cfg.customer} outside 0..{ds.n_buses - 1}")
    out = _mkdir(cfg.out)
    t = time.perf_counter()
    if cfg.stage == 1:
        if cfg.component not in ds.components(cfg.customer):
            raise ValidationError(f"component {cfg.component} is not a component of customer {cfg.customer}")
        rep = pipeline.run_gsa_stage1(ds, cfg.customer, cfg.component, h0, cfg.first, cfg.samples, cfg.seed)
        rep.write_h_csv(out / "h_values.csv", [str(k) for k in ds.components(cfg.customer)])
    else:
        rep = pipeline.run_gsa_stage2(ds, cfg.customer, h0, cfg.second, cfg.samples, cfg.seed)
    rep.write_csv(out / "sensitivity.csv")
    _write_manifest(out, "gsa", cfg, {"timings": {"gsa": time.perf_counter() - t}})
    return {"features": len(rep.total_indices)}


def cmd_evaluate(input_dir, out: Path) -> dict:
    """Aggregate every ``forecast_<method>.csv`` under ``input_dir``."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DataIOError(f"input directory not found: {input_dir}")
    files = sorted(input_dir.rglob("forecast_*.csv"))
    if not files:
        raise DataIOError(f"no forecast CSV files under {input_dir}")
    groups = {}
    rows = []
    for path in files:
        method = path.stem[len("forecast_"):]
        run = path.parent.name
        for (customer, day), g in pipeline.read_forecast_csv(path).items():
            ev = metrics.evaluate_day(g["actual"], g["point"], g["interval"])
            groups.setdefault((method, "mape"), []).append(ev.mape)
            groups.setdefault((method, "cp"), []).append(ev.cp)
            rows.append((run, method, customer, day, ev))
    out = _mkdir(out)
    metrics.write_boxplot_csv(out / "boxplot_quartiles.csv", groups)
    with open(out / "day_metrics.csv", "w") as fh:
        fh.write("run,method,customer,day,mape,cp\n")
        for run, method, customer, day, ev in rows:
            fh.write(f"{run},{method},{customer},{day},{ev.mape!r},{ev.cp!r}\n")
    _write_timing_table(input_dir, out)
    return {"files": len(files), "days": len(rows)}


def _write_timing_table(input_dir: Path, out: Path) -> None:
    """Mean per-day seconds by method, one column each for runs with and without GSA."""
    table = {}
    for path in sorted(input_dir.rglob(MANIFEST_FILE)):
        man = json.loads(path.read_text())
        if man.get("command") != "forecast":
            continue
        col = "with_gsa" if man.get("use_gsa") else "without_gsa"
        per_day = man["timings"]["per_day"]
        for method in man["config"]["methods"]:
            secs = [d["first_stage"] + d[f"second_stage[{method}]"] for d in per_day]
            table.setdefault(method, {}).setdefault(col, []).extend(secs)
    with open(out / "timing_table.csv", "w") as fh:
        fh.write("method,without_gsa,with_gsa\n")
        for method, cols in sorted(table.items()):
            cells = [f"{np.mean(cols[c]):.3f}" if c in cols else "" for c in ("without_gsa", "with_gsa")]
            fh.write(f"{method},{cells[0]},{cells[1]}\n")


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or YAML file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic hourly dataset")
    common(p)
    p.add_argument("--system", help="'8bus', '14bus' or a system JSON file")
    p.add_argument("--days", type=int, help="horizon in days")
    p.add_argument("--pv", choices=("on", "off"))

    p = sub.add_parser("forecast", help="run the two-stage forecaster")
    common(p)
    p.add_argument("--data", help="directory written by 'simulate'")
    p.add_argument("--system", help="accepted for symmetry; the dataset defines the buses")
    p.add_argument("--customers", help="bus indices, e.g. '2' or '1,2,5'")
    p.add_argument("--days", help="prediction days, e.g. '150:170' or '150,151'")
    p.add_argument("--method", choices=(*pipeline.METHODS, "both"))
    p.add_argument("--gsa", choices=("on", "off"))
    p.add_argument("--level", type=float, help="prediction interval level")
    p.add_argument("--jobs", type=int, help="worker processes over customers")

    p = sub.add_parser("gsa", help="sensitivity report for one customer and day")
    common(p)
    p.add_argument("--data")
    p.add_argument("--system", help="accepted for symmetry; the dataset defines the buses")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--customers", help="a single bus index")
    p.add_argument("--component", type=int, help="component bus j (stage 1)")
    p.add_argument("--days", help="a single day index")
    p.add_argument("--samples", type=int, help="Monte Carlo rows per matrix")

    p = sub.add_parser("evaluate", help="aggregate forecast CSVs into tables")
    p.add_argument("--input", required=True, help="directory searched for forecast_*.csv")
    p.add_argument("--out", default="evaluation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    if os.environ.get(nngp.TABLE_CACHE_ENV):
        log.info("table cache: %s", os.environ[nngp.TABLE_CACHE_ENV])
    try:
        if args.command == "simulate":
            result = cmd_simulate(simulate_config(args))
        elif args.command == "forecast":
            result = cmd_forecast(forecast_config(args))
        elif args.command == "gsa":
            result = cmd_gsa(gsa_config(args))
        else:
            result = cmd_evaluate(args.input, Path(args.out))
    except LoadcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
