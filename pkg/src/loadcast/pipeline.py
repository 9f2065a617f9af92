"""Two-stage hour-ahead load forecasting.

Stage one forecasts every phase-angle-difference component
``theta_{i,j}, j != i`` with an NNGP trained on lagged windows of that
component and a few neighbor components.  Stage two maps the angle-difference
vector to the customer's load with a noisy-input GP, feeding the stage-one
predictive mean and variance in as a Gaussian test input.

Hours are absolute indices into the dataset.  Every forecast for hour ``h``
is computed from arrays sliced to ``[:h]``, so values at hours ``>= h`` are
never read.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gsa, nigp, nngp
from .errors import ConfigurationError, LoadcastError, ValidationError
from .grid_sim import HourlyDataset
from .metrics import HOURS_PER_DAY, mape

log = logging.getLogger(__name__)

METHODS = ("nngp-nigp", "baseline-gp")


@dataclass(frozen=True)
class FirstStageConfig:
    """``neighbor_indices`` maps a component bus ``j`` to its neighbor buses;
    components without an entry get neighbors from the stage-one sensitivity
    ranking."""

    n_t1: int = 60
    n_in: int = 3
    n_j: int = 1
    neighbor_indices: dict | None = None
    nngp: nngp.NNGPConfig = field(default_factory=lambda: nngp.NNGPConfig(noise_var="mle"))
    gsa_samples: int = 10_000

    def __post_init__(self):
        if self.n_in < 1 or self.n_t1 < self.n_in + 1:
            raise ConfigurationError(f"need n_in >= 1 and n_t1 >= n_in + 1, got n_t1={self.n_t1}, n_in={self.n_in}")
        if self.n_j < 0:
            raise ConfigurationError("n_j must be nonnegative")
        if self.gsa_samples < 100:
            raise ConfigurationError("gsa_samples must be at least 100")
        if self.neighbor_indices is not None:
            nb = {int(j): tuple(int(k) for k in ks) for j, ks in self.neighbor_indices.items()}
            for j, ks in nb.items():
                if j in ks or len(set(ks)) != len(ks):
                    raise ConfigurationError(f"neighbors of component {j} must be distinct and exclude it")
            object.__setattr__(self, "neighbor_indices", nb)

    def history_hours(self) -> int:
        return HOURS_PER_DAY * (self.n_t1 + self.n_in)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nngp"]["nonlinearity"] = self.nngp.nonlinearity.value
        if self.neighbor_indices is not None:
            d["neighbor_indices"] = {str(j): list(ks) for j, ks in self.neighbor_indices.items()}
        return d


@dataclass(frozen=True)
class SecondStageConfig:
    """``selected_features`` lists component buses ``k`` (features
    ``theta_{i,k}``); ``None`` means all of them."""

    n_t2: int = 30
    selected_features: tuple | None = None
    interval_level: float = 0.95
    nigp_iterations: int = 2
    n_starts: int = 5
    maxiter: int = 200

    def __post_init__(self):
        if self.n_t2 < 2:
            raise ConfigurationError("n_t2 must be at least 2")
        if not 0 < self.interval_level < 1:
            raise ConfigurationError("interval_level must be in (0, 1)")
        if self.selected_features is not None:
            sel = tuple(int(k) for k in self.selected_features)
            if not sel or len(set(sel)) != len(sel):
                raise ConfigurationError("selected_features must be nonempty and distinct")
            object.__setattr__(self, "selected_features", sel)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.selected_features is not None:
            d["selected_features"] = list(self.selected_features)
        return d


@dataclass(frozen=True)
class InputForecast:
    mean: np.ndarray
    variance: np.ndarray
    components: tuple
    hour: int

    def __post_init__(self):
        if self.mean.shape != self.variance.shape or len(self.components) != len(self.mean):
            raise ValidationError("input forecast mean, variance and components differ in length")
        if np.any(self.variance < 0):
            raise ValidationError("input forecast variances must be nonnegative")

    def subset(self, buses) -> "InputForecast":
        pos = _positions(self.components, buses)
        return InputForecast(self.mean[pos], self.variance[pos], tuple(buses), self.hour)


@dataclass(frozen=True)
class LoadForecast:
    point: float
    variance: float
    lower: float
    upper: float
    hour: int
    customer: int
    method: str = "nngp-nigp"


def _positions(components, buses) -> list[int]:
    comps = list(components)
    try:
        return [comps.index(k) for k in buses]
    except ValueError as exc:
        raise ValidationError(f"feature buses {list(buses)} are not all components {comps}") from exc


def _check_customer(dataset: HourlyDataset, i: int):
    if not 0 <= i < dataset.n_buses:
        raise ValidationError(f"customer {i} outside 0..{dataset.n_buses - 1}")


def observe(dataset: HourlyDataset, angle_noise_std: float, seed: int = 0) -> HourlyDataset:
    """Copy of ``dataset`` with iid Gaussian measurement noise on every bus angle."""
    if angle_noise_std < 0:
        raise ConfigurationError("angle noise must be nonnegative")
    if angle_noise_std == 0:
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E6F]))
    noisy = dataset.angles + angle_noise_std * rng.standard_normal(dataset.angles.shape)
    return dataset.with_arrays(angles=noisy)


# ---------------------------------------------------------------- stage one


class FeatureScaler:
    """Per-column standardization plus a constant coordinate.

    The NNGP kernel rescales inputs to constant norm, which would discard
    the overall level of a window; centring first and appending a constant
    keeps that information in the direction of the vector.
    """

    def __init__(self, X):
        X = np.asarray(X, dtype=float)
        self.center = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale = np.where(scale > 1e-12 * max(1.0, float(np.max(np.abs(X)))), scale, 1.0)
        self.bias = np.sqrt(X.shape[1])

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.center) / self.scale
        return np.hstack([Z, np.full((len(Z), 1), self.bias)])


def _windows(series: np.ndarray, hours, n_in: int) -> np.ndarray:
    """Rows ``series[h - 24 n_in : h]`` for each ``h``."""
    w = HOURS_PER_DAY * n_in
    return np.stack([series[h - w : h] for h in hours])


def _first_stage_inputs(D, comps, blocks, hours, n_in):
    """Stack the lag windows of the component buses ``blocks`` (in that order)."""
    pos = _positions(comps, blocks)
    return np.hstack([_windows(D[:, p], hours, n_in) for p in pos])


def _neighbor_blocks(config: FirstStageConfig, j: int):
    if config.n_j == 0:
        return ()
    nb = (config.neighbor_indices or {}).get(j)
    if nb is None:
        raise ConfigurationError(f"no neighbors configured for component {j}")
    if len(nb) != config.n_j:
        raise ConfigurationError(f"component {j} has {len(nb)} neighbors, n_j = {config.n_j}")
    return tuple(nb)


def build_first_stage_training_set(dataset: HourlyDataset, i: int, j: int, h_star: int, config: FirstStageConfig):
    """Rows for hours ``h* - 24 n_t1 .. h* - 1``; inputs are the lag windows of
    ``theta_{i,j}`` followed by those of its neighbors."""
    _check_customer(dataset, i)
    if h_star - config.history_hours() < 0 or h_star > dataset.n_hours:
        raise ValidationError(
            f"hour {h_star} needs {config.history_hours()} hours of history "
            f"({config.n_t1} training days + {config.n_in} lag days)"
        )
    comps = dataset.components(i)
    if j not in comps:
        raise ValidationError(f"component {j} is not a component of customer {i}")
    blocks = (j,) + _neighbor_blocks(config, j)
    if i in blocks or len(comps) - 1 < config.n_j:
        raise ConfigurationError(f"invalid neighbor set {blocks[1:]} for customer {i}")
    D = dataset.angle_differences(i)[:h_star]
    hours = np.arange(h_star - HOURS_PER_DAY * config.n_t1, h_star)
    X = _first_stage_inputs(D, comps, blocks, hours, config.n_in)
    y = D[hours, comps.index(j)]
    return X, y


@dataclass
class ComponentModel:
    component: int
    blocks: tuple
    scaler: FeatureScaler
    model: nngp.NNGPModel


def fit_first_stage(dataset, i, h_star, config: FirstStageConfig, table=None) -> list[ComponentModel]:
    """One NNGP per component ``j != i``, in component order."""
    config = resolve_neighbors(dataset, i, h_star, config)
    if table is None and not config.nngp.analytic_relu:
        table = nngp.get_table(config.nngp.nonlinearity)
    models = []
    for j in dataset.components(i):
        try:
            X, y = build_first_stage_training_set(dataset, i, j, h_star, config)
            scaler = FeatureScaler(X)
            models.append(ComponentModel(j, (j,) + _neighbor_blocks(config, j), scaler,
                                         nngp.fit_nngp(scaler(X), y, config.nngp, table)))
        except LoadcastError as exc:
            raise type(exc)(f"first-stage model for theta_{{{i},{j}}} failed: {exc}") from exc
    return models


def predict_inputs(models: list[ComponentModel], dataset: HourlyDataset, i: int, h: int, n_in: int) -> InputForecast:
    """Predict all components at hour ``h`` from observations strictly before ``h``."""
    D = dataset.angle_differences(i)[:h]
    comps = dataset.components(i)
    mean = np.empty(len(models))
    var = np.empty(len(models))
    for c, cm in enumerate(models):
        x = _first_stage_inputs(D, comps, cm.blocks, [h], n_in)
        mean[c], var[c] = nngp.nngp_predict(cm.model, cm.scaler(x)[0], include_noise=True)
    return InputForecast(mean, var, tuple(cm.component for cm in models), h)


def forecast_inputs(dataset: HourlyDataset, i: int, h_star: int, config: FirstStageConfig) -> InputForecast:
    models = fit_first_stage(dataset, i, h_star, config)
    return predict_inputs(models, dataset, i, h_star, config.n_in)


def persistence_forecast(dataset: HourlyDataset, i: int, h_star: int) -> np.ndarray:
    """Same-hour-yesterday angle differences, a sanity baseline."""
    return dataset.angle_differences(i)[:h_star][h_star - HOURS_PER_DAY]


# ---------------------------------------------------------------- stage two


def _features(dataset: HourlyDataset, i: int, config: SecondStageConfig) -> list[int]:
    comps = dataset.components(i)
    if config.selected_features is None:
        return comps
    if i in config.selected_features:
        raise ConfigurationError("a customer's own bus is not a feature")
    _positions(comps, config.selected_features)
    return list(config.selected_features)


def build_second_stage_training_set(dataset: HourlyDataset, i: int, h_star: int, config: SecondStageConfig):
    """Contemporaneous (angle differences, load) pairs for the ``24 n_t2`` hours before ``h*``."""
    _check_customer(dataset, i)
    n = HOURS_PER_DAY * config.n_t2
    if h_star - n < 0 or h_star > dataset.n_hours:
        raise ValidationError(f"hour {h_star} needs {n} hours of history ({config.n_t2} days)")
    feats = _features(dataset, i, config)
    pos = _positions(dataset.components(i), feats)
    D = dataset.angle_differences(i)[:h_star]
    hours = np.arange(h_star - n, h_star)
    return D[np.ix_(hours, pos)], dataset.loads[:h_star][hours, i]


def fit_second_stage(dataset, i, h_star, config: SecondStageConfig, method: str = "nngp-nigp") -> nigp.NIGPModel:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    X, y = build_second_stage_training_set(dataset, i, h_star, config)
    return nigp.fit_nigp(
        X, y, iterations=config.nigp_iterations, learn_input_noise=method == "nngp-nigp",
        n_starts=config.n_starts, maxiter=config.maxiter,
    )


def forecast_load(model: nigp.NIGPModel, input_forecast: InputForecast, config: SecondStageConfig,
                  customer: int = -1, features=None, method: str = "nngp-nigp") -> LoadForecast:
    """Stochastic-input prediction at ``N(mu_1, diag(V_1))`` restricted to the model's features.

    ``features`` are the component buses the model was trained on; by default
    ``config.selected_features`` or every forecast component.
    """
    feats = features if features is not None else (config.selected_features or input_forecast.components)
    sub = input_forecast.subset(feats)
    if len(sub.mean) != model.dim:
        raise ValidationError(f"model expects {model.dim} features, forecast provides {len(sub.mean)}")
    var_in = sub.variance if method == "nngp-nigp" else np.zeros_like(sub.variance)
    test = nigp.StochasticTestInput(sub.mean, var_in)
    mean, var = nigp.predict_stochastic(model, test, include_noise=True)
    lo, hi = nigp.predictive_interval(mean, var, config.interval_level)
    return LoadForecast(float(mean), float(var), float(lo), float(hi), input_forecast.hour, customer, method)


def baseline_gp_forecast(dataset, i, h_star, config: SecondStageConfig, input_forecast: InputForecast,
                         model: nigp.NIGPModel | None = None) -> LoadForecast:
    """Standard GP fed the stage-one mean as a point input, ignoring its variance."""
    if model is None:
        model = fit_second_stage(dataset, i, h_star, config, method="baseline-gp")
    return forecast_load(model, input_forecast, config, i, _features(dataset, i, config), "baseline-gp")


# ---------------------------------------------------------------- sensitivity


def run_gsa_stage1(dataset, i, j, h_star, config: FirstStageConfig | None = None,
                   n: int | None = None, seed: int = 0, table=None) -> gsa.SensitivityReport:
    """Sensitivity of the ``theta_{i,j}`` forecaster to each hour of each component.

    The model uses one lag day of every component (in component order), so
    the report covers ``24 (N - 1)`` inputs with one ``H`` value per component.
    """
    config = config or FirstStageConfig()
    comps = dataset.components(i)
    full = replace(config, n_in=1, n_j=0, neighbor_indices=None)
    if h_star - full.history_hours() < 0:
        raise ValidationError(f"hour {h_star} lacks {full.history_hours()} hours of history")
    D = dataset.angle_differences(i)[:h_star]
    hours = np.arange(h_star - HOURS_PER_DAY * full.n_t1, h_star)
    X = _first_stage_inputs(D, comps, comps, hours, 1)
    y = D[hours, comps.index(j)]
    scaler = FeatureScaler(X)
    if table is None and not config.nngp.analytic_relu:
        table = nngp.get_table(config.nngp.nonlinearity)
    model = nngp.fit_nngp(scaler(X), y, config.nngp, table)
    mean_fn = nngp.nngp_posterior_mean(model)
    names = [f"theta_{i}_{k}@{hr}" for k in comps for hr in range(-HOURS_PER_DAY, 0)]
    report = gsa.sensitivity_analysis(lambda Z: mean_fn(scaler(Z)), X, n=n or config.gsa_samples,
                                      seed=seed, feature_names=names)
    report.H = gsa.first_stage_importance(report.total_indices)
    return report


def run_gsa_stage2(dataset, i, h_star, config: SecondStageConfig | None = None,
                   n: int = 10_000, seed: int = 0) -> gsa.SensitivityReport:
    """Sensitivity of the load model (all ``N - 1`` features) to each feature."""
    config = replace(config or SecondStageConfig(), selected_features=None)
    X, _ = build_second_stage_training_set(dataset, i, h_star, config)
    model = fit_second_stage(dataset, i, h_star, config)

    def f(Z):
        return nigp.predict_deterministic_batch(model, Z)[0]

    names = [f"theta_{i}_{k}" for k in dataset.components(i)]
    return gsa.sensitivity_analysis(f, X, n=n, seed=seed, feature_names=names)


def select_neighbors(dataset, i, h_star, config: FirstStageConfig, seed: int = 0, table=None) -> dict:
    """Top-``n_j`` components by ``H`` for each component, excluding itself."""
    comps = dataset.components(i)
    out = {}
    for j in comps:
        report = run_gsa_stage1(dataset, i, j, h_star, config, seed=seed, table=table)
        H = report.H.copy()
        H[comps.index(j)] = -np.inf
        order = np.argsort(-H, kind="stable")[: config.n_j]
        out[j] = tuple(comps[int(p)] for p in order)
    return out


def resolve_neighbors(dataset, i, h_star, config: FirstStageConfig, seed: int = 0) -> FirstStageConfig:
    """Fill in neighbor sets that the config leaves unspecified."""
    comps = dataset.components(i)
    if config.n_j > len(comps) - 1:
        raise ConfigurationError(f"n_j = {config.n_j} exceeds N - 2 = {len(comps) - 1}")
    known = dict(config.neighbor_indices or {})
    if config.n_j == 0 or all(j in known for j in comps):
        return config
    log.info("selecting first-stage neighbors for customer %d by sensitivity analysis", i)
    chosen = select_neighbors(dataset, i, h_star, config, seed=seed)
    chosen.update(known)
    return replace(config, neighbor_indices=chosen)


def all_neighbors(dataset, i, config: FirstStageConfig) -> FirstStageConfig:
    """Full-dimensional stage one: every other component is a neighbor."""
    comps = dataset.components(i)
    nb = {j: tuple(k for k in comps if k != j) for j in comps}
    return replace(config, n_j=len(comps) - 1, neighbor_indices=nb)


# ---------------------------------------------------------------- protocol


@dataclass
class DayResult:
    customer: int
    day: int
    forecasts: dict
    actuals: np.ndarray
    timings: dict


def forecast_day(dataset, i, day, first: FirstStageConfig, second: SecondStageConfig,
                 methods=METHODS, table=None) -> DayResult:
    """24 hour-ahead forecasts for ``day``; models are fit once at the day's first hour."""
    h0 = HOURS_PER_DAY * day
    if h0 + HOURS_PER_DAY > dataset.n_hours:
        raise ValidationError(f"day {day} is beyond the dataset")
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}; choose from {METHODS}")
    timings = {}
    t = time.perf_counter()
    stage1 = fit_first_stage(dataset, i, h0, first, table)
    inputs = [predict_inputs(stage1, dataset, i, h, first.n_in) for h in range(h0, h0 + HOURS_PER_DAY)]
    timings["first_stage"] = time.perf_counter() - t
    feats = _features(dataset, i, second)
    forecasts = {}
    for m in methods:
        t = time.perf_counter()
        model = fit_second_stage(dataset, i, h0, second, m)
        forecasts[m] = [forecast_load(model, f, second, i, feats, m) for f in inputs]
        timings[f"second_stage[{m}]"] = time.perf_counter() - t
    actuals = dataset.loads[h0 : h0 + HOURS_PER_DAY, i].copy()
    return DayResult(i, day, forecasts, actuals, timings)


def second_stage_day_time(dataset, i, day, second: SecondStageConfig, input_forecasts) -> float:
    """Wall-clock seconds to fit the load model and issue a day of forecasts."""
    t = time.perf_counter()
    model = fit_second_stage(dataset, i, HOURS_PER_DAY * day, second)
    feats = _features(dataset, i, second)
    for f in input_forecasts:
        forecast_load(model, f, second, i, feats)
    return time.perf_counter() - t


@dataclass
class RunResult:
    days: list
    first_configs: dict
    second_configs: dict
    timings: dict


def run(dataset, customers, days, first: FirstStageConfig, second: SecondStageConfig,
        methods=METHODS, use_gsa: bool = True, n_features: int = 1, gsa_seed: int = 0) -> RunResult:
    """Forecast ``days`` for each customer.

    With ``use_gsa`` the stage-one neighbors and stage-two features are chosen
    by sensitivity analysis once per customer, at the first requested day.
    Without it both stages use every component.
    """
    days = sorted(days)
    if not days or not customers:
        raise ConfigurationError("need at least one customer and one day")
    table = None if first.nngp.analytic_relu else nngp.get_table(first.nngp.nonlinearity)
    results, firsts, seconds, timings = [], {}, {}, {}
    for i in customers:
        h0 = HOURS_PER_DAY * days[0]
        t = time.perf_counter()
        if use_gsa:
            f_cfg = resolve_neighbors(dataset, i, h0, first, seed=gsa_seed)
            s_cfg = second
            if second.selected_features is None:
                rep = run_gsa_stage2(dataset, i, h0, second, n=first.gsa_samples, seed=gsa_seed)
                comps = dataset.components(i)
                s_cfg = replace(second, selected_features=tuple(
                    comps[p] for p in gsa.select_features(rep.total_indices, n_features)))
        else:
            f_cfg = all_neighbors(dataset, i, first)
            s_cfg = replace(second, selected_features=None)
        timings[i] = {"selection": time.perf_counter() - t}
        firsts[i], seconds[i] = f_cfg, s_cfg
        for d in days:
            results.append(forecast_day(dataset, i, d, f_cfg, s_cfg, methods, table))
    return RunResult(results, firsts, seconds, timings)


@dataclass(frozen=True)
class Fold:
    train_start: int
    train_end: int
    validation_start: int
    validation_end: int


def cross_validate(dataset, i, param_grid, validation_days, method: str = "nngp-nigp"):
    """Choose the grid point with the lowest mean validation MAPE.

    ``param_grid`` is a sequence of ``(FirstStageConfig, SecondStageConfig)``.
    Each validation day is one fold whose models see only hours before it;
    ties go to the earlier grid entry.  Returns ``(first, second, folds, scores)``.
    """
    grid = list(param_grid)
    if not grid:
        raise ConfigurationError("parameter grid is empty")
    if not validation_days:
        raise ConfigurationError("no validation days")
    scores = []
    folds = []
    for first, second in grid:
        errs = []
        for d in validation_days:
            h0 = HOURS_PER_DAY * d
            back = max(first.history_hours(), HOURS_PER_DAY * second.n_t2)
            folds.append(Fold(h0 - back, h0, h0, h0 + HOURS_PER_DAY))
            res = forecast_day(dataset, i, d, first, second, (method,))
            errs.append(mape(res.actuals, [f.point for f in res.forecasts[method]]))
        scores.append(float(np.mean(errs)))
    best = int(np.argmin(scores))
    return grid[best][0], grid[best][1], folds, scores


# ---------------------------------------------------------------- outputs


def write_forecast_csv(path, results, method: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["customer", "day", "hour", "actual", "point", "lower", "upper"])
        for r in results:
            for k, f in enumerate(r.forecasts[method]):
                w.writerow([r.customer, r.day, k, repr(float(r.actuals[k])), repr(f.point),
                            repr(f.lower), repr(f.upper)])


def read_forecast_csv(path):
    """Rows grouped by ``(customer, day)``: arrays of actual, point, lower, upper."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["customer", "day", "hour", "actual", "point", "lower", "upper"]
        if reader.fieldnames != expected:
            raise ValidationError(f"{path}: expected header {','.join(expected)}")
        for line, row in enumerate(reader, start=2):
            try:
                key = (int(row["customer"]), int(row["day"]))
                groups.setdefault(key, []).append(
                    (int(row["hour"]), *(float(row[c]) for c in expected[3:]))
                )
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{line}: malformed row: {exc}") from exc
    out = {}
    for key, rows in groups.items():
        arr = np.array(sorted(rows))
        out[key] = {"actual": arr[:, 1], "point": arr[:, 2], "interval": arr[:, 3:5]}
    return out
