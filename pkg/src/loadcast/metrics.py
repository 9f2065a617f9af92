"""Day-level forecast evaluation: MAPE and interval coverage."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

HOURS_PER_DAY = 24


def _vector(values, name):
    arr = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contain non-finite values")
    return arr


def mape(actuals, points) -> float:
    """Mean absolute percentage error as a fraction (0.1 means 10%)."""
    a = _vector(actuals, "actuals")
    p = _vector(points, "points")
    if a.shape != p.shape or a.size == 0:
        raise ValidationError("actuals and points must be nonempty and equal in length")
    zero = np.flatnonzero(a == 0)
    if zero.size:
        raise ValidationError(f"actual load is zero at hour {int(zero[0])}; MAPE is undefined")
    return float(np.mean(np.abs(a - p) / np.abs(a)))


def _intervals(intervals, n):
    iv = np.asarray(intervals, dtype=float)
    if iv.shape != (n, 2):
        raise ValidationError(f"expected {n} (lower, upper) intervals, got shape {iv.shape}")
    bad = np.flatnonzero(iv[:, 0] > iv[:, 1])
    if bad.size:
        raise ValidationError(f"interval at hour {int(bad[0])} has lower > upper")
    return iv


def covered(actuals, intervals) -> np.ndarray:
    """Boolean mask of actuals inside their closed interval."""
    a = _vector(actuals, "actuals")
    iv = _intervals(intervals, len(a))
    return (iv[:, 0] <= a) & (a <= iv[:, 1])


def coverage(actuals, intervals) -> float:
    """Fraction of actuals inside ``[lower, upper]``; boundaries count as covered."""
    mask = covered(actuals, intervals)
    if mask.size == 0:
        raise ValidationError("no hours to evaluate")
    return float(np.mean(mask))


@dataclass(frozen=True)
class DayEvaluation:
    actuals: np.ndarray
    points: np.ndarray
    intervals: np.ndarray
    mape: float
    cp: float
    covered_count: int

    @property
    def T(self) -> int:
        return len(self.actuals)


def evaluate_day(actuals, points, intervals) -> DayEvaluation:
    a = _vector(actuals, "actuals")
    if len(a) != HOURS_PER_DAY:
        raise ValidationError(f"a prediction day has {HOURS_PER_DAY} hours, got {len(a)}")
    p = _vector(points, "points")
    iv = _intervals(intervals, len(a))
    n_c = int(np.sum(covered(a, iv)))
    return DayEvaluation(a, p, iv, mape(a, p), n_c / HOURS_PER_DAY, n_c)


def write_summary_csv(path, rows) -> None:
    """``rows`` are ``(customer, day, DayEvaluation)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["customer", "day", "mape", "cp"])
        for customer, day, ev in rows:
            w.writerow([customer, day, repr(ev.mape), repr(ev.cp)])


def quartiles(values) -> dict:
    v = _vector(values, "values")
    if v.size == 0:
        raise ValidationError("no values to summarize")
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)), count=int(v.size))


def write_boxplot_csv(path, groups: dict) -> None:
    """Quartiles per group; ``groups`` maps (method, metric) to values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "count", "min", "q1", "median", "q3", "max"])
        for (method, metric), values in groups.items():
            q = quartiles(values)
            w.writerow([method, metric, q["count"], q["min"], q["q1"], q["median"], q["q3"], q["max"]])


def format_percent(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}%"
