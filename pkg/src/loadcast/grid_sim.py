"""Synthetic hourly phase-angle and load data from a DC power-flow surrogate.

The DC model is lossless with unit voltage magnitudes, so the net injection
at bus ``i`` is ``p_i = sum_k b_ik (theta_i - theta_k)``.  One bus is both the
angle reference and the slack that balances the system every hour.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DataIOError, TopologyError, ValidationError

MIN_DAYS = 120


@dataclass(frozen=True)
class BusSystem:
    """Grid topology: ``lines`` holds ``(from_bus, to_bus, susceptance)``."""

    n_buses: int
    lines: tuple[tuple[int, int, float], ...]
    reference_bus: int = 0

    def __post_init__(self):
        lines = tuple((int(a), int(b), float(s)) for a, b, s in self.lines)
        object.__setattr__(self, "lines", lines)
        if self.n_buses < 2:
            raise TopologyError("a bus system needs at least two buses")
        if not 0 <= self.reference_bus < self.n_buses:
            raise TopologyError(f"reference bus {self.reference_bus} out of range")
        parent = list(range(self.n_buses))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b, s in lines:
            if not (0 <= a < self.n_buses and 0 <= b < self.n_buses):
                raise TopologyError(f"line ({a}, {b}) references a missing bus")
            if a == b:
                raise TopologyError(f"self-loop at bus {a}")
            if not s > 0:
                raise TopologyError(f"line ({a}, {b}) has nonpositive susceptance {s}")
            parent[find(a)] = find(b)
        if len({find(k) for k in range(self.n_buses)}) != 1:
            raise TopologyError("bus system is not connected")

    def susceptance_matrix(self) -> np.ndarray:
        """Weighted Laplacian ``B`` with ``B @ theta = injections``."""
        B = np.zeros((self.n_buses, self.n_buses))
        for a, b, s in self.lines:
            B[a, a] += s
            B[b, b] += s
            B[a, b] -= s
            B[b, a] -= s
        return B

    def neighbors(self, bus: int) -> list[int]:
        out = set()
        for a, b, _ in self.lines:
            if a == bus:
                out.add(b)
            elif b == bus:
                out.add(a)
        return sorted(out)

    def to_dict(self) -> dict:
        return {
            "n_buses": self.n_buses,
            "reference_bus": self.reference_bus,
            "lines": [list(line) for line in self.lines],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BusSystem":
        unknown = set(data) - {"n_buses", "reference_bus", "lines", "name"}
        if unknown:
            raise ValidationError(f"unknown keys in system description: {sorted(unknown)}")
        try:
            return cls(
                n_buses=int(data["n_buses"]),
                lines=tuple(tuple(line) for line in data["lines"]),
                reference_bus=int(data.get("reference_bus", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed system description: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BusSystem":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"system file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"system file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def eight_bus_feeder() -> BusSystem:
    """Small radial feeder; bus 0 is the substation.

    Bus 2 hangs off bus 1 only, so its load is driven by a single angle
    difference.
    """
    lines = (
        (0, 1, 12.0),
        (1, 2, 8.0),
        (1, 3, 10.0),
        (3, 4, 9.0),
        (3, 5, 7.0),
        (5, 6, 6.0),
        (5, 7, 8.5),
    )
    return BusSystem(8, lines, reference_bus=0)


# IEEE 14-bus branch reactances (per unit); susceptance is 1/x.
_IEEE14_REACTANCE = (
    (0, 1, 0.05917), (0, 4, 0.22304), (1, 2, 0.19797), (1, 3, 0.17632),
    (1, 4, 0.17388), (2, 3, 0.17103), (3, 4, 0.04211), (3, 6, 0.20912),
    (3, 8, 0.55618), (4, 5, 0.25202), (5, 10, 0.19890), (5, 11, 0.25581),
    (5, 12, 0.13027), (6, 7, 0.17615), (6, 8, 0.11001), (8, 9, 0.08450),
    (8, 13, 0.27038), (9, 10, 0.19207), (11, 12, 0.19988), (12, 13, 0.34802),
)


def fourteen_bus_mesh() -> BusSystem:
    return BusSystem(14, tuple((a, b, 1.0 / x) for a, b, x in _IEEE14_REACTANCE), 0)


def solve_dc_power_flow(system: BusSystem, injections) -> np.ndarray:
    """Solve ``B theta = p`` with ``theta[reference_bus] = 0``.

    ``injections`` may be one vector of length ``n_buses`` or a
    ``(hours, n_buses)`` array; the result has the same shape.
    """
    p = np.asarray(injections, dtype=float)
    squeeze = p.ndim == 1
    p2 = np.atleast_2d(p)
    if p2.shape[-1] != system.n_buses:
        raise ValidationError(
            f"expected {system.n_buses} injections per hour, got {p2.shape[-1]}"
        )
    if not np.all(np.isfinite(p2)):
        raise ValidationError("injections contain non-finite values")
    imbalance = np.abs(p2.sum(axis=1))
    if np.any(imbalance > 1e-9):
        raise ValidationError(
            f"injections must sum to zero (max imbalance {imbalance.max():.3e})"
        )
    B = system.susceptance_matrix()
    keep = np.arange(system.n_buses) != system.reference_bus
    try:
        factor = scipy.linalg.cho_factor(B[np.ix_(keep, keep)])
    except np.linalg.LinAlgError as exc:
        raise TopologyError("reduced susceptance matrix is singular") from exc
    theta = np.zeros_like(p2)
    theta[:, keep] = scipy.linalg.cho_solve(factor, p2[:, keep].T).T
    return theta[0] if squeeze else theta


@dataclass(frozen=True)
class LoadProfileSpec:
    """Shape of the per-bus consumption profile.

    Load is ``base * diurnal * weekly * seasonal * exp(noise)`` where the log
    noise is an AR(1) process with stationary standard deviation
    ``noise_sigma``.
    """

    base_load: float | tuple[float, ...] = 1.0
    diurnal_amplitude: float = 0.35
    diurnal_peak_hour: float = 19.0
    weekend_factor: float = 0.9
    seasonal_amplitude: float = 0.15
    seasonal_peak_day: float = 200.0
    noise_sigma: float = 0.08
    noise_ar: float = 0.6
    bus_phase_jitter: float = 1.5


@dataclass(frozen=True)
class PVProfileSpec:
    """Rooftop PV: half-sine over daylight, scaled by a clear-sky fraction.

    The clear-sky fraction follows an AR(1) on the logit scale so cloudy
    spells persist for several hours.
    """

    capacity: float | tuple[float, ...] = 0.3
    sunrise: float = 6.0
    sunset: float = 19.0
    clear_sky_mean: float = 0.7
    cloud_ar: float = 0.8
    cloud_sigma: float = 0.8

    @classmethod
    def zero(cls) -> "PVProfileSpec":
        return cls(capacity=0.0)


@dataclass(frozen=True)
class HourlyDataset:
    """Hourly per-bus loads, injections and phase angles.

    ``loads`` are net of PV when ``pv_adjusted`` is set.  Arrays are
    ``(hours, buses)`` and read-only.
    """

    hours: np.ndarray
    loads: np.ndarray
    angles: np.ndarray
    pv_adjusted: bool = False
    injections: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("hours", "loads", "angles", "injections"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=int if name == "hours" else float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.loads.shape != self.angles.shape or self.loads.ndim != 2:
            raise ValidationError("loads and angles must share a (hours, buses) shape")
        if self.hours.shape != (self.loads.shape[0],):
            raise ValidationError("hours must index the rows of loads")
        if not (np.all(np.isfinite(self.loads)) and np.all(np.isfinite(self.angles))):
            raise ValidationError("dataset contains missing or non-finite entries")

    @property
    def n_hours(self) -> int:
        return self.loads.shape[0]

    @property
    def n_buses(self) -> int:
        return self.loads.shape[1]

    def components(self, i: int) -> list[int]:
        """Other buses in feature order for target ``i``."""
        return [k for k in range(self.n_buses) if k != i]

    def angle_differences(self, i: int) -> np.ndarray:
        """``theta_i - theta_k`` for every ``k != i``, as a ``(hours, N-1)`` array."""
        return self.angles[:, [i]] - self.angles[:, self.components(i)]

    def with_arrays(self, loads=None, angles=None) -> "HourlyDataset":
        return HourlyDataset(
            self.hours,
            self.loads if loads is None else loads,
            self.angles if angles is None else angles,
            self.pv_adjusted,
            self.injections,
        )

    def __eq__(self, other):
        if not isinstance(other, HourlyDataset):
            return NotImplemented
        return (
            self.pv_adjusted == other.pv_adjusted
            and np.array_equal(self.hours, other.hours)
            and np.array_equal(self.loads, other.loads)
            and np.array_equal(self.angles, other.angles)
        )

    __hash__ = None

    def to_csv(self, path) -> None:
        """Write long format ``hour,bus,load,theta`` with round-trip precision."""
        try:
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["hour", "bus", "load", "theta"])
                for t, hour in enumerate(self.hours):
                    for b in range(self.n_buses):
                        writer.writerow(
                            [int(hour), b, repr(float(self.loads[t, b])), repr(float(self.angles[t, b]))]
                        )
        except OSError as exc:
            raise DataIOError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path, pv_adjusted: bool = True) -> "HourlyDataset":
        path = Path(path)
        if not path.is_file():
            raise DataIOError(f"dataset file not found: {path}")
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        hours = raw[:, 0].astype(int)
        buses = raw[:, 1].astype(int)
        uniq_hours = np.unique(hours)
        n_buses = int(buses.max()) + 1
        if raw.shape[0] != len(uniq_hours) * n_buses:
            raise ValidationError(f"dataset {path} has missing (hour, bus) entries")
        row = np.searchsorted(uniq_hours, hours)
        loads = np.empty((len(uniq_hours), n_buses))
        angles = np.empty_like(loads)
        loads[row, buses] = raw[:, 2]
        angles[row, buses] = raw[:, 3]
        return cls(uniq_hours, loads, angles, pv_adjusted)


def _per_bus(value, n_buses: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n_buses, float(arr))
    if arr.shape != (n_buses,):
        raise ConfigurationError(f"per-bus parameter needs {n_buses} entries, got {arr.shape}")
    return arr


def _ar1(rng: np.random.Generator, shape, phi: float, sigma: float) -> np.ndarray:
    """AR(1) along axis 0 with stationary standard deviation ``sigma``."""
    eps = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = sigma * eps[0]
    innov = sigma * np.sqrt(1.0 - phi**2)
    for t in range(1, shape[0]):
        out[t] = phi * out[t - 1] + innov * eps[t]
    return out


def consumption_profile(n_buses: int, days: int, spec: LoadProfileSpec, rng) -> np.ndarray:
    hours = np.arange(24 * days)
    hod = hours % 24
    day = hours // 24
    base = _per_bus(spec.base_load, n_buses)
    phase = spec.bus_phase_jitter * rng.uniform(-1.0, 1.0, n_buses)
    diurnal = 1.0 + spec.diurnal_amplitude * np.cos(
        2 * np.pi * (hod[:, None] - spec.diurnal_peak_hour - phase[None, :]) / 24.0
    )
    weekly = np.where((day % 7) >= 5, spec.weekend_factor, 1.0)[:, None]
    seasonal = 1.0 + spec.seasonal_amplitude * np.cos(
        2 * np.pi * (day - spec.seasonal_peak_day) / 365.0
    )[:, None]
    noise = _ar1(rng, (len(hours), n_buses), spec.noise_ar, spec.noise_sigma)
    return base * diurnal * weekly * seasonal * np.exp(noise)


def pv_profile(n_buses: int, days: int, spec: PVProfileSpec, rng) -> np.ndarray:
    hours = np.arange(24 * days)
    hod = (hours % 24).astype(float)
    capacity = _per_bus(spec.capacity, n_buses)
    span = spec.sunset - spec.sunrise
    shape = np.clip(np.sin(np.pi * (hod - spec.sunrise) / span), 0.0, None)
    shape[(hod < spec.sunrise) | (hod > spec.sunset)] = 0.0
    # One shared weather process; clouds are regional.
    logit_mean = np.log(spec.clear_sky_mean / (1.0 - spec.clear_sky_mean))
    clouds = _ar1(rng, (len(hours), 1), spec.cloud_ar, spec.cloud_sigma)
    clear = 1.0 / (1.0 + np.exp(-(logit_mean + clouds)))
    return capacity[None, :] * shape[:, None] * clear


def generate_year(
    system: BusSystem,
    load_profile_spec: LoadProfileSpec | None = None,
    pv_profile_spec: PVProfileSpec | None = None,
    seed: int = 0,
    days: int = 365,
) -> HourlyDataset:
    """Simulate ``days`` of hourly operation.

    ``pv_profile_spec=None`` skips PV subtraction entirely.  Net loads may go negative when PV exceeds consumption; they are passed to
    the power flow unchanged.
    """
    if days < MIN_DAYS:
        raise ConfigurationError(
            f"horizon of {days} days is too short: need at least {MIN_DAYS} days "
            "to hold a 60-day first-stage training window (n_t1) plus evaluation days"
        )
    load_profile_spec = load_profile_spec or LoadProfileSpec()
    load_rng, pv_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    n = system.n_buses
    consumption = consumption_profile(n, days, load_profile_spec, load_rng)
    if pv_profile_spec is None:
        net, pv_adjusted = consumption, False
    else:
        net, pv_adjusted = consumption - pv_profile(n, days, pv_profile_spec, pv_rng), True
    injections = -net
    others = np.arange(n) != system.reference_bus
    injections[:, system.reference_bus] = net[:, others].sum(axis=1)
    # Absorb rounding so the zero-sum check holds exactly.
    injections[:, system.reference_bus] -= injections.sum(axis=1)
    angles = solve_dc_power_flow(system, injections)
    return HourlyDataset(np.arange(24 * days), net, angles, pv_adjusted, injections)
