"""Variance-based global sensitivity analysis for functional inputs.

Inputs are decomposed by principal components of the centred sample
matrix, the component coefficients are modeled by a Gaussian mixture, and
Monte Carlo input matrices are rebuilt from mixture draws.  Total Sobol'
indices come from Jansen's estimator

    S_Ti = (2n)^-1 sum_j (f(A)_j - f(A_B^(i))_j)^2 / Var(f(C)).
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

HOURS_PER_BLOCK = 24


@dataclass(frozen=True)
class FunctionalDecomposition:
    """``samples ~ mean + coefficients @ basis`` with orthonormal basis rows."""

    mean: np.ndarray
    basis: np.ndarray
    coefficients: np.ndarray
    retained_variance: float
    explained: np.ndarray

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def grid_size(self) -> int:
        return self.mean.shape[0]

    def project(self, samples) -> np.ndarray:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        return (samples - self.mean) @ self.basis.T

    def reconstruct(self, coefficients) -> np.ndarray:
        coefficients = np.atleast_2d(np.asarray(coefficients, dtype=float))
        return self.mean + coefficients @ self.basis


def decompose(
    samples,
    p: int | None = None,
    variance_target: float = 0.99,
    max_components: int = 10,
) -> FunctionalDecomposition:
    """Principal-component basis for a set of curves on a common grid.

    With ``p`` given it is used directly (reduced to the sample rank with a
    warning); otherwise the smallest ``p`` reaching ``variance_target`` is
    chosen, capped at ``max_components``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValidationError("samples contain non-finite values")
    n, T = X.shape
    if p is not None and (p < 0 or n < p):
        raise ValidationError(f"need at least p={p} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    power = sv**2
    total = power.sum()
    if total <= 1e-300 or power[0] <= 1e-14 * total:
        # identical samples: nothing to explain beyond the mean
        return FunctionalDecomposition(mean, np.zeros((0, T)), np.zeros((n, 0)), 1.0, np.zeros(0))
    rank = int(np.sum(power > 1e-12 * power[0]))
    frac = np.cumsum(power) / total
    if p is None:
        p = int(np.searchsorted(frac, variance_target - 1e-12) + 1)
        p = min(p, max_components, rank)
    elif p > rank:
        warnings.warn(f"requested {p} components but samples have rank {rank}; using {rank}")
        p = rank
    basis = Vt[:p].copy()
    # deterministic sign: largest-magnitude entry of each basis curve positive
    signs = np.sign(basis[np.arange(p), np.argmax(np.abs(basis), axis=1)])
    basis *= signs[:, None]
    coefs = Xc @ basis.T
    retained = float(frac[p - 1]) if p > 0 else 0.0
    return FunctionalDecomposition(mean, basis, coefs, min(retained, 1.0), power[:p] / total)


@dataclass(frozen=True)
class CoefficientSampler:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: tuple = ()

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.dim == 0:
            return np.zeros((n, 0))
        comp = rng.choice(self.k, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for c in range(self.k):
            idx = comp == c
            L = np.linalg.cholesky(self.covariances[c])
            out[idx] = self.means[c] + z[idx] @ L.T
        return out


def fit_sampler(
    decomposition: FunctionalDecomposition,
    k: int = 2,
    seed: int = 0,
    covariance_floor: float | None = None,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> CoefficientSampler:
    """EM fit of a ``k``-component Gaussian mixture to the coefficients.

    ``k`` is reduced when fewer than ``5 k p`` samples are available.
    ``covariance_floor`` defaults to 1e-9 of the mean coefficient variance.
    """
    if k < 1:
        raise ValidationError("mixture needs at least one component")
    beta = decomposition.coefficients
    n, p = beta.shape
    if p == 0:
        return CoefficientSampler(np.ones(1), np.zeros((1, 0)), np.zeros((1, 0, 0)))
    k_eff = max(1, min(k, n // (5 * p)))
    if k_eff < k:
        log.info("reducing mixture components from %d to %d for %d samples in %d dims", k, k_eff, n, p)
    if covariance_floor is None:
        covariance_floor = 1e-9 * float(np.mean(np.var(beta, axis=0)))
    gm = GaussianMixture(
        n_components=k_eff, covariance_type="full", reg_covar=max(covariance_floor, 1e-300),
        max_iter=1, warm_start=True, random_state=seed, init_params="kmeans",
    )
    trace = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(max_iter):
            gm.fit(beta)
            trace.append(float(gm.score(beta)) * n)
            if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-1])):
                break
    return CoefficientSampler(
        gm.weights_.copy(), gm.means_.copy(), gm.covariances_.copy(), tuple(trace)
    )


@dataclass(frozen=True)
class SampleMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def AB(self, i: int) -> np.ndarray:
        """``A`` with its ``i``-th column taken from ``B``."""
        out = self.A.copy()
        out[:, i] = self.B[:, i]
        return out

    @classmethod
    def from_distribution(cls, draw, n: int, seed: int) -> "SampleMatrices":
        """Build from ``draw(rng, n) -> (n, m)`` with three independent streams."""
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
        return cls(*(np.asarray(draw(r, n), dtype=float) for r in rngs))


def generate_matrices(
    sampler: CoefficientSampler,
    decomposition: FunctionalDecomposition,
    n: int,
    seed: int = 0,
    m: int | None = None,
) -> SampleMatrices:
    """Monte Carlo input matrices whose rows are reconstructed functional inputs."""
    if n < 100:
        raise ValidationError("use at least 100 Monte Carlo rows")
    if m is not None and m != decomposition.grid_size:
        raise ValidationError(f"decomposition grid has {decomposition.grid_size} slots, expected {m}")

    def draw(rng, size):
        return decomposition.reconstruct(sampler.sample(size, rng))

    return SampleMatrices.from_distribution(draw, n, seed)


class _Evaluations:
    """Memoized surrogate evaluations on the sample matrices."""

    def __init__(self, f_hat, matrices: SampleMatrices):
        self.f = f_hat
        self.mat = matrices
        self._cache = {}

    def _eval(self, X):
        y = np.asarray(self.f(X), dtype=float).ravel()
        if y.shape != (X.shape[0],):
            raise ValidationError("surrogate must return one value per row")
        return y

    def get(self, key):
        if key not in self._cache:
            if key in ("A", "B", "C"):
                self._cache[key] = self._eval(getattr(self.mat, key))
            else:
                self._cache[key] = self._eval(self.mat.AB(key))
        return self._cache[key]

    def output_variance(self):
        fC = self.get("C")
        V = float(np.var(fC, ddof=1))
        if not V > 0:
            raise NumericalError("surrogate output has zero variance; Sobol' indices are undefined")
        m4 = float(np.mean((fC - fC.mean()) ** 4))
        return V, max(m4 - V**2, 0.0) / len(fC)


def jansen_total_index(f_hat, matrices: SampleMatrices, i: int, evaluations=None):
    """Total-effect index of input ``i`` and its delta-method standard error."""
    ev = evaluations if evaluations is not None else _Evaluations(f_hat, matrices)
    V, var_V = ev.output_variance()
    diff = ev.get("A") - ev.get(i)
    half_sq = 0.5 * diff * diff
    num = float(np.mean(half_sq))
    n = len(half_sq)
    var_num = float(np.var(half_sq, ddof=1)) / n
    estimate = num / V
    std_error = np.sqrt(var_num / V**2 + (num**2 / V**4) * var_V)
    return estimate, float(std_error)


def first_order_index(f_hat, matrices: SampleMatrices, i: int, evaluations=None):
    """Saltelli (2010) first-order estimator ``mean(f(B) (f(A_B^i) - f(A))) / V``."""
    ev = evaluations if evaluations is not None else _Evaluations(f_hat, matrices)
    V, var_V = ev.output_variance()
    prod = ev.get("B") * (ev.get(i) - ev.get("A"))
    num = float(np.mean(prod))
    var_num = float(np.var(prod, ddof=1)) / len(prod)
    return num / V, float(np.sqrt(var_num / V**2 + (num**2 / V**4) * var_V))


@dataclass
class SensitivityReport:
    total_indices: np.ndarray
    std_errors: np.ndarray
    n: int
    first_order: np.ndarray | None = None
    first_order_std_errors: np.ndarray | None = None
    H: np.ndarray | None = None
    feature_names: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def __post_init__(self):
        if not self.feature_names:
            self.feature_names = [str(i) for i in range(len(self.total_indices))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "total_index", "std_error"])
            for name, s, e in zip(self.feature_names, self.total_indices, self.std_errors):
                w.writerow([name, repr(float(s)), repr(float(e))])

    def write_h_csv(self, path, block_names=None) -> None:
        if self.H is None:
            raise ValidationError("report has no block aggregates")
        names = block_names or [str(b) for b in range(len(self.H))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "H_value"])
            for name, h in zip(names, self.H):
                w.writerow([name, repr(float(h))])


def total_indices(
    f_hat,
    matrices: SampleMatrices,
    first_order: bool = False,
    feature_names=None,
    batch_rows: int | None = None,
) -> SensitivityReport:
    """Jansen total indices for every input column, evaluating ``f(A)`` and
    ``f(C)`` once.  Accumulation order is fixed by column index."""
    ev = _Evaluations(f_hat, matrices)
    m = matrices.m
    S = np.empty(m)
    E = np.empty(m)
    S1 = np.empty(m) if first_order else None
    E1 = np.empty(m) if first_order else None
    for i in range(m):
        S[i], E[i] = jansen_total_index(f_hat, matrices, i, ev)
        if first_order:
            S1[i], E1[i] = first_order_index(f_hat, matrices, i, ev)
        ev._cache.pop(i, None)
    return SensitivityReport(S, E, matrices.n, S1, E1, feature_names=list(feature_names or []))


def first_stage_importance(indices, block: int = HOURS_PER_BLOCK) -> np.ndarray:
    """Sum consecutive blocks of ``block`` hourly indices, one sum per component."""
    s = np.asarray(indices, dtype=float).ravel()
    if len(s) == 0 or len(s) % block:
        raise ValidationError(f"index vector length {len(s)} is not a multiple of {block}")
    return s.reshape(-1, block).sum(axis=1)


def select_features(scores, count: int) -> list[int]:
    """Indices of the ``count`` largest scores in non-increasing order.

    Negative estimates count as zero; ties go to the lower index.
    """
    s = np.maximum(np.asarray(scores, dtype=float).ravel(), 0.0)
    if not 0 <= count <= len(s):
        raise ValidationError(f"cannot select {count} of {len(s)} features")
    order = np.argsort(-s, kind="stable")
    return [int(k) for k in order[:count]]


def sensitivity_analysis(
    f_hat,
    training_inputs,
    n: int = 10_000,
    seed: int = 0,
    variance_target: float = 0.99,
    max_components: int = 10,
    k: int = 2,
    feature_names=None,
) -> SensitivityReport:
    """End-to-end: decompose the training inputs, fit the coefficient mixture,
    sample matrices and estimate total indices for every input."""
    dec = decompose(training_inputs, variance_target=variance_target, max_components=max_components)
    sampler = fit_sampler(dec, k=k, seed=seed)
    mats = generate_matrices(sampler, dec, n, seed=seed)
    return total_indices(f_hat, mats, feature_names=feature_names)
