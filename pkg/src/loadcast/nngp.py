"""Infinite-width deep network kernel (NNGP) and GP prediction with it.

The layer recursion is

    K^0(x, x') = bias_var + weight_var * x.x' / d_in
    K^l(x, x') = bias_var + weight_var * F(K^{l-1}(x, x'), K^{l-1}(x, x), K^{l-1}(x', x'))

with ``F(k_xy, k, k) = E[phi(u) phi(v)]`` for ``(u, v)`` bivariate normal with
variances ``k`` and covariance ``k_xy``.  ``F`` is tabulated once on a
(variance, correlation) grid and bilinearly interpolated.  Inputs are
rescaled to ``|x|^2 = d_in`` so every point shares the same self-covariance
at each layer, which is what makes a 2-D table sufficient.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import IllConditionedError, OutOfRangeError, ValidationError

log = logging.getLogger(__name__)

TABLE_CACHE_ENV = "LOADCAST_TABLE_CACHE"
TABLE_FORMAT = "loadcast-nngp-table"
TABLE_VERSION = 1


class Nonlinearity(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def __call__(self, u):
        if self is Nonlinearity.RELU:
            return np.maximum(u, 0.0)
        if self is Nonlinearity.TANH:
            return np.tanh(u)
        return np.asarray(u, dtype=float)


@dataclass(frozen=True)
class NNGPConfig:
    """Hyperparameters of the deep kernel.

    ``noise_var`` is the observation noise used at prediction time, in output
    units.  ``None`` means ``1e-6 * var(y)``; ``"mle"`` picks it by marginal
    likelihood over a log grid.
    """

    depth: int = 3
    weight_var: float = 1.0
    bias_var: float = 1.0
    nonlinearity: Nonlinearity = Nonlinearity.RELU
    input_dim: int | None = None
    noise_var: float | str | None = None
    analytic_relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nonlinearity", Nonlinearity(self.nonlinearity))
        if int(self.depth) != self.depth or self.depth < 2:
            raise ValidationError(f"depth must be an integer >= 2, got {self.depth}")
        if not self.weight_var > 0:
            raise ValidationError("weight_var must be positive")
        if not self.bias_var >= 0:
            raise ValidationError("bias_var must be nonnegative")
        if self.input_dim is not None and self.input_dim < 1:
            raise ValidationError("input_dim must be positive")
        if isinstance(self.noise_var, str):
            if self.noise_var != "mle":
                raise ValidationError(f"noise_var must be a number, None or 'mle', got {self.noise_var!r}")
        elif self.noise_var is not None and not self.noise_var >= 0:
            raise ValidationError("noise_var must be nonnegative")
        if self.analytic_relu and self.nonlinearity is not Nonlinearity.RELU:
            raise ValidationError("analytic_relu requires the relu nonlinearity")


@dataclass(frozen=True)
class NonlinearityTable:
    nonlinearity: Nonlinearity
    u: np.ndarray
    s: np.ndarray
    c: np.ndarray
    F: np.ndarray

    @property
    def params(self) -> dict:
        return {
            "nonlinearity": self.nonlinearity.value,
            "n_g": len(self.u),
            "u_max": float(self.u[-1]),
            "n_v": len(self.s),
            "s_max": float(self.s[-1]),
            "n_corr": len(self.c),
        }

    def lookup(self, s, c):
        """Bilinear interpolation of ``F`` at variance ``s`` and correlation ``c``.

        ``s`` must already lie on the variance grid range; ``c`` is clamped.
        """
        s = np.asarray(s, dtype=float)
        c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
        ds = self.s[1] - self.s[0]
        dc = self.c[1] - self.c[0]
        ps = (s - self.s[0]) / ds
        pc = (c - self.c[0]) / dc
        i0 = np.clip(np.floor(ps).astype(int), 0, len(self.s) - 2)
        j0 = np.clip(np.floor(pc).astype(int), 0, len(self.c) - 2)
        ts = ps - i0
        tc = pc - j0
        F = self.F
        return (
            (1 - ts) * (1 - tc) * F[i0, j0]
            + ts * (1 - tc) * F[i0 + 1, j0]
            + (1 - ts) * tc * F[i0, j0 + 1]
            + ts * tc * F[i0 + 1, j0 + 1]
        )


def build_table(
    nonlinearity=Nonlinearity.RELU,
    n_g: int = 401,
    u_max: float = 10.0,
    n_v: int = 301,
    s_max: float = 64.0,
    n_corr: int = 301,
) -> NonlinearityTable:
    """Tabulate ``F`` as a normalized Gaussian-weighted sum over a ``u`` grid.

    For cell ``(s_i, c_j)`` the weights are the bivariate normal density with
    covariance ``s_i [[1, c_j], [c_j, 1]]`` evaluated at every grid pair
    ``(u_a, u_b)``.  In sum/difference coordinates that density factors into
    ``exp(-(u_a+u_b)^2 / 4s(1+c)) * exp(-(u_a-u_b)^2 / 4s(1-c))``, and on a
    uniform grid both sums and differences live on lattices of ``2 n_g - 1``
    points.  Re-indexing ``phi(u_a) phi(u_b)`` by (sum, difference) turns every
    row of the table into two small matrix products.  At ``|c| = 1`` the
    matching factor collapses to an indicator, which is the exact degenerate
    limit; the ``s = 0`` row is ``phi(0)^2``.
    """
    nonlinearity = Nonlinearity(nonlinearity)
    if min(n_g, n_v, n_corr) < 3:
        raise ValidationError("table grids need at least 3 points each")
    if not (0 < s_max < u_max**2):
        raise ValidationError("table requires 0 < s_max < u_max**2")
    u = np.linspace(-u_max, u_max, n_g)
    s = np.linspace(0.0, s_max, n_v)
    c = np.linspace(-1.0, 1.0, n_corr)
    h = u[1] - u[0]

    phi = nonlinearity(u)
    a, b = np.meshgrid(np.arange(n_g), np.arange(n_g), indexing="ij")
    k_sum = (a + b).ravel()
    k_diff = (a - b + n_g - 1).ravel()
    M = np.zeros((2 * n_g - 1, 2 * n_g - 1))
    M0 = np.zeros_like(M)
    M[k_sum, k_diff] = np.outer(phi, phi).ravel()
    M0[k_sum, k_diff] = 1.0
    sums = -2.0 * u_max + h * np.arange(2 * n_g - 1)
    diffs = h * (np.arange(2 * n_g - 1) - (n_g - 1))
    sums[n_g - 1] = 0.0
    diffs[n_g - 1] = 0.0

    def factor(vals, scale):
        # exp(-v^2 / scale), with scale == 0 meaning an indicator at v == 0
        out = np.zeros((len(scale), len(vals)))
        pos = scale > 0
        out[pos] = np.exp(-(vals[None, :] ** 2) / scale[pos, None])
        out[~pos] = (vals == 0.0)[None, :]
        return out

    # a+b and a-b+n_g-1 share parity up to a fixed offset: split the lattice
    # into its two non-empty sub-lattices to skip the structural zeros.
    off = (n_g - 1) % 2
    blocks = [
        (rows, cols, np.ascontiguousarray(M[rows, cols]), np.ascontiguousarray(M0[rows, cols]))
        for rows, cols in ((slice(0, None, 2), slice(off, None, 2)), (slice(1, None, 2), slice(1 - off, None, 2)))
    ]
    phi0 = float(nonlinearity(np.array(0.0)))
    F = np.empty((n_v, n_corr))
    for i, si in enumerate(s):
        if si == 0.0:
            F[i] = phi0**2
            continue
        g_sum = factor(sums, 4.0 * si * (1.0 + c))
        g_diff = factor(diffs, 4.0 * si * np.maximum(1.0 - c, 0.0))
        num = np.zeros(n_corr)
        den = np.zeros(n_corr)
        for rows, cols, Mb, M0b in blocks:
            gs = np.ascontiguousarray(g_sum[:, rows])
            gd = g_diff[:, cols]
            num += np.einsum("jk,jk->j", gs @ Mb, gd)
            den += np.einsum("jk,jk->j", gs @ M0b, gd)
        with np.errstate(invalid="ignore", divide="ignore"):
            F[i] = np.where(den > 0, num / den, phi0**2)
    if not np.all(np.isfinite(F)):
        raise OutOfRangeError("nonlinearity table contains non-finite entries")
    for arr in (u, s, c, F):
        arr.flags.writeable = False
    return NonlinearityTable(nonlinearity, u, s, c, F)


def _cache_path(cache_dir, params: dict) -> Path:
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
    return Path(cache_dir) / f"nngp-table-{params['nonlinearity']}-{digest}.npz"


def save_table(table: NonlinearityTable, path) -> None:
    """Write a table as ``.npz`` with a JSON header of format, version and grid params."""
    header = {"format": TABLE_FORMAT, "version": TABLE_VERSION, **table.params}
    np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), F=table.F)


def load_table(path, expected: dict | None = None) -> NonlinearityTable | None:
    """Read a cached table; ``None`` if the header does not match ``expected`` exactly."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            F = np.array(data["F"])
    except (OSError, ValueError, KeyError):
        return None
    if header.get("format") != TABLE_FORMAT or header.get("version") != TABLE_VERSION:
        return None
    params = {k: v for k, v in header.items() if k not in ("format", "version")}
    if expected is not None and params != expected:
        return None
    u = np.linspace(-params["u_max"], params["u_max"], params["n_g"])
    s = np.linspace(0.0, params["s_max"], params["n_v"])
    c = np.linspace(-1.0, 1.0, params["n_corr"])
    if F.shape != (len(s), len(c)):
        return None
    for arr in (u, s, c, F):
        arr.flags.writeable = False
    return NonlinearityTable(Nonlinearity(params["nonlinearity"]), u, s, c, F)


@functools.lru_cache(maxsize=16)
def get_table(
    nonlinearity=Nonlinearity.RELU,
    n_g: int = 401,
    u_max: float = 10.0,
    n_v: int = 301,
    s_max: float = 64.0,
    n_corr: int = 301,
    cache_dir: str | None = None,
) -> NonlinearityTable:
    """Memoized ``build_table`` backed by an optional on-disk cache.

    The cache directory defaults to ``$LOADCAST_TABLE_CACHE`` when set.
    """
    nonlinearity = Nonlinearity(nonlinearity)
    params = {
        "nonlinearity": nonlinearity.value,
        "n_g": int(n_g),
        "u_max": float(u_max),
        "n_v": int(n_v),
        "s_max": float(s_max),
        "n_corr": int(n_corr),
    }
    cache_dir = cache_dir or os.environ.get(TABLE_CACHE_ENV)
    if cache_dir:
        path = _cache_path(cache_dir, params)
        table = load_table(path, params)
        if table is not None:
            return table
    table = build_table(nonlinearity, n_g, u_max, n_v, s_max, n_corr)
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_table(table, path)
    return table


def relu_expectation(k_xy, k_xx):
    """Closed form ``E[relu(u) relu(v)]`` (arc-cosine kernel of degree one)."""
    k_xx = np.asarray(k_xx, dtype=float)
    cos_a = np.clip(np.asarray(k_xy, dtype=float) / k_xx, -1.0, 1.0)
    alpha = np.arccos(cos_a)
    return k_xx / (2 * np.pi) * (np.sin(alpha) + (np.pi - alpha) * cos_a)


def base_kernel(x, x_prime, config: NNGPConfig) -> float:
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape != x_prime.shape or x.ndim != 1:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    if config.input_dim is not None and x.shape[0] != config.input_dim:
        raise ValidationError(f"expected input_dim {config.input_dim}, got {x.shape[0]}")
    return float(config.bias_var + config.weight_var * (x @ x_prime) / x.shape[0])


def _check_variance(k_xx, table: NonlinearityTable | None):
    k = np.asarray(k_xx)
    if np.any(k < 0):
        raise OutOfRangeError("negative self-covariance in layer recursion")
    if table is not None and np.any(k > table.s[-1] * (1 + 1e-9)):
        raise OutOfRangeError(
            f"self-covariance {np.max(k):.4g} exceeds the table's s_max={table.s[-1]:.4g}; "
            "rebuild the table with a larger s_max (and u_max)"
        )


def layer_step(k_xy, k_xx, k_yy, config: NNGPConfig, table: NonlinearityTable | None):
    """One layer of the recursion, vectorized over ``k_xy``.

    Requires ``k_xx == k_yy`` (constant-norm inputs).
    """
    k_xx = np.asarray(k_xx, dtype=float)
    if np.any(np.abs(k_xx - np.asarray(k_yy, dtype=float)) > 1e-9 * np.maximum(1.0, np.abs(k_xx))):
        raise ValidationError("layer_step needs equal self-covariances; normalize inputs first")
    if config.analytic_relu:
        _check_variance(k_xx, None)
        F = relu_expectation(k_xy, k_xx)
    else:
        if table is None or table.nonlinearity is not config.nonlinearity:
            raise ValidationError("a table for the configured nonlinearity is required")
        _check_variance(k_xx, table)
        s = np.clip(k_xx, table.s[0], table.s[-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(k_xx > 0, np.asarray(k_xy, dtype=float) / np.where(k_xx > 0, k_xx, 1.0), 1.0)
        F = table.lookup(s, c)
    return config.bias_var + config.weight_var * F


def normalize_inputs(X) -> np.ndarray:
    """Rescale each row to squared norm ``d_in``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValidationError("inputs contain non-finite values")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("zero input vector cannot be scaled to constant norm")
    return X * (np.sqrt(X.shape[1]) / norms)


def _recursion(k_cross, s0, config, table, symmetric):
    K = k_cross
    s = s0
    for _ in range(config.depth):
        if table is not None and not config.analytic_relu and s > (table.u[-1] / 5.0) ** 2:
            log.warning(
                "layer variance %.3g is large relative to u_max=%.3g; the table's "
                "truncated grid loses accuracy there", s, table.u[-1],
            )
        K = layer_step(K, s, s, config, table)
        s = float(layer_step(s, s, s, config, table))
        if symmetric:
            np.fill_diagonal(K, s)
    return K, s


def kernel_matrix(inputs, config: NNGPConfig, table: NonlinearityTable | None = None, other=None):
    """``K^L`` between rows of ``inputs`` (and ``other``, if given).

    Rows are rescaled to constant norm first.
    """
    X = normalize_inputs(inputs)
    if config.input_dim is not None and X.shape[1] != config.input_dim:
        raise ValidationError(f"expected input_dim {config.input_dim}, got {X.shape[1]}")
    d = X.shape[1]
    s0 = config.bias_var + config.weight_var
    if other is None:
        K0 = config.bias_var + config.weight_var * (X @ X.T) / d
        np.fill_diagonal(K0, s0)
        return _recursion(K0, s0, config, table, True)[0]
    Z = normalize_inputs(other)
    if Z.shape[1] != d:
        raise ValidationError("dimension mismatch between input sets")
    K0 = config.bias_var + config.weight_var * (X @ Z.T) / d
    return _recursion(K0, s0, config, table, False)[0]


def prior_variance(config: NNGPConfig, table: NonlinearityTable | None = None) -> float:
    s = config.bias_var + config.weight_var
    for _ in range(config.depth):
        s = float(layer_step(s, s, s, config, table))
    return s


def _cholesky_with_jitter(A):
    """Cholesky of ``A``, adding 1e-10..1e-6 x mean diagonal on failure."""
    scale = float(np.mean(np.diag(A)))
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            L = scipy.linalg.cholesky(A + jitter * scale * np.eye(len(A)), lower=True)
            return L, jitter * scale
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedError(
        "kernel matrix is not positive definite even with 1e-6 relative jitter; "
        "increase the observation noise or remove duplicate inputs"
    )


@dataclass(frozen=True)
class NNGPModel:
    config: NNGPConfig
    table: NonlinearityTable | None
    train_inputs: np.ndarray
    train_outputs: np.ndarray
    kernel: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    noise_var: float
    y_mean: float
    y_scale: float
    jitter: float = 0.0
    lml: float = field(default=float("nan"))

    @property
    def prior_var(self) -> float:
        return float(self.kernel[0, 0]) * self.y_scale**2


def _noise_grid_lml(K, y):
    """Pick the noise level maximizing the marginal likelihood on a log grid."""
    evals, evecs = np.linalg.eigh(K)
    evals = np.maximum(evals, 0.0)
    proj = evecs.T @ y
    grid = np.logspace(-6, 0.5, 60) * float(np.mean(np.diag(K)))
    best = None
    for nv in grid:
        lam = evals + nv
        lml = -0.5 * np.sum(proj**2 / lam) - 0.5 * np.sum(np.log(lam))
        if best is None or lml > best[1]:
            best = (nv, lml)
    return best[0]


def fit_nngp(X, y, config: NNGPConfig, table: NonlinearityTable | None = None) -> NNGPModel:
    """Condition the NNGP prior on ``(X, y)``.

    Outputs are standardized internally; the kernel acts on standardized
    outputs and predictions are mapped back.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValidationError("inputs and outputs disagree in length")
    if not np.all(np.isfinite(y)):
        raise ValidationError("outputs contain non-finite values")
    if config.input_dim is not None and X.shape[1] != config.input_dim:
        raise ValidationError(f"expected input_dim {config.input_dim}, got {X.shape[1]}")
    if table is None and not config.analytic_relu:
        table = get_table(config.nonlinearity)
    Xn = normalize_inputs(X)
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    if not y_scale > 0:
        y_scale = 1.0
    ys = (y - y_mean) / y_scale
    K = kernel_matrix(Xn, config, table)
    if config.noise_var == "mle":
        noise = float(_noise_grid_lml(K, ys))
    elif config.noise_var is None:
        noise = 1e-6
    else:
        noise = float(config.noise_var) / y_scale**2
    L, jitter = _cholesky_with_jitter(K + noise * np.eye(len(K)))
    alpha = scipy.linalg.cho_solve((L, True), ys)
    lml = float(-0.5 * ys @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(ys) * np.log(2 * np.pi))
    arrays = [Xn, y.copy(), K, L, alpha]
    for arr in arrays:
        arr.flags.writeable = False
    return NNGPModel(
        config, table, Xn, arrays[1], K, L, alpha,
        noise * y_scale**2, y_mean, y_scale, jitter, lml,
    )


def nngp_predict_batch(model: NNGPModel, test_inputs, include_noise: bool = False):
    """Posterior mean and variance at each row of ``test_inputs``."""
    Xs = np.atleast_2d(np.asarray(test_inputs, dtype=float))
    if Xs.shape[1] != model.train_inputs.shape[1]:
        raise ValidationError(
            f"test input has dimension {Xs.shape[1]}, model expects {model.train_inputs.shape[1]}"
        )
    Ks = kernel_matrix(Xs, model.config, model.table, other=model.train_inputs)
    prior = float(model.kernel[0, 0])
    mean = model.y_mean + model.y_scale * (Ks @ model.alpha)
    v = scipy.linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = prior - np.sum(v**2, axis=0)
    var = np.maximum(var, 0.0) * model.y_scale**2
    if include_noise:
        var = var + model.noise_var
    return mean, var


def nngp_predict(model: NNGPModel, test_input, include_noise: bool = False) -> tuple[float, float]:
    mean, var = nngp_predict_batch(model, np.asarray(test_input, dtype=float)[None, :], include_noise)
    return float(mean[0]), float(var[0])


def nngp_posterior_mean(model: NNGPModel, chunk: int = 2048):
    """Vectorized posterior-mean callable, handy as a sensitivity surrogate.

    Skips the variance computation and evaluates in row chunks to bound memory.
    """

    def f(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0])
        for start in range(0, X.shape[0], chunk):
            Ks = kernel_matrix(X[start : start + chunk], model.config, model.table, other=model.train_inputs)
            out[start : start + chunk] = Ks @ model.alpha
        return model.y_mean + model.y_scale * out

    return f
