"""Squared-exponential GP regression with ARD length scales.

Kernel convention: ``C(x, x') = process_var * exp(-0.5 (x-x')^T diag(lam)^-1 (x-x'))``
where ``lam`` (``SEHyperParams.length_scales``) holds the diagonal of the
length-scale matrix, i.e. squared characteristic lengths.

The likelihood supports two optional extra noise terms on the diagonal:
a fixed per-point ``correction`` vector, and a learned term
``noise_basis @ input_noise`` used by the noisy-input model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import FittingError, IllConditionedError, ValidationError

log = logging.getLogger(__name__)

LOG_BOUNDS = (-18.0, 14.0)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class SEHyperParams:
    process_var: float
    length_scales: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.length_scales, dtype=float)).copy()
        lam.flags.writeable = False
        object.__setattr__(self, "length_scales", lam)
        if not self.process_var > 0:
            raise ValidationError("process_var must be positive")
        if np.any(~(lam > 0)):
            raise ValidationError("length scales must be positive")
        if not self.noise_var >= 0:
            raise ValidationError("noise_var must be nonnegative")

    def __eq__(self, other):
        if not isinstance(other, SEHyperParams):
            return NotImplemented
        return (
            self.process_var == other.process_var
            and self.noise_var == other.noise_var
            and np.array_equal(self.length_scales, other.length_scales)
        )

    __hash__ = None

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def scaled(self, y_scale: float) -> "SEHyperParams":
        """Hyperparameters for outputs multiplied by ``y_scale``."""
        return replace(
            self,
            process_var=self.process_var * y_scale**2,
            noise_var=self.noise_var * y_scale**2,
        )

    def to_dict(self) -> dict:
        return {
            "process_var": float(self.process_var),
            "length_scales": [float(v) for v in self.length_scales],
            "noise_var": float(self.noise_var),
        }

    @classmethod
    def from_dict(cls, d) -> "SEHyperParams":
        return cls(d["process_var"], np.asarray(d["length_scales"]), d["noise_var"])


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def sq_dist_scaled(X1, X2, lam) -> np.ndarray:
    """``(x - x')^T diag(lam)^-1 (x - x')`` for all row pairs."""
    A = X1 / np.sqrt(lam)
    B = X2 / np.sqrt(lam)
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def se_cov(X1, X2, hyper: SEHyperParams) -> np.ndarray:
    X1 = _as_2d(X1)
    X2 = _as_2d(X2)
    if X1.shape[1] != hyper.dim or X2.shape[1] != hyper.dim:
        raise ValidationError(f"inputs must have dimension {hyper.dim}")
    return hyper.process_var * np.exp(-0.5 * sq_dist_scaled(X1, X2, hyper.length_scales))


def se_kernel(x, x_prime, hyper: SEHyperParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != x_prime.shape or x.shape != (hyper.dim,):
        raise ValidationError(f"dimension mismatch: {x.shape}, {x_prime.shape}, d={hyper.dim}")
    r = x - x_prime
    return float(hyper.process_var * np.exp(-0.5 * np.sum(r * r / hyper.length_scales)))


def cholesky_jitter(A: np.ndarray):
    """Lower Cholesky factor, retrying with 1e-10..1e-6 x mean-diagonal jitter."""
    scale = float(np.mean(np.diag(A)))
    for j in JITTERS:
        try:
            return scipy.linalg.cholesky(A + (j * scale) * np.eye(len(A)), lower=True), j * scale
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedError("covariance matrix not positive definite even after jitter")


def cho_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of ``L L^T`` from its lower Cholesky factor (upper triangle zero)."""
    inv, info = scipy.linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise IllConditionedError(f"inverse from Cholesky factor failed (info={info})")
    # dpotri fills the lower triangle only; L's upper triangle is zero
    full = inv + inv.T
    full[np.diag_indices_from(full)] *= 0.5
    return full


@dataclass(frozen=True)
class GPModel:
    """A GP conditioned on training data with fixed hyperparameters.

    ``correction`` is the extra per-point noise added to the diagonal of the
    training covariance.  ``alpha`` solves the corrected system against the
    centred outputs ``Y - y_mean``.
    """

    hyper: SEHyperParams
    X: np.ndarray
    Y: np.ndarray
    y_mean: float
    gram: np.ndarray
    correction: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def solve(self, B):
        """``(C + noise I + diag(correction))^-1 B`` via the cached factor."""
        return scipy.linalg.cho_solve((self.chol, True), B)

    def to_dict(self) -> dict:
        return {
            "hyper": self.hyper.to_dict(),
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
            "y_mean": self.y_mean,
            "correction": self.correction.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "GPModel":
        return make_model(
            d["X"], d["Y"], SEHyperParams.from_dict(d["hyper"]),
            correction=d.get("correction"), y_mean=d.get("y_mean"),
        )


def make_model(X, Y, hyper: SEHyperParams, correction=None, y_mean=None) -> GPModel:
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] != Y.shape[0]:
        raise ValidationError("X and Y disagree in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValidationError("training data contain non-finite values")
    n = X.shape[0]
    correction = np.zeros(n) if correction is None else np.asarray(correction, dtype=float).ravel()
    if correction.shape != (n,) or np.any(correction < 0):
        raise ValidationError("correction must be a nonnegative vector with one entry per point")
    y_mean = float(np.mean(Y)) if y_mean is None else float(y_mean)
    C = se_cov(X, X, hyper)
    A = C + np.diag(hyper.noise_var + correction)
    L, jitter = cholesky_jitter(A)
    alpha = scipy.linalg.cho_solve((L, True), Y - y_mean)
    for arr in (X, Y, C, correction, L, alpha):
        arr.flags.writeable = False
    return GPModel(hyper, X, Y, y_mean, C, correction, L, alpha, jitter)


# ---------------------------------------------------------------- likelihood


def _pack(hyper: SEHyperParams, input_noise=None) -> np.ndarray:
    parts = [np.log([hyper.process_var]), np.log(hyper.length_scales), np.log([hyper.noise_var])]
    if input_noise is not None:
        parts.append(np.log(input_noise))
    return np.concatenate(parts)


def _unpack(theta, d, with_input_noise):
    sf2 = np.exp(theta[0])
    lam = np.exp(theta[1 : d + 1])
    sn2 = np.exp(theta[d + 1])
    sx2 = np.exp(theta[d + 2 :]) if with_input_noise else None
    return sf2, lam, sn2, sx2


class _Objective:
    """Negative log marginal likelihood and gradient in log-parameter space.

    Squared distances and their per-dimension weighted sums are formed with
    matrix products, so an evaluation costs O(n^3 + n^2 d).
    """

    def __init__(self, X, y, correction=None, noise_basis=None):
        self.X = X
        self.X2 = X * X
        self.y = y
        self.n, self.d = X.shape
        self.correction = np.zeros(self.n) if correction is None else correction
        self.noise_basis = noise_basis
        self.trace = []

    def _kernel(self, sf2, lam):
        Xs = self.X / np.sqrt(lam)
        sq = np.sum(Xs * Xs, axis=1)
        r2 = sq[:, None] + sq[None, :] - 2.0 * (Xs @ Xs.T)
        np.maximum(r2, 0.0, out=r2)
        np.fill_diagonal(r2, 0.0)
        return sf2 * np.exp(-0.5 * r2)

    def __call__(self, theta):
        sf2, lam, sn2, sx2 = _unpack(theta, self.d, self.noise_basis is not None)
        K = self._kernel(sf2, lam)
        diag = sn2 + self.correction
        if sx2 is not None:
            diag = diag + self.noise_basis @ sx2
        A = K.copy()
        A[np.diag_indices(self.n)] += diag
        try:
            L, _ = cholesky_jitter(A)
        except IllConditionedError:
            return 1e25, np.zeros_like(theta)
        alpha = scipy.linalg.cho_solve((L, True), self.y)
        nll = 0.5 * self.y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * self.n * np.log(2 * np.pi)
        W = np.outer(alpha, alpha)
        W -= cho_inverse(L)
        WK = W * K
        grad = np.empty_like(theta)
        grad[0] = -0.5 * np.sum(WK)
        # sum_ij WK_ij (x_ik - x_jk)^2 = 2 (x_k^2 . rowsum - x_k . (WK x_k)) for symmetric WK
        r = WK.sum(axis=1)
        weighted = 2.0 * (self.X2.T @ r - np.sum(self.X * (WK @ self.X), axis=0))
        grad[1 : self.d + 1] = -0.25 * weighted / lam
        wdiag = np.diag(W)
        grad[self.d + 1] = -0.5 * sn2 * np.sum(wdiag)
        if sx2 is not None:
            grad[self.d + 2 :] = -0.5 * sx2 * (wdiag @ self.noise_basis)
        return float(nll), grad


@dataclass
class FitResult:
    hyper: SEHyperParams
    lml: float
    init_lml: float
    input_noise: np.ndarray | None = None
    trace: list = field(default_factory=list)
    converged: bool = True


def log_marginal_likelihood(X, Y, hyper: SEHyperParams, correction=None) -> float:
    """Log marginal likelihood with the mean of ``Y`` removed."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    obj = _Objective(X, Y - Y.mean(), None if correction is None else np.asarray(correction, float))
    return -obj(_pack(hyper))[0]


def default_starts(X, n_starts: int = 5) -> list[tuple[float, np.ndarray, float]]:
    """Initial points in standardized-output units: (process_var, lam, noise_var)."""
    std = np.std(X, axis=0)
    std = np.where(std > 0, std, 1.0)
    grid = [
        (1.0, (1.0 * std) ** 2, 0.1),
        (1.0, (10.0 * std) ** 2, 0.1),
        (1.0, (0.1 * std) ** 2, 0.1),
        (1.0, (1.0 * std) ** 2, 1e-3),
        (1.0, (10.0 * std) ** 2, 1e-3),
    ]
    return grid[:n_starts]


def _recorder(trace):
    def record(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    return record


def _optimize(obj: _Objective, starts, maxiter, bounds=None):
    """Run L-BFGS-B from each start; return (best_theta, best_nll, trace_of_best)."""
    best = (None, np.inf, [])
    for theta0 in starts:
        trace = []
        f0, _ = obj(theta0)
        trace.append(-f0)

        record = _recorder(trace)

        try:
            res = scipy.optimize.minimize(
                obj, theta0, jac=True, method="L-BFGS-B",
                bounds=bounds or [LOG_BOUNDS] * len(theta0), callback=record,
                options={"maxiter": maxiter},
            )
        except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - defensive
            log.debug("optimizer start failed: %s", exc)
            continue
        f = res.fun if res.fun <= f0 else f0
        theta = res.x if res.fun <= f0 else theta0
        if np.isfinite(f) and f < best[1]:
            best = (theta, f, trace)
    return best


def fit_mle(
    X,
    Y,
    init: SEHyperParams | None = None,
    correction=None,
    n_starts: int = 5,
    maxiter: int = 200,
    noise_floor: float = 1e-8,
) -> FitResult:
    """Maximum-likelihood hyperparameters.

    Optimizes in log space on standardized outputs from ``init`` plus the
    default start grid, and never returns something worse than ``init``.
    ``correction`` (original output units squared) is held fixed.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValidationError("training data contain non-finite values")
    y_mean = float(np.mean(Y))
    y_scale = float(np.std(Y))
    if not y_scale > 0:
        y_scale = 1.0
    ys = (Y - y_mean) / y_scale
    corr = None if correction is None else np.asarray(correction, dtype=float) / y_scale**2
    obj = _Objective(X, ys, corr)
    bounds = np.array(LOG_BOUNDS)
    lo_noise = np.log(noise_floor)

    def clip(theta):
        theta = np.clip(theta, *bounds)
        theta[X.shape[1] + 1] = max(theta[X.shape[1] + 1], lo_noise)
        return theta

    starts = []
    init_theta = None
    if init is not None:
        if init.dim != X.shape[1]:
            raise ValidationError("init has the wrong dimension")
        init_s = init.scaled(1.0 / y_scale)
        init_theta = _pack(replace(init_s, noise_var=max(init_s.noise_var, noise_floor)))
        starts.append(clip(init_theta))
    for sf2, lam, sn2 in default_starts(X, n_starts - len(starts) if init is not None else n_starts):
        starts.append(clip(_pack(SEHyperParams(sf2, lam, sn2))))
    opt_bounds = [LOG_BOUNDS] * (X.shape[1] + 1) + [(lo_noise, LOG_BOUNDS[1])]
    theta, f, trace = _optimize(obj, starts, maxiter, opt_bounds)
    init_lml = -obj(init_theta)[0] if init_theta is not None else -np.inf
    if theta is None:
        raise FittingError("maximum likelihood fit failed from every start", best=init)
    sf2, lam, sn2, _ = _unpack(theta, X.shape[1], False)
    hyper = SEHyperParams(sf2, lam, sn2).scaled(y_scale)
    # report likelihoods in original output units
    shift = len(Y) * np.log(y_scale)
    return FitResult(hyper, -f - shift, init_lml - shift, None, [t - shift for t in trace])


def fit_gp(X, Y, init=None, correction=None, **kw) -> GPModel:
    res = fit_mle(X, Y, init=init, correction=correction, **kw)
    return make_model(X, Y, res.hyper, correction=correction)


# ---------------------------------------------------------------- prediction


def gp_predict_batch(model: GPModel, X_star, include_noise: bool = False):
    """Conditional mean and variance at each row of ``X_star``.

    The variance is that of the latent function; ``include_noise`` adds the
    output noise variance for intervals on new observations.
    """
    Xs = _as_2d(X_star)
    if Xs.shape[1] != model.dim:
        raise ValidationError(f"test inputs must have dimension {model.dim}")
    Ks = se_cov(Xs, model.X, model.hyper)
    mean = model.y_mean + Ks @ model.alpha
    v = scipy.linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = model.hyper.process_var - np.sum(v * v, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + model.hyper.noise_var
    return mean, var


def gp_predict(model: GPModel, x_star, include_noise: bool = False) -> tuple[float, float]:
    x = np.atleast_1d(np.asarray(x_star, dtype=float))
    m, v = gp_predict_batch(model, x[None, :], include_noise)
    return float(m[0]), float(v[0])


def posterior_mean_gradient_batch(model: GPModel, X) -> np.ndarray:
    """Gradient of the posterior mean at each row of ``X`` (shape ``(m, d)``)."""
    X = _as_2d(X)
    K = se_cov(X, model.X, model.hyper)
    Ka = K @ model.alpha
    KaX = K @ (model.alpha[:, None] * model.X)
    return -(X * Ka[:, None] - KaX) / model.hyper.length_scales


def posterior_mean_gradient(model: GPModel, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return posterior_mean_gradient_batch(model, x[None, :])[0]
