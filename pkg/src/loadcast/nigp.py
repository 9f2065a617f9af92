"""Noisy-input GP: training-input noise via a first-order Taylor correction,
and prediction at a Gaussian-distributed test input.

Training: with observed inputs ``x = x_true + e_x``, ``e_x ~ N(0, diag(s_x))``,
the output noise at training point ``n`` becomes
``noise_var + sum_d grad_nd^2 s_x[d]`` where ``grad`` is the posterior-mean
gradient.  The gradients are recomputed between likelihood fits.

Prediction at ``x* ~ N(mu, diag(S))`` uses the exact Gaussian integrals of
the SE kernel: ``q = E[C(x*, X)]`` and ``Q = E[C(X, x*) C(x*, X)]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats

from . import gp_core
from .errors import NumericalError, ValidationError
from .gp_core import GPModel, SEHyperParams

log = logging.getLogger(__name__)

NEGATIVE_VARIANCE_TOL = 1e-8
INPUT_NOISE_CAP = 10.0


@dataclass(frozen=True)
class StochasticTestInput:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 2:
            if np.any(cov != np.diag(np.diag(cov))):
                raise ValidationError("test-input covariance must be diagonal")
            cov = np.diag(cov)
        cov = np.atleast_1d(cov).astype(float)
        if cov.shape != mean.shape:
            raise ValidationError("mean and covariance diagonal differ in length")
        if np.any(cov < 0) or not np.all(np.isfinite(cov)):
            raise ValidationError("test-input variances must be finite and nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def deterministic(cls, x) -> "StochasticTestInput":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros_like(x))


@dataclass(frozen=True)
class NIGPModel:
    """A GP whose training covariance carries the input-noise correction.

    ``base.correction`` equals ``gradients**2 @ input_noise``.
    """

    base: GPModel
    input_noise: np.ndarray
    gradients: np.ndarray
    status: str = "ok"
    lml: float = float("nan")
    diagnostics: dict = field(default_factory=lambda: {"clamped_variances": 0})
    _inverse: list = field(default_factory=list, repr=False, compare=False)

    @property
    def hyper(self) -> SEHyperParams:
        return self.base.hyper

    @property
    def dim(self) -> int:
        return self.base.dim

    def corrected_inverse(self) -> np.ndarray:
        if not self._inverse:
            self._inverse.append(gp_core.cho_inverse(self.base.chol))
        return self._inverse[0]

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "input_noise": self.input_noise.tolist(),
            "gradients": self.gradients.tolist(),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d) -> "NIGPModel":
        return cls(
            GPModel.from_dict(d["base"]),
            np.asarray(d["input_noise"], dtype=float),
            np.asarray(d["gradients"], dtype=float),
            d.get("status", "ok"),
        )


def nigp_from_gp(model: GPModel) -> NIGPModel:
    """Wrap a plain GP as a noisy-input model with zero training-input noise."""
    d = model.dim
    return NIGPModel(model, np.zeros(d), np.zeros((model.n, d)))


def _fit_with_input_noise(X, Y, grads, hyper, s_x0, n_starts, maxiter):
    """Joint MLE of SE hyperparameters and diagonal training-input noise."""
    y_mean = float(np.mean(Y))
    y_scale = float(np.std(Y)) or 1.0
    ys = (Y - y_mean) / y_scale
    basis = grads**2 / y_scale**2
    obj = gp_core._Objective(X, ys, None, basis)
    d = X.shape[1]
    x_var = np.var(X, axis=0)
    x_var = np.where(x_var > 0, x_var, 1.0)
    bounds = (
        [gp_core.LOG_BOUNDS] * (d + 1)
        + [(np.log(1e-8), gp_core.LOG_BOUNDS[1])]
        + [(np.log(1e-8 * v), np.log(INPUT_NOISE_CAP * v)) for v in x_var]
    )
    h = hyper.scaled(1.0 / y_scale)
    base = gp_core._pack(
        SEHyperParams(h.process_var, h.length_scales, max(h.noise_var, 1e-8))
    )
    starts = [np.concatenate([base, np.log(np.maximum(s, 1e-8 * x_var))]) for s in s_x0][:n_starts]
    starts = [np.clip(t, [b[0] for b in bounds], [b[1] for b in bounds]) for t in starts]
    best = (None, np.inf)
    for theta0 in starts:
        res = scipy.optimize.minimize(
            obj, theta0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter}
        )
        f0 = obj(theta0)[0]
        theta, f = (res.x, res.fun) if res.fun <= f0 else (theta0, f0)
        if f < best[1]:
            best = (theta, f)
    theta, f = best
    sf2, lam, sn2, sx2 = gp_core._unpack(theta, d, True)
    capped = bool(np.any(np.isclose(np.log(sx2), [b[1] for b in bounds[d + 2 :]])))
    return SEHyperParams(sf2, lam, sn2).scaled(y_scale), sx2, -f - len(Y) * np.log(y_scale), capped


def fit_nigp(
    X,
    Y,
    iterations: int = 2,
    learn_input_noise: bool = True,
    n_starts: int = 5,
    maxiter: int = 200,
) -> NIGPModel:
    """Fixed-point fit: GP fit, gradients, joint MLE with input noise, repeat."""
    if not 1 <= iterations <= 5:
        raise ValidationError("iterations must be between 1 and 5")
    X = gp_core._as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    res = gp_core.fit_mle(X, Y, n_starts=n_starts, maxiter=maxiter)
    model = gp_core.make_model(X, Y, res.hyper)
    d = X.shape[1]
    s_x = np.zeros(d)
    grads = np.zeros((len(Y), d))
    lml = res.lml
    status = "ok"
    if not learn_input_noise:
        return NIGPModel(model, s_x, grads, status, lml)
    x_var = np.var(X, axis=0)
    hyper = res.hyper
    for it in range(iterations):
        grads = gp_core.posterior_mean_gradient_batch(model, X)
        # later passes only refine the previous optimum
        starts = [s_x, 1e-2 * x_var] if it == 0 else [s_x]
        hyper, s_x, lml, capped = _fit_with_input_noise(
            X, Y, grads, hyper, starts, max(1, min(n_starts, len(starts))), maxiter
        )
        if capped:
            status = "input_noise_capped"
            log.warning("training input noise hit its cap of %gx the input variance", INPUT_NOISE_CAP)
        model = gp_core.make_model(X, Y, hyper, correction=grads**2 @ s_x)
    for arr in (s_x, grads):
        arr.flags.writeable = False
    return NIGPModel(model, s_x, grads, status, lml)


def predict_deterministic(model: NIGPModel, x_star, include_noise: bool = False):
    return gp_core.gp_predict(model.base, x_star, include_noise)


def predict_deterministic_batch(model: NIGPModel, X_star, include_noise: bool = False):
    return gp_core.gp_predict_batch(model.base, X_star, include_noise)


def _check_test(model, test: StochasticTestInput):
    if test.mean.shape != (model.dim,):
        raise ValidationError(f"test input has dimension {test.mean.shape[0]}, model expects {model.dim}")


def _log_q(model: NIGPModel, test: StochasticTestInput) -> np.ndarray:
    hyper = model.hyper
    lam, S = hyper.length_scales, test.cov
    a = model.base.X - test.mean
    log_det = np.sum(np.log1p(S / lam))
    return np.log(hyper.process_var) - 0.5 * log_det - 0.5 * np.sum(a * a / (S + lam), axis=1)


def _log_ratio(model: NIGPModel, test: StochasticTestInput) -> np.ndarray:
    """``log Q_ij - log q_i - log q_j`` in a form free of cancellation."""
    lam, S = model.hyper.length_scales, test.cov
    a = model.base.X - test.mean
    x = S / lam
    c = 0.5 * S * S / (lam * (lam + S) * (lam + 2.0 * S))
    b = S / (lam * (lam + 2.0 * S))
    r = np.sum(a * a * c, axis=1)
    return 0.5 * np.sum(np.log1p(x * x / (1.0 + 2.0 * x))) - r[:, None] - r[None, :] + (a * b) @ a.T


def compute_q(model: NIGPModel, test: StochasticTestInput) -> np.ndarray:
    _check_test(model, test)
    return np.exp(_log_q(model, test))


def compute_Q(model: NIGPModel, test: StochasticTestInput) -> np.ndarray:
    """Second moment ``E[C(x_i, x*) C(x_j, x*)]``; dimensions with zero variance
    contribute their deterministic limit."""
    _check_test(model, test)
    lq = _log_q(model, test)
    Q = np.exp(lq[:, None] + lq[None, :] + _log_ratio(model, test))
    return 0.5 * (Q + Q.T)


def compute_Q_centered(model: NIGPModel, test: StochasticTestInput) -> np.ndarray:
    """``Q - q q^T``, the covariance of the kernel vector under the test input."""
    _check_test(model, test)
    lq = _log_q(model, test)
    base = lq[:, None] + lq[None, :]
    delta = _log_ratio(model, test)
    with np.errstate(over="ignore", invalid="ignore"):
        C = np.where(delta > 1.0, np.exp(base + delta) - np.exp(base), np.exp(base) * np.expm1(np.minimum(delta, 1.0)))
    return 0.5 * (C + C.T)


def predict_stochastic(model: NIGPModel, test: StochasticTestInput, include_noise: bool = False):
    """Predictive mean and variance when the test input is ``N(mean, diag(cov))``.

    The variance ``sf2 + a^T Q a - m^2 - tr(A^-1 Q)`` is evaluated as
    ``(sf2 - q^T A^-1 q) + a^T C a - tr(A^-1 C)`` with ``C = Q - q q^T``,
    which avoids cancelling large terms when ``A`` is nearly singular.
    """
    _check_test(model, test)
    if not np.any(test.cov > 0):
        return predict_deterministic(model, test.mean, include_noise)
    alpha = model.base.alpha
    q = compute_q(model, test)
    C = compute_Q_centered(model, test)
    mean_c = float(alpha @ q)
    v = scipy.linalg.solve_triangular(model.base.chol, q, lower=True)
    Ainv = model.corrected_inverse()
    var = (model.hyper.process_var - float(v @ v)) + float(alpha @ C @ alpha) - float(np.sum(Ainv * C))
    if var < 0:
        if var < -NEGATIVE_VARIANCE_TOL:
            raise NumericalError(
                f"stochastic predictive variance {var:.3e} is negative beyond tolerance; "
                "the corrected covariance is likely ill-conditioned"
            )
        model.diagnostics["clamped_variances"] = model.diagnostics.get("clamped_variances", 0) + 1
        var = 0.0
    if include_noise:
        var += model.hyper.noise_var
    return model.base.y_mean + mean_c, var


def predictive_interval(mean: float, variance: float, level: float = 0.95) -> tuple[float, float]:
    if not 0 < level < 1:
        raise ValidationError("interval level must be in (0, 1)")
    if variance < 0:
        raise ValidationError("variance must be nonnegative")
    half = scipy.stats.norm.ppf(0.5 * (1.0 + level)) * np.sqrt(variance)
    return mean - half, mean + half
