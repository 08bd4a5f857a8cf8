"""Convex solvers and regression machinery for the nuisance working models.

Two fitters carry the method itself:

* :func:`fit_calibration_lasso` minimises the inverse-propensity calibration
  loss ``(1/n) sum_i [A_i exp(-g.z_i) + (1-A_i) g.z_i] + lam * ||g||_1`` whose
  stationarity conditions are the weighted covariate-balancing equations
  ``(1/n) sum_i {1 - A_i / pi(z_i; g)} z_i + lam * subgrad = 0``.
* :func:`fit_weighted_outcome_lasso` minimises the inverse-odds-weighted
  squared loss ``(1/2n) sum_i [w_i A_i (y_i - b.z_i)^2] + lam * ||b||_1`` with
  ``w_i = (1 - pi_i) / pi_i``.

Around them sit the standard fitters used by the comparator estimators
(logistic MLE, OLS, plain lasso variants, post-selection refits, the
ridge-stabilised double-selection system) and the default penalty formulas.

Conventions shared by every fitter:

* designs carry a leading intercept column; the intercept is unpenalized
  unless ``SolverOptions.penalize_intercept`` is set;
* covariates are internally rescaled to unit sample standard deviation
  before penalization and coefficients mapped back afterwards
  (``SolverOptions.standardize``); reported KKT residuals live on the
  standardized scale, which is the scale of the problem actually solved;
* all score/KKT residuals are on the mean scale, i.e. ``(1/n) sum_i ...``;
* solvers are pure functions of their inputs: no internal randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import expit, ndtri

from .dataset import Dataset
from .errors import (
    DegenerateData,
    DegenerateWeights,
    DomainError,
    NonConvergence,
    RankDeficient,
    Separation,
    UnboundedObjective,
)

# Coordinates this close to zero are snapped to exact zero so active sets are
# well defined.
ZERO_SNAP = 1e-14
# Iterate-norm bound on the standardized scale; crossing it flags a descent
# direction with no minimum (e.g. separable treatment).
NORM_GUARD = 1e4

DEFAULT_TOL = 1e-8
DEFAULT_PROX_ITER = 10_000
DEFAULT_CD_SWEEPS = 100_000
DEFAULT_NEWTON_ITER = 200


@dataclass
class SolverOptions:
    """Stopping and preprocessing controls shared by all iterative fitters.

    ``max_iter`` of ``None`` selects the per-solver default (10^4 proximal
    steps, 10^5 coordinate sweeps, 200 Newton iterations). Hitting the budget
    raises :class:`NonConvergence`; there is no silent partial return.
    """

    tol: float = DEFAULT_TOL
    max_iter: Optional[int] = None
    standardize: bool = True
    penalize_intercept: bool = False

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


DEFAULT_OPTIONS = SolverOptions()


@dataclass
class PropensityCoefficients:
    """Fitted propensity model coefficients (intercept first).

    ``active_set`` holds the positions ``j >= 1`` in the coefficient vector
    with a nonzero value (the intercept is excluded), so covariate column
    ``j - 1`` of the data corresponds to entry ``j``.
    """

    gamma: np.ndarray
    lambda_gamma: float
    active_set: tuple[int, ...]
    kkt_residual: float
    n_iter: int = 0
    objective_trace: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class OutcomeCoefficients:
    """Fitted outcome model coefficients; same shape rules as the propensity fit."""

    beta: np.ndarray
    lambda_beta: float
    active_set: tuple[int, ...]
    kkt_residual: float
    n_iter: int = 0
    objective_trace: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class NuisanceFit:
    """A paired propensity/outcome fit plus the label of the method that produced it."""

    gamma: PropensityCoefficients
    beta: OutcomeCoefficients
    method: str

    def __post_init__(self) -> None:
        if self.gamma.gamma.shape != self.beta.beta.shape:
            raise ValueError("propensity and outcome coefficient vectors must have equal length")


# ---------------------------------------------------------------------------
# penalty formulas
# ---------------------------------------------------------------------------


def normal_quantile(q: float) -> float:
    """Standard normal quantile function (inverse of the normal CDF)."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"normal_quantile requires 0 < q < 1, got {q}")
    return float(ndtri(q))


def default_penalties(n: int, p: int) -> tuple[float, float]:
    """Default penalty levels for the two nuisance fits at sample size ``n``, dimension ``p``.

    ``lam_gamma = 1.1/(2 sqrt(n)) * qnorm(1 - 0.05 / max(n, p log n))`` with the
    natural logarithm, and ``lam_beta = 2 * lam_gamma`` exactly.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if p < 1:
        raise ValueError("p must be at least 1")
    tail = 1.0 - 0.05 / max(float(n), p * math.log(n))
    lam_gamma = 1.1 / (2.0 * math.sqrt(n)) * normal_quantile(tail)
    return lam_gamma, 2.0 * lam_gamma


# ---------------------------------------------------------------------------
# shared numerical helpers
# ---------------------------------------------------------------------------


def _column_scales(x: np.ndarray) -> np.ndarray:
    """Sample standard deviation (ddof=1) of each covariate; zeros map to 1."""
    if x.shape[1] == 0:
        return np.ones(0)
    if x.shape[0] < 2:
        return np.ones(x.shape[1])
    s = np.std(x, axis=0, ddof=1)
    return np.where(s > 0.0, s, 1.0)


def _standardized_design(data: Dataset, opts: SolverOptions) -> tuple[np.ndarray, np.ndarray]:
    """Design with intercept, covariates scaled to unit sample SD when requested."""
    scales = _column_scales(data.x) if opts.standardize else np.ones(data.p)
    z = data.design()
    if data.p:
        z = z.copy()
        z[:, 1:] /= scales
    return z, scales


def _back_transform(coef: np.ndarray, scales: np.ndarray) -> np.ndarray:
    out = coef.copy()
    if scales.size:
        out[1:] /= scales
    return out


def _penalized_mask(dim: int, opts: SolverOptions) -> np.ndarray:
    mask = np.ones(dim, dtype=bool)
    mask[0] = opts.penalize_intercept
    return mask


def _active_set(coef: np.ndarray) -> tuple[int, ...]:
    return tuple(int(j) for j in range(1, coef.shape[0]) if coef[j] != 0.0)


def _kkt_sup_norm(grad: np.ndarray, coef: np.ndarray, lam: float, penalized: np.ndarray) -> float:
    """Sup-norm violation of the l1 subgradient stationarity conditions.

    Unpenalized coordinates must have a vanishing score; penalized nonzero
    coordinates must have score equal to ``-lam * sign``; penalized zero
    coordinates must have ``|score| <= lam``.
    """
    viol = np.abs(grad).astype(float)
    if lam > 0.0 and penalized.any():
        nz = penalized & (coef != 0.0)
        z = penalized & (coef == 0.0)
        viol = viol.copy()
        viol[nz] = np.abs(grad[nz] + lam * np.sign(coef[nz]))
        viol[z] = np.maximum(np.abs(grad[z]) - lam, 0.0)
    return float(viol.max()) if viol.size else 0.0


def _soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


# ---------------------------------------------------------------------------
# proximal gradient engine (smooth convex + l1)
# ---------------------------------------------------------------------------


def _backtrack(value_grad, y, fy, gy, step, lam, penalized):
    """One backtracking proximal step from ``y``; returns (z, fz, gz, step).

    The sufficient-decrease test carries a float-resolution slack so that
    evaluation noise near the optimum cannot drive the step size to zero.
    """
    slack = 16.0 * np.finfo(float).eps * (1.0 + abs(fy))
    while True:
        z = y - step * gy
        if lam > 0.0:
            z[penalized] = _soft_threshold(z[penalized], step * lam)
        z[np.abs(z) < ZERO_SNAP] = 0.0
        fz, gz = value_grad(z)
        d = z - y
        if np.isfinite(fz) and fz <= fy + float(gy @ d) + 0.5 * float(d @ d) / step + slack:
            return z, fz, gz, step
        step *= 0.5
        if step < 1e-18:
            raise NonConvergence("proximal line search stalled; no further progress possible")


def _prox_gradient(value_grad, x0, lam, penalized, tol, max_iter):
    """Monotone accelerated proximal gradient with backtracking line search.

    ``value_grad(x)`` returns ``(value, gradient)`` of the smooth part on the
    mean scale (gradient may be None when the value is not finite). Momentum
    steps are accepted only when they do not increase the composite objective,
    so the recorded objective trace is nonincreasing. Stops when the KKT
    sup-norm residual falls to ``tol``.
    """
    x = np.array(x0, dtype=float)
    fx, gx = value_grad(x)
    if not np.isfinite(fx):
        raise ValueError("objective is not finite at the starting point")

    def pen(v: np.ndarray) -> float:
        return lam * float(np.abs(v[penalized]).sum()) if lam > 0.0 else 0.0

    big_f = fx + pen(x)
    trace = [big_f]
    kkt = _kkt_sup_norm(gx, x, lam, penalized)
    if kkt <= tol:
        return x, kkt, 0, np.asarray(trace)

    x_prev = x
    t_mom = 1.0
    step = 1.0
    for it in range(1, max_iter + 1):
        step = min(step * 1.25, 1e12)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        if x_prev is x:
            y, fy, gy = x, fx, gx
        else:
            y = x + ((t_mom - 1.0) / t_next) * (x - x_prev)
            fy, gy = value_grad(y)
            if not np.isfinite(fy):
                y, fy, gy = x, fx, gx
        z, fz, gz, step = _backtrack(value_grad, y, fy, gy, step, lam, penalized)
        big_fz = fz + pen(z)
        if big_fz <= big_f:
            x_prev, x, fx, gx, big_f = x, z, fz, gz, big_fz
            t_mom = t_next
        else:
            # Momentum overshot: take a plain proximal step from x instead and
            # restart the momentum. The line-search certificate guarantees
            # descent mathematically, but near the optimum the improvement can
            # fall below float resolution of the objective, so the recorded
            # value is the running minimum.
            z, fz, gz, step = _backtrack(value_grad, x, fx, gx, step, lam, penalized)
            big_fz = min(fz + pen(z), big_f)
            x_prev, x, fx, gx, big_f = x, z, fz, gz, big_fz
            t_mom = 1.0
        trace.append(big_f)
        if float(np.linalg.norm(x)) > NORM_GUARD:
            raise UnboundedObjective(
                "iterate norm exceeded the divergence guard; the objective has no minimum "
                "(e.g. separable treatment with lambda = 0)"
            )
        kkt = _kkt_sup_norm(gx, x, lam, penalized)
        if kkt <= tol:
            return x, kkt, it, np.asarray(trace)
    raise NonConvergence(
        f"proximal gradient hit max_iter={max_iter} with kkt residual {kkt:.3e} > tol {tol:.1e}"
    )


# ---------------------------------------------------------------------------
# coordinate descent engine (weighted quadratic + l1)
# ---------------------------------------------------------------------------


def _cd_quadratic(gram, lin, lam, penalized, x0, tol, max_sweeps):
    """Cyclic coordinate descent with exact updates for
    ``0.5 x'Gx - c'x + lam * ||x[penalized]||_1``.

    ``gram``/``lin`` are on the mean scale, so the stationarity system is the
    mean-scale estimating equation. Returns (x, kkt, sweeps, objective_trace).
    """
    x = np.array(x0, dtype=float)
    dim = x.shape[0]
    diag = np.diag(gram).copy()
    u = gram @ x

    def objective() -> float:
        val = 0.5 * float(x @ u) - float(lin @ x)
        if lam > 0.0:
            val += lam * float(np.abs(x[penalized]).sum())
        return val

    trace = [objective()]
    kkt = _kkt_sup_norm(u - lin, x, lam, penalized)
    if kkt <= tol:
        return x, kkt, 0, np.asarray(trace)
    for sweep in range(1, max_sweeps + 1):
        for j in range(dim):
            if diag[j] <= 0.0:
                continue
            rho = lin[j] - u[j] + diag[j] * x[j]
            if penalized[j] and lam > 0.0:
                new = math.copysign(max(abs(rho) - lam, 0.0), rho) / diag[j]
            else:
                new = rho / diag[j]
            if abs(new) < ZERO_SNAP:
                new = 0.0
            delta = new - x[j]
            if delta != 0.0:
                u += gram[:, j] * delta
                x[j] = new
        u = gram @ x  # refresh to cancel incremental drift
        trace.append(objective())
        kkt = _kkt_sup_norm(u - lin, x, lam, penalized)
        if kkt <= tol:
            return x, kkt, sweep, np.asarray(trace)
    raise NonConvergence(
        f"coordinate descent hit max sweeps={max_sweeps} with kkt residual {kkt:.3e} > tol {tol:.1e}"
    )


# ---------------------------------------------------------------------------
# damped Newton engine (smooth strictly convex problems)
# ---------------------------------------------------------------------------


def _newton(value_grad_hess, x0, tol, max_iter, divergence_error: Exception, norm_guard: float = NORM_GUARD):
    x = np.array(x0, dtype=float)
    f, g, h = value_grad_hess(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    res = float(np.max(np.abs(g))) if g.size else 0.0
    for it in range(1, max_iter + 1):
        if res <= tol:
            return x, res, it - 1
        try:
            direction = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("singular Hessian in Newton solve") from exc
        slope = float(g @ direction)
        step = 1.0
        while True:
            x_new = x + step * direction
            f_new, g_new, h_new = value_grad_hess(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-16:
                raise NonConvergence("Newton line search stalled")
        x, f, g, h = x_new, f_new, g_new, h_new
        if float(np.linalg.norm(x)) > norm_guard:
            raise divergence_error
        res = float(np.max(np.abs(g))) if g.size else 0.0
    if res <= tol:
        return x, res, max_iter
    raise NonConvergence(
        f"Newton hit max_iter={max_iter} with residual {res:.3e} > tol {tol:.1e}"
    )


# ---------------------------------------------------------------------------
# smooth objective closures
# ---------------------------------------------------------------------------


def _calibration_value_grad(z: np.ndarray, a: np.ndarray) -> Callable:
    """Mean-scale value/gradient of ``(1/n) sum_i [A_i exp(-u_i) + (1-A_i) u_i]``.

    The gradient equals the calibration score ``(1/n) sum_i {1 - A_i/pi_i} z_i``.
    """
    n = z.shape[0]
    treated = a == 1.0
    z_t = z[treated]
    z_c_sum = z[~treated].sum(axis=0)

    def value_grad(coef: np.ndarray):
        u = z @ coef
        with np.errstate(over="ignore"):
            e_t = np.exp(-u[treated])
        val = (float(e_t.sum()) + float(u[~treated].sum())) / n
        if not np.isfinite(val):
            return val, None
        grad = (z_c_sum - z_t.T @ e_t) / n
        return val, grad

    return value_grad


def _logistic_value_grad(z: np.ndarray, a: np.ndarray) -> Callable:
    """Mean-scale negative log-likelihood of the logistic model and its gradient."""
    n = z.shape[0]

    def value_grad(coef: np.ndarray):
        u = z @ coef
        val = float(np.mean(np.logaddexp(0.0, u) - a * u))
        if not np.isfinite(val):
            return val, None
        grad = z.T @ (expit(u) - a) / n
        return val, grad

    return value_grad


# ---------------------------------------------------------------------------
# public fitters
# ---------------------------------------------------------------------------


def _require_both_arms(data: Dataset) -> None:
    n_t = data.n_treated
    if n_t == 0 or n_t == data.n:
        raise DegenerateData("all treatment values are equal; the propensity model is not identified")


def fit_calibration_lasso(
    data: Dataset, lambda_gamma: float, opts: Optional[SolverOptions] = None
) -> PropensityCoefficients:
    """Fit the propensity model by the l1-penalised calibration loss.

    Minimises ``(1/n) sum_i [A_i exp(-g.z_i) + (1-A_i) g.z_i] + lam ||g||_1``
    (intercept unpenalized by default). At the solution the covariate-
    balancing score ``(1/n) sum_i {1 - A_i/pi_i} z_i`` satisfies the l1
    stationarity conditions to within ``opts.tol`` in sup-norm; with an
    unpenalized intercept this implies the calibration identity
    ``(1/n) sum_i A_i / pi_i = 1``.
    """
    opts = opts or DEFAULT_OPTIONS
    if lambda_gamma < 0:
        raise ValueError("lambda_gamma must be nonnegative")
    if data.n < 2:
        raise DegenerateData("need at least two observations")
    _require_both_arms(data)
    z, scales = _standardized_design(data, opts)
    mask = _penalized_mask(data.p + 1, opts)
    x0 = np.zeros(data.p + 1)
    abar = data.a.mean()
    x0[0] = math.log(abar / (1.0 - abar))
    coef, kkt, n_iter, trace = _prox_gradient(
        _calibration_value_grad(z, data.a),
        x0,
        lambda_gamma,
        mask,
        opts.tol,
        opts.max_iter or DEFAULT_PROX_ITER,
    )
    gamma = _back_transform(coef, scales)
    return PropensityCoefficients(gamma, lambda_gamma, _active_set(gamma), kkt, n_iter, trace)


def fit_logistic_lasso(
    data: Dataset, lam: float, opts: Optional[SolverOptions] = None
) -> PropensityCoefficients:
    """l1-penalised logistic maximum likelihood for the propensity model."""
    opts = opts or DEFAULT_OPTIONS
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if data.n < 2:
        raise DegenerateData("need at least two observations")
    _require_both_arms(data)
    z, scales = _standardized_design(data, opts)
    mask = _penalized_mask(data.p + 1, opts)
    x0 = np.zeros(data.p + 1)
    abar = data.a.mean()
    x0[0] = math.log(abar / (1.0 - abar))
    coef, kkt, n_iter, trace = _prox_gradient(
        _logistic_value_grad(z, data.a),
        x0,
        lam,
        mask,
        opts.tol,
        opts.max_iter or DEFAULT_PROX_ITER,
    )
    gamma = _back_transform(coef, scales)
    return PropensityCoefficients(gamma, lam, _active_set(gamma), kkt, n_iter, trace)


# Treated propensities this close to 0 (or exactly 1 in float) break the
# inverse-odds weights: the weighted quadratic is then conditioned beyond
# float64 resolution.
_WEIGHT_DEGENERACY = 1e-12


def _inverse_odds_weights(data: Dataset, gamma: np.ndarray) -> np.ndarray:
    """Per-unit weights ``A_i (1-pi_i)/pi_i`` with degeneracy checks on treated units."""
    u = data.design() @ gamma
    treated = data.a == 1.0
    pi_t = expit(u[treated])
    if np.any(pi_t <= _WEIGHT_DEGENERACY) or np.any(pi_t >= 1.0):
        raise DegenerateWeights(
            "fitted propensities reached 0 or 1 (to floating tolerance) on treated units"
        )
    w = np.zeros(data.n)
    w[treated] = np.exp(-u[treated])
    return w


def _weighted_lasso(
    data: Dataset,
    weights: np.ndarray,
    lam: float,
    opts: SolverOptions,
) -> OutcomeCoefficients:
    """Shared core: minimise ``(1/2n) sum_i W_i (y_i - b.z_i)^2 + lam ||b||_1``.

    ``n`` is the full number of rows regardless of how many carry weight, so a
    treated-only fit is the ``W_i = A_i`` specialization of the weighted one.
    With ``lam == 0`` the (possibly rank-deficient) normal equations are
    solved directly; otherwise cyclic coordinate descent on the cached Gram
    matrix performs exact coordinate updates.
    """
    n = data.n
    z, scales = _standardized_design(data, opts)
    mask = _penalized_mask(data.p + 1, opts)
    wz = z * weights[:, None]
    gram = wz.T @ z / n
    lin = wz.T @ data.y / n
    if lam == 0.0:
        coef, *_ = np.linalg.lstsq(gram, lin, rcond=None)
        coef[np.abs(coef) < ZERO_SNAP] = 0.0
        kkt = _kkt_sup_norm(gram @ coef - lin, coef, 0.0, mask)
        if kkt > opts.tol:
            raise NonConvergence(
                f"normal equations could not be solved to tolerance (residual {kkt:.3e})"
            )
        beta = _back_transform(coef, scales)
        return OutcomeCoefficients(beta, 0.0, _active_set(beta), kkt, 1, None)
    x0 = np.zeros(data.p + 1)
    if gram[0, 0] > 0.0:
        x0[0] = lin[0] / gram[0, 0]
    coef, kkt, sweeps, trace = _cd_quadratic(
        gram, lin, lam, mask, x0, opts.tol, opts.max_iter or DEFAULT_CD_SWEEPS
    )
    beta = _back_transform(coef, scales)
    return OutcomeCoefficients(beta, lam, _active_set(beta), kkt, sweeps, trace)


def fit_weighted_outcome_lasso(
    data: Dataset,
    gamma_hat: PropensityCoefficients,
    lambda_beta: float,
    opts: Optional[SolverOptions] = None,
) -> OutcomeCoefficients:
    """Fit the outcome model by inverse-odds-weighted l1-penalised least squares.

    The weights ``w_i = (1 - pi_i)/pi_i`` come from the supplied propensity
    fit; only treated units enter the quadratic term. The stationarity system
    is the weighted-score equation
    ``(1/n) sum_i w_i A_i (y_i - b.z_i) z_i = lam * subgrad``.
    """
    opts = opts or DEFAULT_OPTIONS
    if lambda_beta < 0:
        raise ValueError("lambda_beta must be nonnegative")
    if data.n_treated == 0:
        raise DegenerateData("no treated units; the outcome model cannot be fit")
    if not np.all(np.isfinite(gamma_hat.gamma)):
        raise ValueError("gamma_hat must be finite")
    weights = _inverse_odds_weights(data, gamma_hat.gamma)
    return _weighted_lasso(data, weights, lambda_beta, opts)


def fit_linear_lasso(
    data: Dataset,
    lam: float,
    treated_only: bool,
    opts: Optional[SolverOptions] = None,
) -> OutcomeCoefficients:
    """Plain (unweighted) l1-penalised least squares, optionally on the treated subsample.

    Unit weights: the objective is ``(1/2n) sum_i A_i (y_i - b.z_i)^2 + lam ||b||_1``
    when ``treated_only`` (with ``n`` the full number of rows), and the full-sample
    analogue otherwise.
    """
    opts = opts or DEFAULT_OPTIONS
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    weights = data.a.copy() if treated_only else np.ones(data.n)
    if weights.sum() == 0:
        raise DegenerateData("requested subsample is empty")
    return _weighted_lasso(data, weights, lam, opts)


def fit_logistic_mle(data: Dataset, opts: Optional[SolverOptions] = None) -> PropensityCoefficients:
    """Unpenalized logistic maximum likelihood via damped Newton iterations.

    Divergent coefficients (norm above the guard on the standardized scale)
    raise :class:`Separation`.
    """
    opts = opts or DEFAULT_OPTIONS
    _require_both_arms(data)
    if data.n <= data.p + 1:
        raise RankDeficient("logistic MLE requires n > p + 1")
    z, scales = _standardized_design(data, opts)
    n = data.n
    a = data.a

    def vgh(coef: np.ndarray):
        u = z @ coef
        val = float(np.mean(np.logaddexp(0.0, u) - a * u))
        if not np.isfinite(val):
            return val, None, None
        pi = expit(u)
        grad = z.T @ (pi - a) / n
        w = pi * (1.0 - pi)
        hess = (z * w[:, None]).T @ z / n
        return val, grad, hess

    # Logistic coefficients of norm ~100 on the standardized scale put every
    # fitted probability at 0/1 within float resolution: separation, even if
    # the score tolerance is met by underflow.
    coef, res, n_iter = _newton(
        vgh,
        np.zeros(data.p + 1),
        opts.tol,
        opts.max_iter or DEFAULT_NEWTON_ITER,
        Separation("coefficient norm diverged; data appear perfectly separated"),
        norm_guard=100.0,
    )
    if float(np.linalg.norm(coef)) > 100.0:
        raise Separation("coefficient norm diverged; data appear perfectly separated")
    gamma = _back_transform(coef, scales)
    return PropensityCoefficients(gamma, 0.0, _active_set(gamma), res, n_iter, None)


def fit_ols(data: Dataset, treated_only: bool) -> OutcomeCoefficients:
    """Ordinary least squares, optionally on the treated subsample.

    The design must have full column rank on the relevant subsample.
    Residual orthogonality ``(1/m) sum_i r_i z_i = 0`` holds at solver
    precision (``m`` the subsample size).
    """
    sel = data.a == 1.0 if treated_only else np.ones(data.n, dtype=bool)
    m = int(sel.sum())
    if m == 0:
        raise DegenerateData("requested subsample is empty")
    if m <= data.p:
        raise RankDeficient(f"subsample size {m} cannot support {data.p + 1} coefficients")
    z = data.design()[sel]
    y = data.y[sel]
    coef, _, rank, _ = np.linalg.lstsq(z, y, rcond=None)
    if rank < data.p + 1:
        raise RankDeficient("design matrix is rank deficient on the fitting subsample")
    resid = y - z @ coef
    kkt = float(np.max(np.abs(z.T @ resid))) / m
    return OutcomeCoefficients(coef, 0.0, _active_set(coef), kkt, 1, None)


def post_lasso_refit(
    data: Dataset,
    active_union: Iterable[int],
    which: str,
    opts: Optional[SolverOptions] = None,
):
    """Refit an unpenalized model on the selected covariates only.

    ``active_union`` holds coefficient positions ``1..p``; excluded
    coefficients are exactly zero in the returned vector. ``which`` selects
    the propensity refit (logistic MLE) or the outcome refit (OLS on the
    treated subsample).
    """
    if which not in ("propensity", "outcome"):
        raise ValueError("which must be 'propensity' or 'outcome'")
    selected = sorted(set(int(j) for j in active_union))
    if any(j < 1 or j > data.p for j in selected):
        raise ValueError(f"active_union entries must lie in 1..{data.p}")
    sub = Dataset(data.y, data.a, data.x[:, [j - 1 for j in selected]])
    relevant = sub.n_treated if which == "outcome" else sub.n
    if len(selected) + 1 >= relevant:
        raise RankDeficient(
            f"{len(selected)} selected covariates cannot be refit on {relevant} observations"
        )
    index = np.array([0] + selected, dtype=int)
    if which == "propensity":
        fit = fit_logistic_mle(sub, opts)
        gamma = np.zeros(data.p + 1)
        gamma[index] = fit.gamma
        return PropensityCoefficients(gamma, 0.0, _active_set(gamma), fit.kkt_residual, fit.n_iter, None)
    fit = fit_ols(sub, treated_only=True)
    beta = np.zeros(data.p + 1)
    beta[index] = fit.beta
    return OutcomeCoefficients(beta, 0.0, _active_set(beta), fit.kkt_residual, fit.n_iter, None)


def fit_br_refit(
    data: Dataset,
    selected: Iterable[int],
    lambda_ridge: float,
    opts: Optional[SolverOptions] = None,
) -> NuisanceFit:
    """Solve the unpenalized bias-reduced system on the selected covariates,
    with a ridge term stabilising the propensity equation.

    The propensity coefficients solve (on the standardized scale, intercept
    exempt from the ridge)

        ``(1/n) sum_i {1 - A_i/pi(z_i; g)} z_i + 2 * lambda_ridge * g = 0``,

    i.e. they minimise the strictly convex calibration loss plus
    ``lambda_ridge * ||g||_2^2``. The outcome coefficients then solve the
    inverse-odds-weighted normal equations exactly (no penalty) on the same
    restricted design.
    """
    opts = opts or DEFAULT_OPTIONS
    if lambda_ridge <= 0:
        raise ValueError("lambda_ridge must be positive")
    selected = sorted(set(int(j) for j in selected))
    if any(j < 1 or j > data.p for j in selected):
        raise ValueError(f"selected entries must lie in 1..{data.p}")
    if data.n_treated == 0:
        raise DegenerateData("no treated units")
    _require_both_arms(data)
    sub = Dataset(data.y, data.a, data.x[:, [j - 1 for j in selected]])
    index = np.array([0] + selected, dtype=int)

    z, scales = _standardized_design(sub, opts)
    n = sub.n
    treated = sub.a == 1.0
    z_t = z[treated]
    z_c_sum = z[~treated].sum(axis=0)
    ridge = np.zeros(sub.p + 1)
    ridge[1:] = 2.0 * lambda_ridge

    def vgh(coef: np.ndarray):
        u = z @ coef
        with np.errstate(over="ignore"):
            e_t = np.exp(-u[treated])
        val = (float(e_t.sum()) + float(u[~treated].sum())) / n
        val += 0.5 * float(ridge @ coef**2)
        if not np.isfinite(val):
            return val, None, None
        grad = (z_c_sum - z_t.T @ e_t) / n + ridge * coef
        hess = (z_t * e_t[:, None]).T @ z_t / n + np.diag(ridge)
        return val, grad, hess

    x0 = np.zeros(sub.p + 1)
    abar = sub.a.mean()
    x0[0] = math.log(abar / (1.0 - abar))
    coef, res, n_iter = _newton(
        vgh,
        x0,
        opts.tol,
        opts.max_iter or DEFAULT_NEWTON_ITER,
        UnboundedObjective("ridge-stabilised propensity solve diverged"),
    )
    gamma_sub = _back_transform(coef, scales)
    gamma = np.zeros(data.p + 1)
    gamma[index] = gamma_sub
    gamma_fit = PropensityCoefficients(gamma, lambda_ridge, _active_set(gamma), res, n_iter, None)

    weights = _inverse_odds_weights(sub, gamma_sub)
    beta_sub = _weighted_lasso(sub, weights, 0.0, opts)
    beta = np.zeros(data.p + 1)
    beta[index] = beta_sub.beta
    beta_fit = OutcomeCoefficients(
        beta, 0.0, _active_set(beta), beta_sub.kkt_residual, beta_sub.n_iter, None
    )
    return NuisanceFit(gamma_fit, beta_fit, "DS-P-BR")
