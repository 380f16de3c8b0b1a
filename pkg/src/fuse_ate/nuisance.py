"""Nuisance regressions and cross-fitting.

The nuisance set is ``{mu_V(X, S), mu_T(X, S), mu_S(X)}`` plus the two noise
variances.  Outcome means are ridge-regularised least squares, propensities
are logistic regressions fit by Newton's method; both work on either the raw
covariates or the raw + squares + pairwise-interaction basis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .dgp import Sample, expit, substream
from .errors import InputError, NumericalError, StratificationError

logger = logging.getLogger(__name__)

LINEAR = "linear"
LOGISTIC = "logistic"
RAW = "raw"
QUADRATIC = "quadratic"
BASES = (RAW, QUADRATIC)

_EIG_FLOOR = 1e-12
_P_LO = np.finfo(float).tiny
_P_HI = 1.0 - np.finfo(float).epsneg


def expand_basis(x: np.ndarray, basis: str = RAW) -> np.ndarray:
    """Feature map without intercept column."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if basis == RAW:
        return x
    if basis == QUADRATIC:
        iu, ju = np.triu_indices(x.shape[1], k=1)
        return np.hstack([x, x**2, x[:, iu] * x[:, ju]])
    raise InputError(f"unknown basis {basis!r}; expected one of {BASES}")


def basis_dimension(p: int, basis: str = RAW) -> int:
    if basis == RAW:
        return p
    if basis == QUADRATIC:
        return 2 * p + p * (p - 1) // 2
    raise InputError(f"unknown basis {basis!r}")


def default_ridge(features: np.ndarray) -> float:
    """``1e-6 * trace(F'F) / d`` on the expanded features."""
    d = features.shape[1]
    if d == 0:
        return 0.0
    return 1e-6 * float(np.einsum("ij,ij->", features, features)) / d


@dataclass(frozen=True)
class RegressionModel:
    """Fitted linear or logistic regression.

    ``coefficients[0]`` is the intercept; the rest multiply the expanded
    basis.  The intercept is never penalised.
    """

    kind: str
    basis: str
    coefficients: np.ndarray
    ridge_lambda: float
    fitted_dimension: int
    converged: bool = True
    iterations: int = 0

    def linear_predictor(self, x) -> np.ndarray:
        f = expand_basis(x, self.basis)
        if f.shape[1] != self.fitted_dimension:
            raise InputError(f"expected {self.fitted_dimension} features, got {f.shape[1]}")
        return self.coefficients[0] + f @ self.coefficients[1:]

    def predict(self, x) -> np.ndarray:
        eta = self.linear_predictor(x)
        if self.kind != LOGISTIC:
            return eta
        # keep probabilities strictly inside (0, 1) where expit rounds to 1.0
        return np.clip(expit(eta), _P_LO, _P_HI)


@dataclass(frozen=True)
class ConstantModel:
    """Degenerate model returning a fixed value (known randomisation)."""

    value: float
    kind: str = "constant"

    def predict(self, x) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], self.value)


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(a)
    if eig[0] <= _EIG_FLOOR * max(eig[-1], 1.0):
        raise NumericalError(
            f"normal equations are singular (min eigenvalue {eig[0]:.3g}, max {eig[-1]:.3g})")
    return linalg.solve(a, b, assume_a="pos")


def fit_regression(features, targets, kind: str = LINEAR, basis: str = RAW,
                   ridge_lambda: Optional[float] = None, *, tol: float = 1e-8,
                   max_iter: int = 100) -> RegressionModel:
    """Fit a ridge-regularised linear or logistic regression.

    Parameters
    ----------
    features : array of shape (n, p)
        Raw covariates; the basis expansion is applied here.
    targets : array of shape (n,)
        Real for ``kind="linear"``, 0/1 for ``kind="logistic"``.
    kind : {"linear", "logistic"}
    basis : {"raw", "quadratic"}
    tol : float
        Newton stops once the gradient of the per-unit objective has norm
        at most ``tol``.
    ridge_lambda : float, optional
        Penalty on non-intercept coefficients. ``None`` selects
        ``1e-6 * trace(F'F) / d``.

    Raises
    ------
    InputError
        Too few rows, or targets unsuitable for a logistic fit.
    NumericalError
        The penalised normal equations / Hessian are singular.
    """
    f = expand_basis(features, basis)
    y = np.asarray(targets, dtype=float)
    n, d = f.shape
    if y.shape != (n,):
        raise InputError(f"targets must have shape ({n},), got {y.shape}")
    if n < d + 1:
        raise InputError(f"need at least {d + 1} rows for a {d}-dimensional basis, got {n}")
    lam = default_ridge(f) if ridge_lambda is None else float(ridge_lambda)
    if lam < 0:
        raise InputError("ridge_lambda must be nonnegative")
    z = np.hstack([np.ones((n, 1)), f])
    pen = np.full(d + 1, lam)
    pen[0] = 0.0

    if kind == LINEAR:
        gram = z.T @ z
        gram[np.diag_indices_from(gram)] += pen
        beta = _solve_spd(gram, z.T @ y)
        return RegressionModel(LINEAR, basis, beta, lam, d)

    if kind != LOGISTIC:
        raise InputError(f"unknown regression kind {kind!r}")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("logistic targets must be 0/1")
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        raise InputError("logistic targets are constant; the fit is degenerate")

    beta = np.zeros(d + 1)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = z @ b
        # log(1 + e^eta) - y eta, stable for large |eta|
        return np.sum(np.logaddexp(0.0, eta) - y * eta) + 0.5 * np.sum(pen * b * b)

    obj = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(z @ beta)
        grad = z.T @ (mu - y) + pen * beta
        if np.linalg.norm(grad) <= tol * n:
            converged = True
            it -= 1
            break
        w = mu * (1 - mu)
        hess = (z * w[:, None]).T @ z
        hess[np.diag_indices_from(hess)] += pen
        step = _solve_spd(hess, grad)
        t = 1.0
        while True:
            cand = beta - t * step
            cand_obj = objective(cand)
            if cand_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, cand_obj
    else:
        mu = expit(z @ beta)
        grad = z.T @ (mu - y) + pen * beta
        converged = bool(np.linalg.norm(grad) <= tol * n)
    if not converged:
        logger.warning("logistic fit stopped after %d iterations (|grad|/n=%.2e)",
                       max_iter, np.linalg.norm(grad) / n)
    return RegressionModel(LOGISTIC, basis, beta, lam, d, converged, it)


@dataclass(frozen=True)
class FoldModels:
    """Models trained on every fold except one.

    Models for a study with no units are ``None``.
    """

    mu_y0: Optional[RegressionModel]
    mu_w1: Optional[RegressionModel]
    mu_t0: object
    mu_t1: object
    mu_s: object
    mu_w1_arms: Optional[tuple] = None

    def w_mean_primary(self, x: np.ndarray, lo: float, hi: float) -> np.ndarray:
        """Auxiliary arm means averaged under the primary treatment law."""
        e0 = np.clip(self.mu_t0.predict(x), lo, hi)
        m0, m1 = self.mu_w1_arms
        return e0 * m1.predict(x) + (1.0 - e0) * m0.predict(x)


@dataclass(frozen=True)
class NuisanceFit:
    """Cross-fitted nuisance estimates for one sample.

    Attributes
    ----------
    folds : list of FoldModels
        ``folds[k]`` was trained without units whose ``fold_assignment`` is k.
    fold_assignment : int array (n,)
    mu_v : array (n,)
        Out-of-fold ``mu_Y(x, 0)`` for primary units, ``mu_W(x, 1)`` for
        auxiliary units.
    mu_t : array (n,)
        Out-of-fold study-specific propensity, clipped to ``[eps, 1 - eps]``.
    mu_s : array (n,)
        Out-of-fold ``P(S=1 | x)``, clipped.
    mu_w_primary : array (n,)
        ``E[W | X, S=0]`` at primary units (NaN elsewhere): per-arm
        auxiliary outcome models mixed by the primary propensity, so the
        auxiliary treatment law does not leak into the second stage.
    sigma_y_sq, sigma_w_sq : float or None
        Noise variances; ``None`` when the study is absent.
    """

    folds: list
    fold_assignment: np.ndarray
    mu_v: np.ndarray
    mu_t: np.ndarray
    mu_s: np.ndarray
    mu_w_primary: np.ndarray
    sigma_y_sq: Optional[float]
    sigma_w_sq: Optional[float]
    basis: str = RAW
    ridge_lambda: Optional[float] = None
    epsilon_clip: float = 0.01
    n_clipped: int = 0
    pilot: dict = field(default_factory=dict)

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    # the single-model views used when K = 1
    @property
    def mu_y0(self):
        return self.folds[0].mu_y0

    @property
    def mu_w1(self):
        return self.folds[0].mu_w1

    @property
    def mu_t0(self):
        return self.folds[0].mu_t0

    @property
    def mu_t1(self):
        return self.folds[0].mu_t1

    @property
    def mu_s_model(self):
        return self.folds[0].mu_s

    @property
    def out_of_fold_predictions(self) -> dict:
        return {"mu_v": self.mu_v, "mu_t": self.mu_t, "mu_s": self.mu_s,
                "mu_w_primary": self.mu_w_primary}


def assign_folds(sample: Sample, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per unit, balanced within each study x arm cell."""
    fold = np.zeros(sample.n, dtype=np.int64)
    if folds == 1:
        return fold
    rng = substream(seed, 0xF01D)
    for s in (0, 1):
        for t in (0, 1):
            idx = np.flatnonzero((sample.s == s) & (sample.t == t))
            perm = rng.permutation(idx)
            offset = int(rng.integers(folds))
            fold[perm] = (np.arange(len(perm)) + offset) % folds
    return fold


def _check_cells(sample: Sample, fold: np.ndarray, folds: int):
    if folds < 1:
        raise InputError("folds must be >= 1")
    n0, n1 = sample.n0, sample.n1
    if n0 == 0 and n1 == 0:
        raise InputError("empty sample")
    if folds > 1:
        for s, ns in ((0, n0), (1, n1)):
            if ns and folds > ns:
                raise InputError(f"folds={folds} exceeds the {ns} units with s={s}")
    for s, ns in ((0, n0), (1, n1)):
        if ns == 0:
            continue
        for t in (0, 1):
            for k in range(folds):
                if not np.any((sample.s == s) & (sample.t == t) & (fold == k)):
                    cell = f"fold={k}, s={s}, t={t}" if folds > 1 else f"s={s}, t={t}"
                    raise StratificationError(f"empty cell ({cell})")


def _fit_fold(sample: Sample, train: np.ndarray, basis, ridge_lambda,
              known_primary_propensity) -> FoldModels:
    x, s, t, v = sample.x, sample.s, sample.t, sample.v
    prim = train & (s == 0)
    aux = train & (s == 1)
    mu_y0 = mu_t0 = mu_w1 = mu_t1 = None
    if prim.any():
        mu_y0 = fit_regression(x[prim], v[prim], LINEAR, basis, ridge_lambda)
        if known_primary_propensity is not None:
            mu_t0 = ConstantModel(float(known_primary_propensity))
        else:
            mu_t0 = fit_regression(x[prim], t[prim], LOGISTIC, basis, ridge_lambda)
    arms = None
    if aux.any():
        mu_w1 = fit_regression(x[aux], v[aux], LINEAR, basis, ridge_lambda)
        mu_t1 = fit_regression(x[aux], t[aux], LOGISTIC, basis, ridge_lambda)
        if prim.any():
            arms = tuple(fit_regression(x[aux & (t == a)], v[aux & (t == a)], LINEAR, basis,
                                        ridge_lambda) for a in (0, 1))
    if prim.any() and aux.any():
        mu_s = fit_regression(x[train], s[train], LOGISTIC, basis, ridge_lambda)
    else:
        mu_s = ConstantModel(float(aux.any()))
    return FoldModels(mu_y0, mu_w1, mu_t0, mu_t1, mu_s, arms)


def _pilot_variance(v, t, mu_v, mu_t, n_params):
    """DF-corrected residual variance after a residual-on-residual pilot slope."""
    r_v = v - mu_v
    r_t = t - mu_t
    denom = np.dot(r_t, r_t)
    slope = float(np.dot(r_v, r_t) / denom) if denom > 0 else 0.0
    resid = r_v - slope * r_t
    dof = max(len(v) - n_params - 1, 1)
    return float(np.dot(resid, resid) / dof), slope


def cross_fit(sample: Sample, folds: int = 5, basis: str = RAW,
              ridge_lambda: Optional[float] = None, epsilon_clip: float = 0.01,
              known_primary_propensity: Optional[float] = None,
              seed: int = 0) -> NuisanceFit:
    """Fit all nuisance models with K-fold sample splitting.

    ``folds=1`` fits every model in-sample.  Noise variances always come from
    in-sample fits: a pilot residual-on-residual slope per study, then the
    degrees-of-freedom corrected mean squared residual.

    Parameters
    ----------
    known_primary_propensity : float, optional
        Use this constant for ``P(T=1 | X, S=0)`` instead of fitting it
        (primary study is a trial with known allocation).
    """
    if not 0.0 <= epsilon_clip < 0.5:
        raise InputError("epsilon_clip must lie in [0, 0.5)")
    fold = assign_folds(sample, folds, seed)
    _check_cells(sample, fold, folds)

    n = sample.n
    x, s = sample.x, sample.s
    mu_v = np.full(n, np.nan)
    mu_t = np.full(n, np.nan)
    mu_s = np.full(n, np.nan)
    mu_w_primary = np.full(n, np.nan)
    models = []
    for k in range(folds):
        train = fold != k if folds > 1 else np.ones(n, dtype=bool)
        held = fold == k
        fm = _fit_fold(sample, train, basis, ridge_lambda, known_primary_propensity)
        models.append(fm)
        hp = held & (s == 0)
        ha = held & (s == 1)
        if hp.any():
            mu_v[hp] = fm.mu_y0.predict(x[hp])
            mu_t[hp] = fm.mu_t0.predict(x[hp])
            if fm.mu_w1_arms is not None:
                mu_w_primary[hp] = fm.w_mean_primary(x[hp], epsilon_clip, 1.0 - epsilon_clip)
        if ha.any():
            mu_v[ha] = fm.mu_w1.predict(x[ha])
            mu_t[ha] = fm.mu_t1.predict(x[ha])
        mu_s[held] = fm.mu_s.predict(x[held])

    lo, hi = epsilon_clip, 1.0 - epsilon_clip
    n_clipped = int(np.sum((mu_t < lo) | (mu_t > hi)) + np.sum((mu_s < lo) | (mu_s > hi)))
    if n_clipped:
        logger.info("clipped %d propensities into [%g, %g]", n_clipped, lo, hi)
    mu_t = np.clip(mu_t, lo, hi)
    mu_s = np.clip(mu_s, lo, hi)

    full = models[0] if folds == 1 else _fit_fold(
        sample, np.ones(n, dtype=bool), basis, ridge_lambda, known_primary_propensity)
    n_params = basis_dimension(sample.p, basis) + 1
    sigma_y_sq = sigma_w_sq = None
    pilot = {}
    for stratum, model_v, model_t in ((0, full.mu_y0, full.mu_t0), (1, full.mu_w1, full.mu_t1)):
        if model_v is None:
            continue
        m = s == stratum
        var, slope = _pilot_variance(
            sample.v[m], sample.t[m], model_v.predict(x[m]),
            np.clip(model_t.predict(x[m]), lo, hi), n_params)
        var = max(var, np.finfo(float).tiny)
        if stratum == 0:
            sigma_y_sq = var
            pilot["theta_pilot"] = slope
        else:
            sigma_w_sq = var
            pilot["effect_w_pilot"] = slope

    return NuisanceFit(models, fold, mu_v, mu_t, mu_s, mu_w_primary, sigma_y_sq,
                       sigma_w_sq, basis, ridge_lambda, epsilon_clip, n_clipped, pilot)


def residuals(sample: Sample, fit: NuisanceFit):
    """Per-unit ``(r_V, r_T)`` against the out-of-fold predictions."""
    if fit.mu_v.shape != (sample.n,) or np.any(np.isnan(fit.mu_v)) or np.any(np.isnan(fit.mu_t)):
        raise InputError("nuisance fit does not cover every unit of the sample")
    return sample.v - fit.mu_v, sample.t - fit.mu_t
