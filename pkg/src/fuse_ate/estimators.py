"""ATE estimators for the primary population.

``theta0``  residual-on-residual ratio using only primary units.
``theta_a`` inverse-variance weighted ratio that also uses auxiliary units
            through a known outcome link ``Y = alpha(X) W + beta(X)``.
``theta_b`` the primary ratio with the outcome regression replaced by the
            two-stage fit ``alpha_hat(X) mu_W_hat(X) + beta_hat(X)``.

Standard errors follow one convention everywhere: with per-unit score
``psi_i`` and empirical score derivative ``J = sum(denominator terms) / n``,
``SE = sqrt(var(psi) / J^2 / n)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dgp import Sample
from .errors import (EstimationError, IdentificationError, InputError,
                     LinkDegeneracyError)
from .nuisance import NuisanceFit, residuals

Z_95 = 1.96
ALPHA_MIN = 1e-3
DENOM_FLOOR = 1e-8

FULLY_KNOWN = "fully_known"
BETA_KNOWN = "beta_known"
UNKNOWN = "unknown"
KNOWLEDGE = (FULLY_KNOWN, BETA_KNOWN, UNKNOWN)
METHODS = ("theta0", "theta_a", "theta_b")

# function classes for the second-stage fit
CONSTANT = "constant"
LINEAR_X1 = "linear_x1"
LINEAR_ALL = "linear"
CLASSES = (CONSTANT, LINEAR_X1, LINEAR_ALL)


def class_design(x: np.ndarray, cls: str) -> np.ndarray:
    """Columns spanning a function class (intercept first)."""
    x = np.atleast_2d(x)
    one = np.ones((x.shape[0], 1))
    if cls == CONSTANT:
        return one
    if cls == LINEAR_X1:
        return np.hstack([one, x[:, :1]])
    if cls == LINEAR_ALL:
        return np.hstack([one, x])
    raise InputError(f"unknown function class {cls!r}; expected one of {CLASSES}")


@dataclass(frozen=True)
class LinkForm:
    """An evaluable covariate function for ``alpha`` or ``beta``.

    ``kind`` is one of ``constant`` (coef = [c]), ``linear_x1``
    (coef = [c0, c1]), ``linear`` (coef = [c0, c1, ..., cp]) or ``callable``
    (``fn`` maps an (n, p) array to (n,)).
    """

    kind: str
    coef: tuple = ()
    fn: Optional[Callable] = None

    @classmethod
    def constant(cls, c: float) -> "LinkForm":
        return cls(CONSTANT, (float(c),))

    @classmethod
    def linear_x1(cls, c0: float, c1: float) -> "LinkForm":
        return cls(LINEAR_X1, (float(c0), float(c1)))

    @classmethod
    def from_callable(cls, fn: Callable) -> "LinkForm":
        return cls("callable", (), fn)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "callable":
            return np.broadcast_to(np.asarray(self.fn(x), dtype=float), (x.shape[0],)).copy()
        coef = np.asarray(self.coef, dtype=float)
        design = class_design(x, self.kind)
        if design.shape[1] != coef.size:
            raise InputError(f"{self.kind} form needs {design.shape[1]} coefficients, got {coef.size}")
        return design @ coef

    def scaled(self, k: float) -> "LinkForm":
        if self.kind == "callable":
            fn = self.fn
            return LinkForm.from_callable(lambda x: k * np.asarray(fn(x)))
        return LinkForm(self.kind, tuple(k * c for c in self.coef))

    def to_dict(self) -> dict:
        if self.kind == "callable":
            raise InputError("callable link forms are not serializable")
        return {"form": self.kind, "coef": list(self.coef)}

    @classmethod
    def from_dict(cls, d: dict) -> "LinkForm":
        kind = d.get("form")
        if kind not in CLASSES:
            raise InputError(f"unknown link form {kind!r}")
        return cls(kind, tuple(float(c) for c in d.get("coef", ())))


@dataclass(frozen=True)
class LinkSpec:
    """What is known about the outcome link ``nu_Y = alpha nu_W + beta``.

    ``alpha_class`` / ``beta_class`` pick the second-stage function classes
    used when the corresponding function has to be estimated.
    """

    knowledge: str
    alpha_form: Optional[LinkForm] = None
    beta_form: Optional[LinkForm] = None
    alpha_class: str = LINEAR_X1
    beta_class: str = CONSTANT
    fitted: Optional[dict] = None

    def __post_init__(self):
        if self.knowledge not in KNOWLEDGE:
            raise InputError(f"knowledge must be one of {KNOWLEDGE}")
        if self.knowledge == FULLY_KNOWN and (self.alpha_form is None or self.beta_form is None):
            raise InputError("fully_known link needs both alpha and beta forms")
        if self.knowledge == BETA_KNOWN and self.beta_form is None:
            raise InputError("beta_known link needs a beta form")
        for c in (self.alpha_class, self.beta_class):
            if c not in CLASSES:
                raise InputError(f"unknown function class {c!r}")

    @classmethod
    def known(cls, alpha: LinkForm, beta: Optional[LinkForm] = None) -> "LinkSpec":
        return cls(FULLY_KNOWN, alpha, beta if beta is not None else LinkForm.constant(0.0))

    def with_alpha(self, alpha: LinkForm) -> "LinkSpec":
        return LinkSpec(self.knowledge, alpha, self.beta_form, self.alpha_class,
                        self.beta_class, self.fitted)

    def to_dict(self) -> dict:
        d = {"schema_version": 1, "knowledge": self.knowledge,
             "alpha_class": self.alpha_class, "beta_class": self.beta_class}
        if self.alpha_form is not None:
            d["alpha"] = self.alpha_form.to_dict()
        if self.beta_form is not None:
            d["beta"] = self.beta_form.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkSpec":
        if d.get("schema_version", 1) != 1:
            raise InputError(f"unsupported schema_version {d.get('schema_version')}")
        return cls(
            d["knowledge"],
            LinkForm.from_dict(d["alpha"]) if "alpha" in d else None,
            LinkForm.from_dict(d["beta"]) if "beta" in d else None,
            d.get("alpha_class", LINEAR_X1),
            d.get("beta_class", CONSTANT),
        )

    @classmethod
    def from_json(cls, text: str) -> "LinkSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class EstimateResult:
    method: str
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    n0: int
    n1: int
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_score(cls, method, estimate, std_error, n0, n1, **diagnostics) -> "EstimateResult":
        half = Z_95 * std_error
        return cls(method, float(estimate), float(std_error), float(estimate - half),
                   float(estimate + half), int(n0), int(n1), diagnostics)

    def to_dict(self) -> dict:
        return {"method": self.method, "estimate": self.estimate, "std_error": self.std_error,
                "ci_low": self.ci_low, "ci_high": self.ci_high, "n0": self.n0, "n1": self.n1,
                "diagnostics": _jsonable(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _ratio_with_se(method, num_terms, den_terms, score_fn, n, n0, n1, **diag):
    """Solve ``sum(num) = theta * sum(den)`` and attach the sandwich SE."""
    den = float(np.sum(den_terms))
    if not den > DENOM_FLOOR * n:
        raise EstimationError(f"{method}: degenerate denominator {den:.3g}")
    theta = float(np.sum(num_terms)) / den
    psi = score_fn(theta)
    jac = den / n
    var = float(np.mean((psi - psi.mean()) ** 2)) / jac**2
    se = math.sqrt(var / n)
    return EstimateResult.from_score(method, theta, se, n0, n1, denominator=den, **diag)


def _primary_residuals(sample: Sample, fit: NuisanceFit):
    if sample.n0 < 2:
        raise InputError("need at least two primary (s=0) units")
    r_v, r_t = residuals(sample, fit)
    m = sample.s == 0
    return r_v, r_t, m


def estimate_theta_primary(sample: Sample, fit: NuisanceFit) -> EstimateResult:
    """Primary-only ratio ``sum (1-S) r_Y r_T / sum (1-S) r_T^2``."""
    r_v, r_t, m = _primary_residuals(sample, fit)
    return _primary_ratio("theta0", sample, r_v[m], r_t[m], n_clipped=fit.n_clipped)


def _primary_ratio(method, sample, r_y, r_t, **diag):
    n = sample.n

    def score(theta):
        psi = np.zeros(n)
        psi[sample.s == 0] = (r_y - theta * r_t) * r_t
        return psi

    return _ratio_with_se(method, r_y * r_t, r_t**2, score, n, sample.n0, sample.n1, **diag)


def _check_alpha(alpha_vals: np.ndarray, alpha_min: float = ALPHA_MIN):
    if alpha_vals.size and np.min(np.abs(alpha_vals)) < alpha_min:
        raise LinkDegeneracyError(
            f"|alpha(x)| = {np.min(np.abs(alpha_vals)):.3g} below alpha_min={alpha_min}")


def estimate_theta_fused_known_alpha(sample: Sample, fit: NuisanceFit, link: LinkSpec,
                                     alpha_min: float = ALPHA_MIN) -> EstimateResult:
    """Fused estimator with a fully known link.

    Primary units enter with weight ``1 / sigma_Y^2``; auxiliary units
    contribute ``r_W r_T / (alpha sigma_W^2)`` to the numerator and
    ``r_T^2 / (alpha^2 sigma_W^2)`` to the denominator.
    """
    if link.knowledge != FULLY_KNOWN:
        raise InputError("theta_a requires a fully_known link")
    if sample.n0 == 0:
        raise InputError("need primary (s=0) units")
    r_v, r_t = residuals(sample, fit)
    s = sample.s
    prim, aux = s == 0, s == 1
    n = sample.n

    num = np.zeros(n)
    den = np.zeros(n)
    sy2 = fit.sigma_y_sq
    num[prim] = r_v[prim] * r_t[prim] / sy2
    den[prim] = r_t[prim] ** 2 / sy2
    alpha = np.ones(n)
    diag = {"n_clipped": fit.n_clipped, "sigma_y_sq": sy2, "sigma_w_sq": fit.sigma_w_sq}
    if aux.any():
        alpha[aux] = link.alpha_form(sample.x[aux])
        _check_alpha(alpha[aux], alpha_min)
        sw2 = fit.sigma_w_sq
        num[aux] = r_v[aux] * r_t[aux] / (alpha[aux] * sw2)
        den[aux] = r_t[aux] ** 2 / (alpha[aux] ** 2 * sw2)
        diag["min_abs_alpha"] = float(np.min(np.abs(alpha[aux])))

    def score(theta):
        psi = np.zeros(n)
        psi[prim] = (r_v[prim] - theta * r_t[prim]) * r_t[prim] / sy2
        if aux.any():
            a = alpha[aux]
            psi[aux] = (a * r_v[aux] - theta * r_t[aux]) * r_t[aux] / (a**2 * fit.sigma_w_sq)
        return psi

    return _ratio_with_se("theta_a", num, den, score, n, sample.n0, sample.n1, **diag)


@dataclass(frozen=True)
class TwoStageFit:
    """Second-stage link regression.

    ``alpha_coef`` / ``beta_coef`` are full-sample coefficients in the bases
    of ``alpha_class`` / ``beta_class``; ``mu_y`` holds (out-of-fold when the
    nuisance fit is cross-fitted) predictions at primary units, NaN at
    auxiliary units.
    """

    alpha_coef: np.ndarray
    beta_coef: np.ndarray
    alpha_class: str
    beta_class: Optional[str]
    mu_y: np.ndarray

    def alpha(self, x) -> np.ndarray:
        return class_design(x, self.alpha_class) @ self.alpha_coef

    def beta(self, x, beta_form: Optional[LinkForm] = None) -> np.ndarray:
        if self.beta_class is None:
            return beta_form(x)
        return class_design(x, self.beta_class) @ self.beta_coef


def fit_link_regression(y, mu_w, x, link: LinkSpec):
    """Least squares ``y ~ alpha(x) mu_w + beta(x)`` over the link classes.

    Returns ``(alpha_coef, beta_coef)``.  With ``beta_known`` the known beta is
    subtracted and ``beta_coef`` is empty.
    """
    y = np.asarray(y, dtype=float)
    mu_w = np.asarray(mu_w, dtype=float)
    x = np.atleast_2d(x)
    a_cols = class_design(x, link.alpha_class) * mu_w[:, None]
    if link.knowledge == BETA_KNOWN:
        target = y - link.beta_form(x)
        design = a_cols
    elif link.knowledge == UNKNOWN:
        target = y
        design = np.hstack([a_cols, class_design(x, link.beta_class)])
    else:
        raise InputError("two-stage fit needs a beta_known or unknown link")
    if design.shape[0] < design.shape[1] + 1:
        raise InputError(f"need at least {design.shape[1] + 1} primary units for the link fit")
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1.0):
        raise IdentificationError("second-stage design is collinear; alpha and beta are not identified")
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    ka = a_cols.shape[1]
    return coef[:ka], coef[ka:]


def two_stage_outcome_fit(sample: Sample, fit: NuisanceFit, link: LinkSpec) -> TwoStageFit:
    """Fit ``mu_Y,b(x, 0) = alpha_hat(x) mu_W_hat(x, 0) + beta_hat(x)``.

    ``mu_W_hat(x, 0)`` is the auxiliary outcome model evaluated at primary
    units.  With K-fold nuisance fits the second stage is cross-fitted on the
    same folds.
    """
    prim = sample.s == 0
    if sample.n1 == 0:
        raise InputError("two-stage fit needs auxiliary (s=1) units")
    mu_w = fit.mu_w_primary
    if np.any(np.isnan(mu_w[prim])):
        raise InputError("auxiliary outcome predictions missing at primary units")
    x, y = sample.x, sample.v
    alpha_coef, beta_coef = fit_link_regression(y[prim], mu_w[prim], x[prim], link)
    beta_class = None if link.knowledge == BETA_KNOWN else link.beta_class

    def predict(ac, bc, rows):
        pred = (class_design(x[rows], link.alpha_class) @ ac) * mu_w[rows]
        if beta_class is None:
            return pred + link.beta_form(x[rows])
        return pred + class_design(x[rows], beta_class) @ bc

    mu_y = np.full(sample.n, np.nan)
    if fit.n_folds == 1:
        mu_y[prim] = predict(alpha_coef, beta_coef, prim)
    else:
        for k in range(fit.n_folds):
            held = prim & (fit.fold_assignment == k)
            train = prim & (fit.fold_assignment != k)
            ac, bc = fit_link_regression(y[train], mu_w[train], x[train], link)
            mu_y[held] = predict(ac, bc, held)
    return TwoStageFit(alpha_coef, beta_coef, link.alpha_class, beta_class, mu_y)


def estimate_theta_two_stage(sample: Sample, fit: NuisanceFit, link: LinkSpec,
                             stage: Optional[TwoStageFit] = None) -> EstimateResult:
    """Primary ratio with the outcome regression from the two-stage fit."""
    if sample.n0 < 2:
        raise InputError("need at least two primary (s=0) units")
    if stage is None:
        stage = two_stage_outcome_fit(sample, fit, link)
    _, r_t = residuals(sample, fit)
    m = sample.s == 0
    r_y = sample.v[m] - stage.mu_y[m]
    return _primary_ratio("theta_b", sample, r_y, r_t[m], n_clipped=fit.n_clipped,
                          alpha_hat=stage.alpha_coef.tolist(),
                          beta_hat=stage.beta_coef.tolist())


def estimate(method: str, sample: Sample, fit: NuisanceFit,
             link: Optional[LinkSpec] = None) -> EstimateResult:
    """Dispatch on the method tag."""
    if method == "theta0":
        return estimate_theta_primary(sample, fit)
    if link is None:
        raise InputError(f"{method} needs a link specification")
    if method == "theta_a":
        return estimate_theta_fused_known_alpha(sample, fit, link)
    if method == "theta_b":
        return estimate_theta_two_stage(sample, fit, link)
    raise InputError(f"unknown method {method!r}")
