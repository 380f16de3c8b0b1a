"""Efficient scores and variance bounds.

For a unit with ``r_T = T - mu_T(X, S)``:

    Delta0 = (V - mu_Y(X,0) - theta r_T) r_T / sigma_Y^2                 (S = 0)
    Delta1 = (alpha(X)(V - mu_W(X,1)) - theta r_T) r_T / (alpha^2 sigma_W^2)  (S = 1)

    primary score  R0 = (1-S) Delta0
    fused score    Ra = S Delta1 + (1-S) Delta0
    joint score    Rb = (Ra, S (theta r_T - alpha r_W)/(alpha^2 sigma_W^2) * theta r_T / alpha)

The joint score's second coordinate equals ``-(theta/alpha) S Delta1``.

Information per covariate value is ``I0(x) = E[Delta0^2 | S=0, x] P(S=0|x)``
and ``I1(x) = E[Delta1^2 | S=1, x] P(S=1|x)``.  Scalar bounds aggregate the
information over X before inverting (``V0 = 1 / E[I0]``), which is the
asymptotic variance of the scalar-theta estimator; ``aggregate="inverse"``
returns ``E[1 / I0(X)]`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .dgp import DgpConfig, Observation, Sample, substream
from .errors import InputError, LinkDegeneracyError, NumericalError, PrecisionError

Fn = Callable[[np.ndarray], np.ndarray]

DET_FLOOR = 1e-12
ALPHA_MIN = 1e-3
MIN_DRAWS = 10**3


@dataclass(frozen=True)
class ScoreContext:
    """Parameter value plus the nuisance functions a score is evaluated at.

    Every function maps an (n, p) covariate array to an (n,) array.
    """

    theta: float
    alpha_fn: Fn
    beta_fn: Fn
    mu_y0: Fn
    mu_w1: Fn
    mu_t0: Fn
    mu_t1: Fn
    sigma_y_sq: float
    sigma_w_sq: float

    def __post_init__(self):
        if not (self.sigma_y_sq > 0 and self.sigma_w_sq > 0):
            raise InputError("noise variances must be positive")

    def at(self, theta: float) -> "ScoreContext":
        return ScoreContext(theta, self.alpha_fn, self.beta_fn, self.mu_y0, self.mu_w1,
                            self.mu_t0, self.mu_t1, self.sigma_y_sq, self.sigma_w_sq)


def oracle_context(cfg: DgpConfig, theta: Optional[float] = None) -> ScoreContext:
    """Context built from the true generative functions.

    ``theta`` defaults to the true ATE (10^6-draw Monte Carlo).
    """
    if theta is None:
        from .dgp import true_ate
        theta = true_ate(cfg, 10**6, seed=0x0AC1E).value
    return ScoreContext(
        theta=float(theta),
        alpha_fn=cfg.alpha,
        beta_fn=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        mu_y0=lambda x: cfg.mu_y(x, 0),
        mu_w1=lambda x: cfg.mu_w(x, 1),
        mu_t0=lambda x: cfg.treatment_prob(x, 0),
        mu_t1=lambda x: cfg.treatment_prob(x, 1),
        sigma_y_sq=cfg.sigma_y**2,
        sigma_w_sq=cfg.sigma_w**2,
    )


def _columns(obs: Union[Observation, Sample]):
    if isinstance(obs, Sample):
        return obs.x, obs.s, obs.t.astype(float), obs.v, False
    if isinstance(obs, Observation):
        x = np.atleast_2d(np.asarray(obs.x, dtype=float))
        return x, np.array([obs.s]), np.array([float(obs.t)]), np.array([float(obs.v)]), True
    raise InputError("expected an Observation or a Sample")


def _alpha_checked(ctx: ScoreContext, x: np.ndarray) -> np.ndarray:
    a = np.asarray(ctx.alpha_fn(x), dtype=float)
    if a.size and np.min(np.abs(a)) < ALPHA_MIN:
        raise LinkDegeneracyError(f"|alpha(x)| = {np.min(np.abs(a)):.3g} below {ALPHA_MIN}")
    return a


def _delta0(ctx, x, t, v):
    r_t = t - ctx.mu_t0(x)
    return (v - ctx.mu_y0(x) - ctx.theta * r_t) * r_t / ctx.sigma_y_sq


def _delta1(ctx, x, t, v, alpha):
    r_t = t - ctx.mu_t1(x)
    return (alpha * (v - ctx.mu_w1(x)) - ctx.theta * r_t) * r_t / (alpha**2 * ctx.sigma_w_sq)


def _unwrap(values, single):
    return float(values[0]) if single else values


def score_primary(obs, ctx: ScoreContext):
    """``(1 - S) Delta0`` for one observation (float) or a sample (array)."""
    x, s, t, v, single = _columns(obs)
    out = np.zeros(len(s))
    m = s == 0
    if m.any():
        out[m] = _delta0(ctx, x[m], t[m], v[m])
    return _unwrap(out, single)


def score_fused(obs, ctx: ScoreContext):
    """``S Delta1 + (1 - S) Delta0``."""
    x, s, t, v, single = _columns(obs)
    out = np.zeros(len(s))
    m0, m1 = s == 0, s == 1
    if m0.any():
        out[m0] = _delta0(ctx, x[m0], t[m0], v[m0])
    if m1.any():
        a = _alpha_checked(ctx, x[m1])
        out[m1] = _delta1(ctx, x[m1], t[m1], v[m1], a)
    return _unwrap(out, single)


def score_joint(obs, ctx: ScoreContext):
    """Score for ``(theta, alpha)`` when alpha is unknown; shape (n, 2) or (2,)."""
    x, s, t, v, single = _columns(obs)
    out = np.zeros((len(s), 2))
    m0, m1 = s == 0, s == 1
    if m0.any():
        out[m0, 0] = _delta0(ctx, x[m0], t[m0], v[m0])
    if m1.any():
        a = _alpha_checked(ctx, x[m1])
        out[m1, 0] = _delta1(ctx, x[m1], t[m1], v[m1], a)
        r_t = t[m1] - ctx.mu_t1(x[m1])
        r_w = v[m1] - ctx.mu_w1(x[m1])
        th = ctx.theta
        out[m1, 1] = (th * r_t - a * r_w) / (a**2 * ctx.sigma_w_sq) * (th * r_t / a)
    return out[0] if single else out


# -- conditional information -------------------------------------------------

@dataclass(frozen=True)
class ConditionalInformation:
    """Per-covariate information terms ``I0(x)``, ``I1(x)`` and the ratio
    ``c(x) = theta / alpha(x)`` linking the joint score's coordinates."""

    i0: np.ndarray
    i1: np.ndarray
    c: np.ndarray

    @property
    def v0(self) -> np.ndarray:
        return 1.0 / self.i0

    @property
    def va(self) -> np.ndarray:
        return 1.0 / (self.i0 + self.i1)

    def sigma_b(self) -> np.ndarray:
        """Per-x inverse of ``E[Rb Rb' | x]``; shape (n, 2, 2)."""
        m = _joint_information(self.i0, self.i1, self.c)
        return _inv2(m)


def _joint_information(i0, i1, c):
    m = np.empty(np.shape(i0) + (2, 2))
    m[..., 0, 0] = i0 + i1
    m[..., 0, 1] = m[..., 1, 0] = -c * i1
    m[..., 1, 1] = c**2 * i1
    return m


def _inv2(m: np.ndarray) -> np.ndarray:
    """Closed-form 2x2 inverse, vectorised over leading axes."""
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    scale = np.maximum(np.abs(a * d), 1.0)
    if np.any(np.abs(det) <= DET_FLOOR * scale):
        raise NumericalError("information matrix is singular (determinant below floor)")
    out = np.empty_like(m)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


def conditional_information(cfg: DgpConfig, ctx: ScoreContext, x: np.ndarray) -> ConditionalInformation:
    """``I0(x)``, ``I1(x)`` under the generative law of ``cfg``.

    Expectations over ``T`` are exact sums over both arms; over the outcome
    noise they use the Gaussian second moment.  Nuisance functions come from
    ``ctx`` (oracle or fitted), so the result is the plug-in information of
    the score as evaluated.
    """
    x = np.atleast_2d(x)
    p0 = 1.0 - cfg.selection_prob(x)
    p1 = 1.0 - p0
    th = ctx.theta

    mt0, my0 = ctx.mu_t0(x), ctx.mu_y0(x)
    e0 = cfg.treatment_prob(x, 0)
    i0 = np.zeros(x.shape[0])
    for t, pt in ((1.0, e0), (0.0, 1.0 - e0)):
        r_t = t - mt0
        mean_res = cfg.alpha(x) * cfg.mean_w(x, t) - my0 - th * r_t
        i0 += pt * r_t**2 * (cfg.sigma_y**2 + mean_res**2)
    i0 = i0 / ctx.sigma_y_sq**2 * p0

    a = _alpha_checked(ctx, x)
    mt1, mw1 = ctx.mu_t1(x), ctx.mu_w1(x)
    e1 = cfg.treatment_prob(x, 1)
    i1 = np.zeros(x.shape[0])
    for t, pt in ((1.0, e1), (0.0, 1.0 - e1)):
        r_t = t - mt1
        mean_res = a * (cfg.mean_w(x, t) - mw1) - th * r_t
        i1 += pt * r_t**2 * (a**2 * cfg.sigma_w**2 + mean_res**2)
    i1 = i1 / (a**4 * ctx.sigma_w_sq**2) * p1
    return ConditionalInformation(i0, i1, th / a)


@dataclass(frozen=True)
class VarianceBounds:
    V0: float
    Va: float
    Vb: float
    Sigma_b: np.ndarray
    draws: int
    aggregate: str

    def to_dict(self) -> dict:
        return {"V0": self.V0, "Va": self.Va, "Vb": self.Vb,
                "Sigma_b": self.Sigma_b.tolist(), "draws": self.draws,
                "aggregate": self.aggregate}


def variance_bound(ctx: ScoreContext, *, cfg: Optional[DgpConfig] = None,
                   mc_draws: Optional[int] = None, sample: Optional[Sample] = None,
                   seed: int = 0, aggregate: str = "information") -> VarianceBounds:
    """Asymptotic variances ``V0``, ``Va``, ``Vb`` and the 2x2 ``Sigma_b``.

    Exactly one source must be given:

    * ``cfg`` and ``mc_draws``: covariates drawn from the generative law, the
      conditional information computed per draw, then aggregated;
    * ``sample``: empirical second moments of the scores over the units.

    ``Vb`` is the (1,1) entry of the inverted joint information, which is
    how the block inversion is checked numerically.
    """
    if aggregate not in ("information", "inverse"):
        raise InputError("aggregate must be 'information' or 'inverse'")
    if (sample is None) == (cfg is None):
        raise InputError("pass either a sample or a cfg with mc_draws")
    if sample is not None:
        if aggregate != "information":
            raise InputError("a sample supports only the information aggregate")
        r0 = score_primary(sample, ctx)
        ra = score_fused(sample, ctx)
        rb = score_joint(sample, ctx)
        j = rb.T @ rb / sample.n
        sigma = _inv2(j)
        return VarianceBounds(1.0 / np.mean(r0**2), 1.0 / np.mean(ra**2),
                              float(sigma[0, 0]), sigma, sample.n, aggregate)

    if mc_draws is None or mc_draws < MIN_DRAWS:
        raise PrecisionError(f"mc_draws must be >= {MIN_DRAWS}")
    rng = substream(seed, 0xB0)
    x = rng.standard_normal((int(mc_draws), cfg.p))
    info = conditional_information(cfg, ctx, x)
    if aggregate == "information":
        m = _joint_information(info.i0, info.i1, info.c).mean(axis=0)
        sigma = _inv2(m)
        v0 = 1.0 / info.i0.mean()
        va = 1.0 / (info.i0 + info.i1).mean()
    else:
        per_x = info.sigma_b()
        sigma = per_x.mean(axis=0)
        v0 = float(info.v0.mean())
        va = float(info.va.mean())
    return VarianceBounds(float(v0), float(va), float(sigma[0, 0]), sigma, int(mc_draws), aggregate)
