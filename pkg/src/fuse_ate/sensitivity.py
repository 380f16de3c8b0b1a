"""Link misspecification and scale linking.

Three tools:

* :func:`misspecification_bias` evaluates
  ``E[(alpha_mis(X) - alpha*(X)) / alpha*(X) * theta(X) | S=1]`` and the same
  quantity multiplied by ``P(S=1)``; both are reported.
* :func:`fused_limit` gives the probability limit of the fused estimator
  under an arbitrary assumed slope, from which its exact asymptotic bias
  follows.
* :func:`scale_link_from_thresholds` derives a linear crosswalk between two
  instruments from published severity category cut-offs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dgp import DgpConfig, Sample, substream
from .errors import InputError, LinkDegeneracyError, PrecisionError
from .estimators import ALPHA_MIN, LinkSpec, estimate_theta_fused_known_alpha
from .nuisance import NuisanceFit

Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BiasEvaluation:
    """Misspecification bias under both normalisations.

    ``conditional`` is ``E[B(X) | S=1]``; ``weighted`` is that times
    ``P(S=1)``.
    """

    conditional: float
    conditional_se: float
    weighted: float
    weighted_se: float
    p_s1: float


def misspecification_bias(source: Union[DgpConfig, Sample], alpha_mis: Fn, alpha_star: Fn,
                          theta_fn: Fn, mc_draws: int = 10**6, seed: int = 0,
                          alpha_min: float = ALPHA_MIN) -> BiasEvaluation:
    """Relative slope error times the effect, averaged over the auxiliary study.

    With a :class:`DgpConfig` the average is a Monte Carlo integral over
    ``X ~ N(0, I)`` weighted by ``P(S=1 | X)``; with a :class:`Sample` it is
    the empirical mean over auxiliary units.
    """
    if isinstance(source, Sample):
        x = source.x[source.s == 1]
        if x.shape[0] == 0:
            raise InputError("sample has no auxiliary units")
        w = np.ones(x.shape[0])
        p_s1 = source.n1 / source.n
    else:
        if mc_draws < 10**4:
            raise PrecisionError("mc_draws must be >= 1e4")
        rng = substream(seed, 0xB1A5)
        x = rng.standard_normal((int(mc_draws), source.p))
        w = source.selection_prob(x)
        p_s1 = float(w.mean())
    a_star = np.asarray(alpha_star(x), dtype=float)
    if np.min(np.abs(a_star)) < alpha_min:
        raise LinkDegeneracyError("alpha_star too close to zero on the auxiliary population")
    b = (np.asarray(alpha_mis(x), dtype=float) - a_star) / a_star * np.asarray(theta_fn(x), dtype=float)
    b = np.broadcast_to(b, w.shape)
    total = w.sum()
    value = float(np.dot(w, b) / total)
    se = float(np.sqrt(np.sum((w * (b - value)) ** 2)) / total)
    return BiasEvaluation(value, se, value * p_s1, se * p_s1, p_s1)


def fused_limit(cfg: DgpConfig, alpha_assumed: Fn, mc_draws: int = 10**6, seed: int = 0,
                sigma_y_sq: Optional[float] = None, sigma_w_sq: Optional[float] = None) -> float:
    """Probability limit of the fused estimator when ``alpha_assumed`` is used.

    Each study contributes ``E[num | X]`` and ``E[den | X]`` weighted by its
    selection probability:

        primary:   num = theta(X) v0(X) / s_y,       den = v0(X) / s_y
        auxiliary: num = phi(X) v1(X) / (a s_w),     den = v1(X) / (a^2 s_w)

    where ``v_s`` is the treatment variance in study s, ``phi`` the effect on
    W and ``a`` the assumed slope.  Noise variances default to the truth.
    """
    rng = substream(seed, 0x11A1)
    x = rng.standard_normal((int(mc_draws), cfg.p))
    p1 = cfg.selection_prob(x)
    p0 = 1.0 - p1
    sy = cfg.sigma_y**2 if sigma_y_sq is None else sigma_y_sq
    sw = cfg.sigma_w**2 if sigma_w_sq is None else sigma_w_sq
    e0 = cfg.treatment_prob(x, 0)
    e1 = cfg.treatment_prob(x, 1)
    v0 = e0 * (1 - e0)
    v1 = e1 * (1 - e1)
    a = np.asarray(alpha_assumed(x), dtype=float)
    num = p0 * cfg.theta(x) * v0 / sy + p1 * cfg.effect_w(x) * v1 / (a * sw)
    den = p0 * v0 / sy + p1 * v1 / (a**2 * sw)
    return float(num.mean() / den.mean())


def sensitivity_sweep(sample: Sample, fit: NuisanceFit, link_base: LinkSpec,
                      alpha_scale_grid: Sequence[float]) -> list:
    """Fused estimate for each multiple ``k`` of the base slope.

    Returns ``[(k, EstimateResult), ...]`` in grid order.
    """
    grid = [float(k) for k in alpha_scale_grid]
    if not grid or any(not (k > 0) for k in grid):
        raise InputError("alpha scale grid must be non-empty and positive")
    out = []
    for k in grid:
        link = link_base.with_alpha(link_base.alpha_form.scaled(k))
        out.append((k, estimate_theta_fused_known_alpha(sample, fit, link)))
    return out


def parse_grid(text: str) -> list:
    """``"lo:hi:steps"`` -> evenly spaced list (inclusive)."""
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise InputError(f"grid must look like lo:hi:steps, got {text!r}") from exc
    if steps < 1:
        raise InputError("steps must be >= 1")
    if steps == 1:
        return [lo]
    return np.linspace(lo, hi, steps).tolist()


# -- scale linking -------------------------------------------------------------

@dataclass(frozen=True)
class SeverityThresholds:
    """Ordered severity categories of one instrument.

    ``category_ranges`` holds ``(low, high)`` per category; ``high=None``
    marks an open-ended top category.
    """

    category_ranges: tuple
    anchored_at_zero: bool = True

    def __post_init__(self):
        ranges = tuple((float(lo), None if hi is None else float(hi))
                       for lo, hi in self.category_ranges)
        object.__setattr__(self, "category_ranges", ranges)
        if not ranges:
            raise InputError("need at least one category")
        prev_high = -math.inf
        for i, (lo, hi) in enumerate(ranges):
            if hi is not None and not lo < hi:
                raise InputError(f"category {i}: low must be < high")
            if lo <= prev_high:
                raise InputError(f"category {i} overlaps the previous one")
            if hi is None and i != len(ranges) - 1:
                raise InputError("only the top category may be open-ended")
            prev_high = hi if hi is not None else math.inf

    def midpoints(self, close_top: Optional[float] = None) -> list:
        mids = []
        for lo, hi in self.category_ranges:
            if hi is None:
                mids.append(None if close_top is None else 0.5 * (lo + close_top))
            else:
                mids.append(0.5 * (lo + hi))
        return mids

    @classmethod
    def from_dict(cls, d: dict) -> "SeverityThresholds":
        return cls(tuple(tuple(r) for r in d["category_ranges"]),
                   bool(d.get("anchored_at_zero", True)))

    def to_dict(self) -> dict:
        return {"category_ranges": [list(r) for r in self.category_ranges],
                "anchored_at_zero": self.anchored_at_zero}


# published cut-offs: COWS mild..severe, SOWS mild..severe
COWS = SeverityThresholds(((5, 12), (13, 24), (25, 36), (37, None)))
SOWS = SeverityThresholds(((1, 10), (11, 15), (16, 20), (21, 30)))


def scale_link_from_thresholds(a: SeverityThresholds, b: SeverityThresholds,
                               through_origin: bool = True,
                               top_policy: str = "drop",
                               close_top: Optional[Sequence[float]] = None):
    """Linear map ``a = alpha * b + beta`` through matched category midpoints.

    Parameters
    ----------
    top_policy : {"drop", "impute"}
        A matched pair whose category on either scale is open-ended is dropped
        (default) or closed using ``close_top = (upper_a, upper_b)``.
    through_origin : bool
        Fit without intercept; honoured only when both scales are anchored
        at zero.

    Returns
    -------
    (alpha, beta)
    """
    na, nb = len(a.category_ranges), len(b.category_ranges)
    if na != nb:
        raise InputError(f"category counts differ ({na} vs {nb})")
    if top_policy not in ("drop", "impute"):
        raise InputError("top_policy must be 'drop' or 'impute'")
    ca = cb = None
    if top_policy == "impute":
        if close_top is None:
            raise InputError("impute policy needs close_top=(upper_a, upper_b)")
        ca, cb = close_top
    ma, mb = a.midpoints(ca), b.midpoints(cb)
    pairs = [(ya, yb) for ya, yb in zip(ma, mb) if ya is not None and yb is not None]
    if not pairs:
        raise InputError("no bounded category pairs to fit")
    ya = np.array([p[0] for p in pairs])
    xb = np.array([p[1] for p in pairs])
    if through_origin and a.anchored_at_zero and b.anchored_at_zero:
        return float(np.dot(xb, ya) / np.dot(xb, xb)), 0.0
    if len(pairs) < 2:
        raise InputError("need two category pairs to fit an intercept")
    design = np.column_stack([xb, np.ones_like(xb)])
    (alpha, beta), *_ = np.linalg.lstsq(design, ya, rcond=None)
    return float(alpha), float(beta)
