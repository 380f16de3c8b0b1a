"""Synthetic fused-study data.

Units carry covariates ``X ~ N(0, I_p)``, a study indicator ``S`` (1 for the
auxiliary study), a binary treatment ``T`` and one observed outcome ``V``:
the primary outcome ``Y`` when ``S = 0`` and the auxiliary outcome ``W`` when
``S = 1``.

    P(S=1 | X)    = expit(a0 + a1 X1 + a2 X2)
    P(T=1 | X, S) = 0.5 if S = 0 else expit(zeta1 X1)
    mu_W(X, T)    = (g0 + g1 X1 + g2 X2) T + b0 + b1 X1 + b2 X2 + b3 X3
    W             = mu_W(X, T) + N(0, sigma_w^2)
    Y             = alpha(X) mu_W(X, T) + N(0, sigma_y^2),  alpha(X) = rho0 + rho1 X1

Random numbers come from numpy's PCG64 seeded through ``SeedSequence(seed,
spawn_key=key)``; see :func:`substream`.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import special

from .errors import ConfigurationError, InputError, PrecisionError

SCHEMA_VERSION = 1


def expit(x):
    """Logistic function ``1 / (1 + exp(-x))``; overflow-safe, works on arrays."""
    return special.expit(x)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``.

    The key is a tuple of non-negative integers (replication index, cell
    index, ...).  Identical ``(seed, key)`` gives identical draws on every
    platform numpy supports, and distinct keys give statistically independent
    streams regardless of the order in which they are consumed.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the generative model.

    The default is the benchmark used throughout the tests: selection and the
    auxiliary treatment both depend on ``X1``, the effect on ``W`` varies with
    ``X2`` and the link slope is constant.
    """

    p: int = 10
    n: int = 2000
    a0: float = 0.0
    a1: float = 0.5
    a2: float = 0.0
    zeta1: float = 0.5
    gamma0: float = 1.0
    gamma1: float = 0.0
    gamma2: float = -0.25
    b0: float = 0.5
    b1: float = 1.0
    b2: float = -1.0
    b3: float = 0.5
    rho0: float = 0.8
    rho1: float = 0.0
    sigma_w: float = 1.0
    sigma_y: float = 1.0

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 3:
            raise ConfigurationError(f"p must be an integer >= 3, got {self.p}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {self.n}")
        if not (self.sigma_w > 0 and self.sigma_y > 0):
            raise ConfigurationError("sigma_w and sigma_y must be positive")
        for f in dataclasses.fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ConfigurationError(f"{f.name} must be finite")

    @classmethod
    def varying_link(cls, **overrides) -> "DgpConfig":
        """Covariate-dependent slope ``alpha(X) = 1 + 0.3 X1`` with effect
        heterogeneity in both ``X1`` and ``X2``.

        ``alpha`` crosses zero on the support of ``X1``, so the fused estimator
        is not well behaved here; kept for demonstrations.
        """
        base = dict(a2=-0.5, gamma1=0.5, gamma2=-0.5, rho0=1.0, rho1=0.3)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    # -- mean functions -----------------------------------------------------

    def selection_prob(self, x: np.ndarray) -> np.ndarray:
        """P(S=1 | X)."""
        x = np.atleast_2d(x)
        return expit(self.a0 + self.a1 * x[:, 0] + self.a2 * x[:, 1])

    def treatment_prob(self, x: np.ndarray, s) -> np.ndarray:
        """P(T=1 | X, S)."""
        x = np.atleast_2d(x)
        s = np.broadcast_to(np.asarray(s), (x.shape[0],))
        return np.where(s == 1, expit(self.zeta1 * x[:, 0]), 0.5)

    def effect_w(self, x: np.ndarray) -> np.ndarray:
        """Treatment effect on W (the gamma-linear term)."""
        x = np.atleast_2d(x)
        return self.gamma0 + self.gamma1 * x[:, 0] + self.gamma2 * x[:, 1]

    def baseline_w(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.b0 + self.b1 * x[:, 0] + self.b2 * x[:, 1] + self.b3 * x[:, 2]

    def alpha(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.rho0 + self.rho1 * x[:, 0]

    def theta(self, x: np.ndarray) -> np.ndarray:
        """Conditional effect on Y: alpha(X) times the effect on W."""
        return self.alpha(x) * self.effect_w(x)

    def mean_w(self, x: np.ndarray, t) -> np.ndarray:
        """Noiseless W given (X, T)."""
        return self.effect_w(x) * np.asarray(t, dtype=float) + self.baseline_w(x)

    def mu_w(self, x: np.ndarray, s) -> np.ndarray:
        """E[W | X, S=s], averaging over the study-specific treatment law."""
        return self.effect_w(x) * self.treatment_prob(x, s) + self.baseline_w(x)

    def mu_y(self, x: np.ndarray, s=0) -> np.ndarray:
        """E[Y | X, S=s]."""
        return self.alpha(x) * self.mu_w(x, s)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        d.update(dataclasses.asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown DgpConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DgpConfig":
        return cls.from_dict(json.loads(text))


class Observation(NamedTuple):
    x: np.ndarray
    s: int
    t: int
    v: float


class Sample:
    """Column-oriented collection of observations.

    Parameters
    ----------
    x : array of shape (n, p)
    s, t : arrays of shape (n,) with values in {0, 1}
    v : array of shape (n,), finite
    """

    __slots__ = ("x", "s", "t", "v")

    def __init__(self, x, s, t, v):
        x = np.array(x, dtype=float, copy=True)
        if x.ndim != 2:
            raise InputError("x must be two-dimensional")
        n = x.shape[0]
        s = np.asarray(s)
        t = np.asarray(t)
        v = np.array(v, dtype=float, copy=True)
        for name, arr in (("s", s), ("t", t), ("v", v)):
            if arr.shape != (n,):
                raise InputError(f"{name} must have shape ({n},), got {arr.shape}")
        for name, arr in (("s", s), ("t", t)):
            if not np.all((arr == 0) | (arr == 1)):
                raise InputError(f"{name} must be binary")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(x)):
            raise InputError("x and v must be finite")
        self.x = x
        self.s = s.astype(np.int64)
        self.t = t.astype(np.int64)
        self.v = v
        for arr in (self.x, self.s, self.t, self.v):
            arr.setflags(write=False)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Sample":
        if not observations:
            raise InputError("no observations")
        x = np.vstack([np.asarray(o.x, dtype=float) for o in observations])
        return cls(x, [o.s for o in observations], [o.t for o in observations],
                   [o.v for o in observations])

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n0(self) -> int:
        return int(np.sum(self.s == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.s == 1))

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Observation:
        return Observation(self.x[i].copy(), int(self.s[i]), int(self.t[i]), float(self.v[i]))

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self[i]

    def subset(self, mask) -> "Sample":
        return Sample(self.x[mask], self.s[mask], self.t[mask], self.v[mask])

    def with_outcomes(self, v) -> "Sample":
        return Sample(self.x, self.s, self.t, v)

    def counts(self) -> dict:
        """Units per study and arm."""
        return {
            "n": self.n, "n0": self.n0, "n1": self.n1,
            "n0_treated": int(np.sum((self.s == 0) & (self.t == 1))),
            "n0_control": int(np.sum((self.s == 0) & (self.t == 0))),
            "n1_treated": int(np.sum((self.s == 1) & (self.t == 1))),
            "n1_control": int(np.sum((self.s == 1) & (self.t == 0))),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.x.shape == other.x.shape
                and self.x.tobytes() == other.x.tobytes()
                and self.s.tobytes() == other.s.tobytes()
                and self.t.tobytes() == other.t.tobytes()
                and self.v.tobytes() == other.v.tobytes())

    __hash__ = None

    def __repr__(self) -> str:
        return f"Sample(n={self.n}, p={self.p}, n0={self.n0}, n1={self.n1})"


def _outcomes(cfg: DgpConfig, x, s, t, rng) -> np.ndarray:
    mean_w = cfg.mean_w(x, t)
    w = mean_w + cfg.sigma_w * rng.standard_normal(len(s))
    y = cfg.alpha(x) * mean_w + cfg.sigma_y * rng.standard_normal(len(s))
    return np.where(s == 1, w, y)


def _key(stream) -> tuple:
    return tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)


def generate_dataset(cfg: DgpConfig, seed: int, stream=0) -> Sample:
    """Draw ``cfg.n`` units from the generative model.

    Draw order is fixed (X, selection uniforms, treatment uniforms, W noise,
    Y noise) so the output is a pure function of ``(cfg, seed, stream)``.
    ``stream`` is an int or a tuple of ints (e.g. ``(cell, replication)``).
    """
    rng = substream(seed, *_key(stream))
    n = cfg.n
    x = rng.standard_normal((n, cfg.p))
    s = (rng.random(n) < cfg.selection_prob(x)).astype(np.int64)
    t = (rng.random(n) < cfg.treatment_prob(x, s)).astype(np.int64)
    v = _outcomes(cfg, x, s, t, rng)
    return Sample(x, s, t, v)


def generate_by_study(cfg: DgpConfig, n0: int, n1: int, seed: int, stream=0) -> Sample:
    """Draw exactly ``n0`` primary and ``n1`` auxiliary units.

    Covariates of each study follow ``X | S=s`` (rejection on the selection
    model), which is what fixing the study sizes in a design means.  Primary
    units come first.
    """
    if n0 < 0 or n1 < 0 or n0 + n1 == 0:
        raise InputError("need n0, n1 >= 0 with n0 + n1 > 0")
    rng = substream(seed, *_key(stream))
    need = {0: n0, 1: n1}
    kept = {0: [], 1: []}
    batch = max(1024, 2 * (n0 + n1))
    while any(sum(len(c) for c in kept[k]) < need[k] for k in (0, 1)):
        xb = rng.standard_normal((batch, cfg.p))
        sb = (rng.random(batch) < cfg.selection_prob(xb)).astype(np.int64)
        for k in (0, 1):
            have = sum(len(c) for c in kept[k])
            if have < need[k]:
                kept[k].append(xb[sb == k][: need[k] - have])
    x = np.vstack([np.vstack(kept[0]) if n0 else np.empty((0, cfg.p)),
                   np.vstack(kept[1]) if n1 else np.empty((0, cfg.p))])
    s = np.r_[np.zeros(n0, np.int64), np.ones(n1, np.int64)]
    t = (rng.random(n0 + n1) < cfg.treatment_prob(x, s)).astype(np.int64)
    v = _outcomes(cfg, x, s, t, rng)
    return Sample(x, s, t, v)


@dataclass(frozen=True)
class AteOracle:
    value: float
    std_error: float
    draws: int


def true_ate(cfg: DgpConfig, mc_draws: int = 10**6, seed: int = 0, stream=0) -> AteOracle:
    """Monte Carlo value of ``E[theta(X) | S=0]``.

    Covariates are drawn from the marginal law and reweighted by
    ``P(S=0 | X)``; the standard error is the delta-method error of that
    ratio estimator.
    """
    if mc_draws < 10**4:
        raise PrecisionError(f"mc_draws must be >= 1e4, got {mc_draws}")
    rng = substream(seed, *_key(stream))
    # only X1 and X2 enter theta and the selection model
    x = rng.standard_normal((int(mc_draws), 2))
    x = np.hstack([x, np.zeros((x.shape[0], 1))])
    w = 1.0 - cfg.selection_prob(x)
    th = cfg.theta(x)
    total = w.sum()
    value = float(np.dot(w, th) / total)
    se = float(np.sqrt(np.sum((w * (th - value)) ** 2)) / total)
    if cfg.rho1 == 0 and cfg.gamma1 == 0 and cfg.gamma2 == 0:
        value, se = float(cfg.rho0 * cfg.gamma0), 0.0
    return AteOracle(value, se, int(mc_draws))


def intercept_for_log_ratio(cfg: DgpConfig, log_ratio: float, mc_draws: int = 200_000,
                            seed: int = 0, tol: float = 1e-3) -> float:
    """Solve for ``a0`` so that ``log(P(S=1)/P(S=0))`` hits ``log_ratio``.

    Bisection on the Monte Carlo mean of the selection probability over
    ``[-20, 20]``; stops once the implied ratio ``P(S=1)/P(S=0)`` is within
    ``tol`` (relative) of the target.
    """
    rng = substream(seed, 0xA0)
    x = np.hstack([rng.standard_normal((mc_draws, 2)), np.zeros((mc_draws, 1))])
    lin = cfg.a1 * x[:, 0] + cfg.a2 * x[:, 1]

    def log_ratio_at(a0):
        q = float(np.mean(expit(a0 + lin)))
        if q <= 0.0 or q >= 1.0:
            return math.copysign(math.inf, q - 0.5)
        return math.log(q / (1.0 - q))

    lo, hi = -20.0, 20.0
    if not (log_ratio_at(lo) <= log_ratio <= log_ratio_at(hi)):
        raise ConfigurationError(f"log_ratio {log_ratio} unreachable with a0 in [-20, 20]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        got = log_ratio_at(mid)
        if abs(math.expm1(got - log_ratio)) <= tol:
            return mid
        if got < log_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
