"""Monte Carlo experiment harness.

Every replication draws its data from its own substream keyed by
``(cell, replication)``, so results do not depend on how replications are
scheduled across workers.  Records are always merged in
``(cell, method, replication)`` order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dgp import (DgpConfig, generate_by_study, generate_dataset, intercept_for_log_ratio,
                  true_ate)
from .errors import ConfigurationError, FuseAteError, InputError
from .estimators import (CONSTANT, LINEAR_X1, METHODS, UNKNOWN, LinkForm, LinkSpec, class_design,
                         estimate, fit_link_regression)
from .nuisance import LINEAR, LOGISTIC, RAW, cross_fit, fit_regression

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("method", "n", "p", "log_ratio", "mse", "bias", "variance",
                   "coverage", "n_failed")
RECORD_COLUMNS = ("method", "n", "p", "log_ratio", "replication_index", "estimate",
                  "std_error", "covered_truth", "failed")
FAILURE_FLAG_RATE = 0.01
ORACLE_DRAWS = 10**6


def true_link(cfg: DgpConfig) -> LinkSpec:
    """Fully known link of the generative model (beta = 0)."""
    return LinkSpec.known(LinkForm.linear_x1(cfg.rho0, cfg.rho1), LinkForm.constant(0.0))


def estimation_link(alpha_class: str = LINEAR_X1, beta_class: str = CONSTANT) -> LinkSpec:
    return LinkSpec(UNKNOWN, alpha_class=alpha_class, beta_class=beta_class)


@dataclass(frozen=True)
class EstimationSettings:
    """How each replication is analysed."""

    folds: int = 5
    basis: str = RAW
    known_primary_propensity: Optional[float] = 0.5
    epsilon_clip: float = 0.01
    alpha_class: str = LINEAR_X1
    beta_class: str = CONSTANT


@dataclass(frozen=True)
class ExperimentGrid:
    n_values: Sequence[int]
    p_values: Sequence[int]
    log_ratio_values: Sequence[float]
    replications: int
    methods: Sequence[str] = METHODS
    base_cfg: DgpConfig = field(default_factory=DgpConfig)
    seed: int = 0
    settings: EstimationSettings = field(default_factory=EstimationSettings)

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        for name, kind in (("n_values", int), ("p_values", int),
                           ("log_ratio_values", float), ("methods", str)):
            object.__setattr__(self, name, tuple(kind(v) for v in getattr(self, name)))
            if not len(getattr(self, name)):
                raise ConfigurationError(f"{name} must be non-empty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigurationError(f"unknown methods {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGrid":
        d = dict(d)
        if d.pop("schema_version", 1) != 1:
            raise ConfigurationError("unsupported schema_version")
        base = DgpConfig.from_dict(d.pop("base_cfg", {}))
        settings = EstimationSettings(**d.pop("settings", {}))
        return cls(base_cfg=base, settings=settings, **d)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "n_values": list(self.n_values),
                "p_values": list(self.p_values),
                "log_ratio_values": list(self.log_ratio_values),
                "replications": self.replications, "methods": list(self.methods),
                "base_cfg": self.base_cfg.to_dict(), "seed": self.seed,
                "settings": asdict(self.settings)}


@dataclass(frozen=True)
class ExperimentRecord:
    method: str
    n: int
    p: int
    log_ratio: float
    replication_index: int
    estimate: float
    std_error: float
    covered_truth: bool
    runtime_ms: float
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class CellSummary:
    method: str
    n: int
    p: int
    log_ratio: float
    mse: float
    bias: float
    variance: float
    coverage: float
    n_failed: int
    n_ok: int
    theta_true: float
    flagged: bool


@dataclass
class GridResult:
    records: list
    summary: list

    def summary_for(self, method, n=None, p=None, log_ratio=None) -> list:
        return [c for c in self.summary if c.method == method
                and (n is None or c.n == n) and (p is None or c.p == p)
                and (log_ratio is None or c.log_ratio == log_ratio)]


def _replicate(task):
    """One replication: generate, cross-fit, run every method."""
    cfg, seed, key, methods, settings, theta_true, design, log_ratio = task
    start = time.perf_counter()
    if design is None:
        sample = generate_dataset(cfg, seed, key)
    else:
        sample = generate_by_study(cfg, design[0], design[1], seed, key)
    out = []
    try:
        fit = cross_fit(sample, settings.folds, settings.basis,
                        epsilon_clip=settings.epsilon_clip,
                        known_primary_propensity=settings.known_primary_propensity,
                        seed=key[-1])
    except FuseAteError as exc:
        fit, fit_error = None, f"{type(exc).__name__}: {exc}"
    links = {"theta0": None, "theta_a": true_link(cfg),
             "theta_b": estimation_link(settings.alpha_class, settings.beta_class)}
    for m in methods:
        if fit is None:
            out.append((m, math.nan, math.nan, False, True, fit_error))
            continue
        try:
            res = estimate(m, sample, fit, links[m])
        except FuseAteError as exc:
            out.append((m, math.nan, math.nan, False, True, f"{type(exc).__name__}: {exc}"))
            continue
        covered = res.ci_low <= theta_true <= res.ci_high
        out.append((m, res.estimate, res.std_error, bool(covered), False, ""))
    elapsed = (time.perf_counter() - start) * 1e3
    return [ExperimentRecord(m, cfg.n if design is None else sum(design), cfg.p, log_ratio,
                             key[-1], est, se, cov, elapsed, failed, err)
            for m, est, se, cov, failed, err in out]


def _map(tasks, threads):
    if threads <= 1:
        return [_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


def summarize(records: Sequence[ExperimentRecord], theta_true: float, replications: int) -> CellSummary:
    """MSE, bias, variance and coverage over the successful replications."""
    ok = [r for r in records if not r.failed]
    first = records[0]
    n_failed = len(records) - len(ok)
    if ok:
        est = np.array([r.estimate for r in ok])
        bias = float(est.mean() - theta_true)
        variance = float(np.mean((est - est.mean()) ** 2))
        mse = float(np.mean((est - theta_true) ** 2))
        coverage = float(np.mean([r.covered_truth for r in ok]))
    else:
        bias = variance = mse = coverage = math.nan
    flagged = n_failed > FAILURE_FLAG_RATE * replications
    if flagged:
        logger.warning("%s n=%d p=%d log_ratio=%g: %d of %d replications failed (%s)",
                       first.method, first.n, first.p, first.log_ratio, n_failed,
                       len(records), next(r.error for r in records if r.failed))
    return CellSummary(first.method, first.n, first.p, first.log_ratio, mse, bias, variance,
                       coverage, n_failed, len(ok), theta_true, flagged)


def run_replications(cfg: DgpConfig, replications: int, seed: int = 0,
                     methods: Sequence[str] = METHODS,
                     settings: EstimationSettings = EstimationSettings(),
                     theta_true: Optional[float] = None, cell: int = 0,
                     design: Optional[tuple] = None, log_ratio: float = math.nan,
                     threads: int = 1) -> GridResult:
    """Repeat generate -> cross-fit -> estimate for one configuration.

    ``design=(n0, n1)`` fixes the study sizes instead of drawing ``cfg.n``
    units with random selection.
    """
    if theta_true is None:
        theta_true = true_ate(cfg, ORACLE_DRAWS, seed, stream=(1, cell)).value
    tasks = [(cfg, seed, (0, cell, r), tuple(methods), settings, theta_true, design, log_ratio)
             for r in range(replications)]
    per_rep = _map(tasks, threads)
    records = []
    summary = []
    for m in methods:
        recs = [rec for rep in per_rep for rec in rep if rec.method == m]
        records.extend(recs)
        summary.append(summarize(recs, theta_true, replications))
    return GridResult(records, summary)


def run_grid(grid: ExperimentGrid, threads: int = 1) -> GridResult:
    """Run every (n, p, log_ratio) cell of the grid."""
    records, summary = [], []
    cell = 0
    for n in grid.n_values:
        for p in grid.p_values:
            for lr in grid.log_ratio_values:
                cfg = grid.base_cfg.replace(n=int(n), p=int(p))
                a0 = intercept_for_log_ratio(cfg, float(lr), seed=grid.seed)
                cfg = cfg.replace(a0=a0)
                theta = true_ate(cfg, ORACLE_DRAWS, grid.seed, stream=(1, cell)).value
                res = run_replications(cfg, grid.replications, grid.seed, grid.methods,
                                       grid.settings, theta, cell, log_ratio=float(lr),
                                       threads=threads)
                records.extend(res.records)
                summary.extend(res.summary)
                cell += 1
    return GridResult(records, summary)


# -- held-out error of the two outcome regressions ------------------------------

@dataclass(frozen=True)
class RateRow:
    n0: int
    n1: int
    rmse_one_stage: float
    rmse_two_stage: float
    replications: int


def run_rate_experiment(base_cfg: DgpConfig, n0_values: Sequence[int], n1_values: Sequence[int],
                        replications: int, seed: int = 0, basis: str = RAW,
                        alpha_class: str = LINEAR_X1, beta_class: str = CONSTANT,
                        primary_propensity: Optional[float] = 0.5,
                        test_size: int = 10**4,
                        ridge_lambda: Optional[float] = None) -> list:
    """Held-out RMSE of the direct and the two-stage primary outcome regression.

    Both are scored against the true ``mu_Y(x, 0)`` on a fresh draw of
    ``test_size`` primary-population units per replication.  The two-stage
    regressor mixes per-arm auxiliary fits with ``primary_propensity``
    (fitted by logistic regression when ``None``).  ``ridge_lambda`` is
    passed to every regression; ``None`` keeps the default conditioning ridge.
    """
    if not len(n0_values) or not len(n1_values):
        raise InputError("n0_values and n1_values must be non-empty")
    if min(n1_values) < 1:
        raise InputError("n1 must be >= 1; the two-stage fit needs auxiliary units")
    link = estimation_link(alpha_class, beta_class)
    rows = []
    for i, n0 in enumerate(n0_values):
        for j, n1 in enumerate(n1_values):
            one, two = [], []
            for r in range(replications):
                sample = generate_by_study(base_cfg, int(n0), int(n1), seed, (2, i, j, r))
                test = generate_by_study(base_cfg, test_size, 0, seed, (3, i, j, r))
                truth = base_cfg.mu_y(test.x, 0)
                prim, aux = sample.s == 0, sample.s == 1
                x, t, v = sample.x, sample.t, sample.v
                direct = fit_regression(x[prim], v[prim], LINEAR, basis, ridge_lambda)
                one.append(np.sqrt(np.mean((direct.predict(test.x) - truth) ** 2)))

                arms = [fit_regression(x[aux & (t == a)], v[aux & (t == a)], LINEAR, basis,
                                       ridge_lambda)
                        for a in (0, 1)]
                if primary_propensity is None:
                    e0_model = fit_regression(x[prim], t[prim], LOGISTIC, basis, ridge_lambda)
                    e0 = e0_model.predict
                else:
                    e0 = lambda z: np.full(z.shape[0], float(primary_propensity))  # noqa: E731

                def mu_w(z):
                    e = e0(z)
                    return e * arms[1].predict(z) + (1 - e) * arms[0].predict(z)

                ac, bc = fit_link_regression(v[prim], mu_w(x[prim]), x[prim], link)
                pred = (class_design(test.x, alpha_class) @ ac) * mu_w(test.x) \
                    + class_design(test.x, beta_class) @ bc
                two.append(np.sqrt(np.mean((pred - truth) ** 2)))
            rows.append(RateRow(int(n0), int(n1), float(np.mean(one)), float(np.mean(two)),
                                replications))
    return rows


# -- output ----------------------------------------------------------------------

def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return float.__repr__(v)
    return v


def write_records(records: Sequence[ExperimentRecord], out_dir, include_timing: bool = False):
    """``records.csv`` and ``records.jsonl``; timing is opt-in to keep files byte-stable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = RECORD_COLUMNS + (("runtime_ms",) if include_timing else ())
    with open(out_dir / "records.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([_cell(getattr(r, c)) for c in cols])
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            d = {c: getattr(r, c) for c in cols}
            fh.write(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v)
                                 for k, v in d.items()}) + "\n")


def write_summary(summary: Sequence[CellSummary], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for c in summary:
            w.writerow([_cell(getattr(c, k)) for k in SUMMARY_COLUMNS])


def write_rate_table(rows: Sequence[RateRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("n0", "n1", "rmse_one_stage", "rmse_two_stage", "replications"))
        for r in rows:
            w.writerow([_cell(v) for v in (r.n0, r.n1, r.rmse_one_stage, r.rmse_two_stage,
                                           r.replications)])
