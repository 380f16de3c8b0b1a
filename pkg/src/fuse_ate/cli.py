"""``fuse-ate`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .dgp import DgpConfig, generate_dataset
from .errors import FuseAteError
from .estimators import METHODS, LinkSpec, estimate
from .experiments import (EstimationSettings, ExperimentGrid, run_grid, run_rate_experiment,
                          write_rate_table, write_records, write_summary)
from .io import ingest_csv, write_sample_csv
from .nuisance import cross_fit
from .scores import oracle_context, variance_bound
from .sensitivity import (SeverityThresholds, parse_grid, scale_link_from_thresholds,
                          sensitivity_sweep)

log = logging.getLogger("fuse_ate")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FuseAteError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FuseAteError(f"{path}: invalid JSON ({exc})") from None


def _out_path(args, name: str) -> Path:
    target = Path(args.out) if getattr(args, "out", None) else Path(args.out_dir) / name
    target.parent.mkdir(parents=True, exist_ok=True)
    return target


def _emit_json(args, name: str, payload: dict):
    text = json.dumps(payload, indent=2)
    if getattr(args, "out", None) or args.out_dir:
        _out_path(args, name).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _config(path):
    return DgpConfig() if path is None else DgpConfig.from_dict(_read_json(path))


def cmd_simulate(args):
    cfg = _config(args.config)
    if args.n is not None:
        cfg = cfg.replace(n=args.n)
    sample = generate_dataset(cfg, args.seed)
    target = Path(args.out) if args.out else Path(args.out_dir or ".") / "sample.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_sample_csv(sample, target)
    log.info("wrote %d rows to %s", sample.n, target)


def _fit(args, sample):
    return cross_fit(sample, args.folds, args.basis, seed=args.seed,
                     known_primary_propensity=args.known_propensity)


def cmd_estimate(args):
    sample, report = ingest_csv(args.data)
    link = LinkSpec.from_dict(_read_json(args.link)) if args.link else None
    if args.method != "theta0" and link is None:
        raise FuseAteError(f"--link is required for {args.method}")
    fit = _fit(args, sample)
    result = estimate(args.method, sample, fit, link)
    payload = result.to_dict()
    payload["data"] = report
    _emit_json(args, "estimate.json", payload)


def cmd_bounds(args):
    cfg = _config(args.config)
    bounds = variance_bound(oracle_context(cfg), cfg=cfg, mc_draws=args.draws, seed=args.seed,
                            aggregate=args.aggregate)
    _emit_json(args, "bounds.json", bounds.to_dict())


def cmd_sensitivity(args):
    sample, _ = ingest_csv(args.data, require_both_studies=True)
    link = LinkSpec.from_dict(_read_json(args.link))
    fit = _fit(args, sample)
    curve = sensitivity_sweep(sample, fit, link, parse_grid(args.grid))
    rows = [(k, r.estimate, r.std_error, r.ci_low, r.ci_high) for k, r in curve]
    if args.out or args.out_dir:
        fh = open(_out_path(args, "sensitivity.csv"), "w", newline="", encoding="utf-8")
    else:
        fh = sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scale", "estimate", "se", "ci_lo", "ci_hi"))
        for row in rows:
            w.writerow([float.__repr__(float(v)) for v in row])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_link(args):
    a = SeverityThresholds.from_dict(_read_json(args.a))
    b = SeverityThresholds.from_dict(_read_json(args.b))
    close = tuple(args.close_top) if args.close_top else None
    alpha, beta = scale_link_from_thresholds(
        a, b, through_origin=args.through_origin,
        top_policy="impute" if close else "drop", close_top=close)
    _emit_json(args, "link.json", {"alpha": alpha, "beta": beta})


def cmd_grid(args):
    doc = _read_json(args.config)
    doc.setdefault("seed", args.seed)
    grid = ExperimentGrid.from_dict(doc)
    result = run_grid(grid, threads=args.threads)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_records(result.records, out, include_timing=args.timing)
    write_summary(result.summary, out / "summary.csv")
    for c in result.summary:
        if c.flagged:
            log.warning("cell %s n=%d p=%d log_ratio=%g: %d failed replications",
                        c.method, c.n, c.p, c.log_ratio, c.n_failed)


def cmd_rate(args):
    doc = _read_json(args.config) if args.config else {}
    if doc.pop("schema_version", 1) != 1:
        raise FuseAteError("unsupported schema_version")
    cfg = DgpConfig.from_dict(doc.pop("base_cfg", {}))
    n0 = doc.pop("n0_values", args.n0)
    n1 = doc.pop("n1_values", args.n1)
    reps = doc.pop("replications", args.replications)
    rows = run_rate_experiment(cfg, n0, n1, reps, seed=doc.pop("seed", args.seed), **doc)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_rate_table(rows, out / "rate.csv")


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # the subcommand copy suppresses its defaults so it cannot overwrite a
    # value given before the subcommand name
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="64-bit master seed")
    common.add_argument("--threads", type=int, default=d(1), help="worker processes")
    common.add_argument("--out-dir", default=d(None), help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuse-ate", parents=[_global_flags(True)],
                                     description="Fused ATE estimation with an auxiliary study.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[_global_flags(False)], help=help_,
                           argument_default=argparse.SUPPRESS)
        p.set_defaults(func=fn)
        return p

    def fitting(p):
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--basis", choices=("raw", "quadratic"), default="raw")
        p.add_argument("--known-propensity", type=float, default=None,
                       help="known P(T=1) in the primary study")

    p = add("simulate", cmd_simulate, "draw a sample and write it as CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None)

    p = add("estimate", cmd_estimate, "estimate the ATE from a CSV sample")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--link", default=None)
    p.add_argument("--out", default=None)
    fitting(p)

    p = add("bounds", cmd_bounds, "variance bounds under a configuration")
    p.add_argument("--config", default=None)
    p.add_argument("--draws", type=int, default=10**5)
    p.add_argument("--aggregate", choices=("information", "inverse"), default="information")
    p.add_argument("--out", default=None)

    p = add("sensitivity", cmd_sensitivity, "fused estimate over a grid of slope multipliers")
    p.add_argument("--data", required=True)
    p.add_argument("--link", required=True)
    p.add_argument("--grid", required=True, help="lo:hi:steps")
    p.add_argument("--out", default=None)
    fitting(p)

    p = add("link-from-thresholds", cmd_link, "linear crosswalk from category thresholds")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--through-origin", action="store_true", default=False)
    p.add_argument("--close-top", type=float, nargs=2, default=None,
                   metavar=("UPPER_A", "UPPER_B"))
    p.add_argument("--out", default=None)

    p = add("grid", cmd_grid, "Monte Carlo grid over (n, p, log_ratio)")
    p.add_argument("--config", required=True)
    p.add_argument("--timing", action="store_true", default=False,
                   help="include runtime_ms in record files")

    p = add("rate-experiment", cmd_rate, "held-out error of the outcome regressions")
    p.add_argument("--config", default=None)
    p.add_argument("--n0", type=int, nargs="+", default=[200])
    p.add_argument("--n1", type=int, nargs="+", default=[200, 2000, 20000])
    p.add_argument("--replications", type=int, default=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except FuseAteError as exc:
        print(f"fuse-ate: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
