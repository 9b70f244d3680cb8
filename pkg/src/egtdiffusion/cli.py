"""Command-line entry point: ``egtdiff simulate|theory|fit|predict|compare|hist``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import estimation as est
from .game import PayoffMatrix, SelectionIntensity, UpdateRule
from .graphs import degree_profile, load_edge_list
from .sim import DEFAULT_REGEN_EVERY, EnsembleParams, NetworkSpec, default_jobs, ensemble
from .theory import NetworkClass, UnsupportedDynamicsError, theory_trajectory
from .trajectory import read_json, write_json

log = logging.getLogger("egtdiff")

JOBS_ENV = "EGTDIFF_JOBS"


class ConfigError(ValueError):
    pass


def _payoff(args) -> PayoffMatrix:
    if args.payoff:
        try:
            vals = [float(v) for v in args.payoff.split(",")]
        except ValueError:
            raise ConfigError(f"--payoff must be 'uff,ufn,unn', got {args.payoff!r}") from None
        if len(vals) != 3:
            raise ConfigError(f"--payoff needs three values, got {len(vals)}")
        return PayoffMatrix(*vals)
    return PayoffMatrix.case(args.case)


def _alpha(args) -> SelectionIntensity:
    return SelectionIntensity(args.alpha, args.decay)


def _require(args, name, flag):
    if getattr(args, name) is None:
        raise ConfigError(f"--net {args.net} requires {flag}")
    return getattr(args, name)


def _network_spec(args) -> NetworkSpec:
    if args.net == "edges":
        path = Path(_require(args, "edges", "--edges PATH"))
        if not path.exists():
            raise ConfigError(f"edge list {path} does not exist")
        return NetworkSpec("edges", graph=load_edge_list(path, name=path.name))
    if args.net == "regular":
        return NetworkSpec("regular", args.n, k=_require(args, "k", "--k"))
    if args.net == "er":
        return NetworkSpec("er", args.n, kbar=_require(args, "kbar", "--kbar"))
    if args.net == "ba":
        return NetworkSpec("ba", args.n, m=_require(args, "m", "--m"))
    return NetworkSpec("complete", args.n)


def _network_class(args) -> NetworkClass:
    if args.net == "complete":
        return NetworkClass.complete()
    if args.net == "regular":
        return NetworkClass.uniform(_require(args, "k", "--k"))
    if args.net == "er":
        return NetworkClass.er(_require(args, "kbar", "--kbar"))
    if args.net == "ba":
        m = _require(args, "m", "--m")
        return NetworkClass.ba(2.0 * m, args.n)
    prof = degree_profile(_network_spec(args).graph)
    return NetworkClass.nonuniform(prof.mean, prof.second_moment)


def _init(args):
    return None if args.x0 is None else float(args.x0)


def cmd_simulate(args) -> int:
    params = EnsembleParams(_network_spec(args), UpdateRule.parse(args.rule), _payoff(args),
                            _alpha(args), args.slots, _init(args), args.payoff_mode,
                            args.converge)
    traj = ensemble(params, args.runs, args.regen_every, args.seed,
                    "plain" if args.plain else "survival", args.jobs)
    out = Path(args.out)
    traj.to_csv(out)
    summary = dict(traj.meta)
    summary["csv"] = str(out)
    write_json(out.with_suffix(".json"), summary)
    print(f"final x_f = {traj.final:.6f} over {traj.meta['runs']} runs -> {out}")
    return 0


def cmd_theory(args) -> int:
    x0 = 1.0 / args.n if args.x0 is None else float(args.x0)
    try:
        traj = theory_trajectory(_network_class(args), _payoff(args), _alpha(args), x0,
                                 args.slots, args.rule)
    except UnsupportedDynamicsError as exc:
        raise ConfigError(str(exc)) from None
    traj.to_csv(args.out)
    print(f"final x_f = {traj.final:.6f} -> {args.out}")
    return 0


def _series_files(paths):
    files = []
    for p in map(Path, paths):
        if not p.exists():
            raise ConfigError(f"{p} does not exist")
        files += sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise ConfigError("no series files found")
    return files


def _batch(args, work) -> int:
    """Run ``work(series, stem)`` per file; report per-file status, fail if any failed."""
    out = Path(args.out)
    files = _series_files(args.series)
    failed = 0
    for f in files:
        stem = f.stem if len(files) > 1 or out.suffix == "" else None
        try:
            work(est.ingest_series(f), stem)
            print(f"{f}: ok")
        except (ValueError, est.FitFailure) as exc:
            failed += 1
            print(f"{f}: FAILED ({exc})", file=sys.stderr)
    return 1 if failed else 0


def _target(args, stem, suffix):
    out = Path(args.out)
    if stem is None:
        return out
    return out / f"{stem}{suffix}"


def cmd_fit(args) -> int:
    def work(series, stem):
        fit = est.fit_diffusion(series, args.fraction, pin_x0=args.pin_x0)
        write_json(_target(args, stem, ".fit.json"), fit.report())

    return _batch(args, work)


def cmd_predict(args) -> int:
    def work(series, stem):
        pred = est.predict(series, args.fraction)
        report = pred.fit.report()
        report.update(holdout_rmse=pred.holdout_rmse,
                      holdout_increment_rmse=pred.holdout_increment_rmse,
                      in_sample_rmse=pred.in_sample_rmse, peak_slot=pred.peak_slot)
        target = _target(args, stem, ".predict.json")
        write_json(target, report)
        pred.trajectory.to_csv(target.with_suffix(".csv"))

    return _batch(args, work)


def cmd_compare(args) -> int:
    def work(series, stem):
        write_json(_target(args, stem, ".compare.json"),
                   est.compare_models(series, args.fraction))

    return _batch(args, work)


def cmd_hist(args) -> int:
    fits = []
    for f in _report_files(args.reports):
        fits.append(float(read_report(f)["popularity"]))
    edges, counts = est.popularity_histogram(fits, args.bin_width)
    est.write_histogram(args.out, edges, counts)
    print(f"{len(fits)} fits in {len(counts)} bins -> {args.out}")
    return 0


def _report_files(paths):
    files = []
    for p in map(Path, paths):
        if not p.exists():
            raise ConfigError(f"{p} does not exist")
        files += sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not files:
        raise ConfigError("no fit reports found")
    return files


def read_report(path) -> dict:
    rep = read_json(path)
    if "popularity" not in rep:
        raise ConfigError(f"{path} is not a fit report (no 'popularity' field)")
    return rep


def _add_model_args(p):
    p.add_argument("--net", choices=["complete", "regular", "er", "ba", "edges"],
                   default="complete")
    p.add_argument("--n", type=int, default=1000, help="node count (default 1000)")
    p.add_argument("--k", type=int, help="degree of a regular network")
    p.add_argument("--m", type=int, help="edges per new node (BA)")
    p.add_argument("--kbar", type=float, help="target mean degree (ER)")
    p.add_argument("--edges", help="edge-list file for --net edges")
    p.add_argument("--rule", default="BD", choices=[r.value for r in UpdateRule])
    p.add_argument("--case", type=int, default=1, choices=[1, 2, 3, 4],
                   help="preset payoff matrix")
    p.add_argument("--payoff", help="explicit payoffs 'uff,ufn,unn' (overrides --case)")
    p.add_argument("--alpha", type=float, default=0.025, help="selection intensity")
    p.add_argument("--decay", type=float, default=0.0,
                   help="decay rate of the selection intensity per slot")
    p.add_argument("--slots", type=int, default=2000)
    p.add_argument("--x0", type=float, help="initial forwarder fraction "
                   "(default: one forwarder)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egtdiff", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="ensemble-mean agent-based trajectory")
    _add_model_args(p)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--regen-every", type=int, default=DEFAULT_REGEN_EVERY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None,
                   help=f"worker processes (default ${JOBS_ENV} or 1)")
    p.add_argument("--plain", action="store_true",
                   help="average every run instead of conditioning on survival")
    p.add_argument("--payoff-mode", choices=["sum", "mean"], default="sum",
                   help="accumulate or average neighbour payoffs (default sum)")
    p.add_argument("--converge", action="store_true",
                   help="stop runs once x_f is flat over a 50-slot window")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("theory", help="closed-form trajectory")
    _add_model_args(p)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; unused")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory)

    for name, func, help_ in [("fit", cmd_fit, "fit the diffusion ODE"),
                              ("predict", cmd_predict, "fit a prefix and extrapolate"),
                              ("compare", cmd_compare, "diffusion ODE vs pulse model")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("series", nargs="+", help="t,count CSV files or directories")
        p.add_argument("--fraction", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; unused")
        p.add_argument("--out", required=True,
                       help="output file, or a directory when several series are given")
        if name == "fit":
            p.add_argument("--pin-x0", action="store_true",
                           help="fix x0 to the first data point")
        p.set_defaults(func=func)

    p = sub.add_parser("hist", help="popularity histogram of fit reports")
    p.add_argument("reports", nargs="+", help="fit report JSON files or directories")
    p.add_argument("--bin-width", type=float, default=est.HIST_BIN_WIDTH)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is None and hasattr(args, "jobs"):
        args.jobs = default_jobs()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
