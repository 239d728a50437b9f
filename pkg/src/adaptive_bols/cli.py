"""Command-line entry point: ``bols simulate|analyze|mc-grid|density``."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import io as bio
from .estimators import ALTERNATIVES, HC_KINDS, STATISTICS, compute
from .montecarlo import (
    MCGridSpec,
    rejection_csv_lines,
    replication_streams,
    run_grid,
    simulate_units,
)
from .outcomes import ArmDistribution
from .policies import EPS_GREEDY, FIXED, THOMPSON
from .stats import ks_distance


class CliError(Exception):
    pass


def _seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("BOLS_SEED")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"BOLS_SEED={env!r} is not an integer") from None


def _write_lines(lines, path: Optional[str]):
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_simulate(args) -> int:
    policy = bio.policy_from_options(args.policy, args.epsilon, args.prior_alpha, args.prior_beta,
                                     args.clip, args.pi)
    treated = ArmDistribution.parse(args.arm1)
    control = ArmDistribution.parse(args.arm2)
    if policy.kind == THOMPSON and not (treated.is_binary and control.is_binary):
        raise CliError("Thompson sampling needs Bernoulli arms (bern:P)")
    seed = _seed(args.seed)
    g_assign, g_out = replication_streams(seed, args.batch_size, args.batches, 0)
    units = simulate_units(policy, (control, treated), args.batch_size, args.batches, g_assign, g_out)
    if args.out is None or args.out == "-":
        sys.stdout.write(",".join(bio.UNITS_HEADER) + "\n")
        for b, a, y in units.rows():
            sys.stdout.write(f"{b},{a},{y!r}\n")
    else:
        bio.write_units_csv(units, args.out)
    return 0


def cmd_analyze(args) -> int:
    trace = bio.read_units_csv(args.input, args.variance, keep_raw=True)
    stats = STATISTICS if args.stat == "all" else (args.stat,)
    reports = [compute(s, trace, args.null, args.alpha, hc=args.hc, pooling=args.hom_pooling,
                       alternative=args.alternative, min_units=args.min_units) for s in stats]
    _write_lines(bio.report_csv_lines(reports), args.out)
    if not args.quiet:
        for r in reports:
            print(bio.report_summary(r), file=sys.stderr)
    return 0


def _load_spec(args, keep_samples: bool) -> MCGridSpec:
    # explicit flag, then BOLS_SEED, then the config file
    seed = _seed(args.seed) if args.seed is not None or os.environ.get("BOLS_SEED", "").strip() else None
    spec = bio.read_grid_config(args.config, args.reps, seed).spec
    return replace(spec, keep_samples=True) if keep_samples else spec


def _progress(quiet: bool):
    if quiet:
        return None

    def report(cell):
        msg = f"cell batch_size={cell.batch_size} batch_count={cell.batch_count}: "
        msg += cell.error if cell.error else ", ".join(
            f"{k} {bio.fmt_rate(r.rejection_rate)}" for k, r in cell.rows.items())
        print(msg, file=sys.stderr)

    return report


def cmd_mc_grid(args) -> int:
    spec = _load_spec(args, args.samples)
    result = run_grid(spec, workers=args.workers, progress=_progress(args.quiet))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(rejection_csv_lines(result), str(out / "rejection.csv"))
    if args.samples:
        lines = ["batch_size,batch_count,statistic,z"]
        for cell in result.cells:
            for stat, z in cell.samples.items():
                lines += [f"{cell.batch_size},{cell.batch_count},{stat},{bio.fmt_stat(v)}" for v in z]
        _write_lines(lines, str(out / "samples.csv"))
    failed = [c for c in result.cells if c.error]
    for c in failed:
        print(f"error in cell ({c.batch_size}, {c.batch_count}): {c.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_density(args) -> int:
    spec = _load_spec(args, True)
    result = run_grid(spec, workers=args.workers, progress=_progress(args.quiet))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    multi = len(result.cells) > 1
    for cell in result.cells:
        if cell.error:
            print(f"error in cell ({cell.batch_size}, {cell.batch_count}): {cell.error}", file=sys.stderr)
            return 1
        tag = f"_{cell.batch_size}x{cell.batch_count}" if multi else ""
        hists = {s: bio.histogram(z, args.bins, args.lo, args.hi) for s, z in cell.samples.items()}
        _write_lines(bio.histogram_csv_lines(hists), str(out / f"density{tag}.csv"))
        tails = [",".join(bio.TAIL_COLUMNS)]
        for s, h in hists.items():
            z = cell.samples[s]
            ks = bio.fmt_stat(ks_distance(z)) if len(z) else ""
            tails.append(f"{s},{h.n},{h.underflow},{h.overflow},{ks}")
        _write_lines(tails, str(out / f"density_tails{tag}.csv"))
        if args.svg:
            title = f"batch size {cell.batch_size}, {cell.batch_count} batches"
            (out / f"density{tag}.svg").write_text(bio.density_svg(hists, title=title))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bols", description="Batched OLS inference for adaptive experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one experiment and write per-unit CSV")
    s.add_argument("--policy", choices=(EPS_GREEDY, THOMPSON, FIXED), required=True)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--prior-alpha", type=float)
    s.add_argument("--prior-beta", type=float)
    s.add_argument("--clip", type=float, help="clip Thompson assignment probabilities to [clip, 1-clip]")
    s.add_argument("--pi", type=float, help="treated share for the fixed policy")
    s.add_argument("--arm1", required=True, help="treated arm, gauss:MEAN:SD or bern:P")
    s.add_argument("--arm2", required=True, help="control arm, gauss:MEAN:SD or bern:P")
    s.add_argument("--batch-size", type=int, required=True)
    s.add_argument("--batches", type=int, required=True)
    s.add_argument("--seed", type=int, help="master seed (default: $BOLS_SEED or 0)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="test statistics for a per-unit CSV")
    a.add_argument("input")
    a.add_argument("--stat", choices=STATISTICS + ("all",), default="all")
    a.add_argument("--variance", choices=("sample", "hc2", "hc3", "pooled"), default="sample")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--null", type=float, default=0.0)
    a.add_argument("--alternative", choices=ALTERNATIVES, default="two-sided")
    a.add_argument("--hc", choices=HC_KINDS, default="HC0")
    a.add_argument("--hom-pooling", choices=("global", "batch"), default="global")
    a.add_argument("--min-units", type=int)
    a.add_argument("--out")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("mc-grid", cmd_mc_grid, "Monte Carlo rejection-rate sweep"),
                                 ("density", cmd_density, "Monte Carlo statistic densities")):
        g = sub.add_parser(name, help=helptext)
        g.add_argument("--config", required=True)
        g.add_argument("--reps", type=int)
        g.add_argument("--seed", type=int)
        g.add_argument("--out-dir", default=".")
        g.add_argument("--workers", type=int, default=1)
        g.add_argument("--quiet", action="store_true")
        if name == "mc-grid":
            g.add_argument("--samples", action="store_true", help="also write per-replication Z values")
        else:
            g.add_argument("--bins", type=int, default=200)
            g.add_argument("--lo", type=float, default=-6.0)
            g.add_argument("--hi", type=float, default=6.0)
            g.add_argument("--svg", action="store_true")
        g.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", 1) < 1:
        print("bols: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"bols {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
