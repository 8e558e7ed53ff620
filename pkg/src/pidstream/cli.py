"""Command line entry point: ``pidstream {run,sweep,metrics,validate}``."""

from __future__ import annotations

import argparse
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import io, metrics, validate
from .engine import ExperimentPlan, SimConfig, run
from .rng import derive_seeds
from .scheduler import SolverFailure

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="root seed (default: config value)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: $PIDSTREAM_OUT or ./pidstream-out)")
    p.add_argument("--experiment", choices=("1", "1*", "2", "3"), help="experiment preset")
    p.add_argument("--baseline", action="store_true", help="rate-based clients with the baseline scheduler (1*)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pidstream", description="Adaptive streaming simulator with PID-controlled clients.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="one configuration, one seed")
    _common(p)
    p.add_argument("--users", type=int, metavar="N")
    p.add_argument("--dump-allocations", action="store_true", help="also write allocations.csv")

    p = sub.add_parser("sweep", help="user-count grid, several seeds per point")
    _common(p)
    p.add_argument("--users", type=int, nargs="+", metavar="N")
    p.add_argument("--reps", type=int, default=30, metavar="N")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    p.add_argument("--traces", action="store_true", help="keep per-run trace directories")

    p = sub.add_parser("metrics", help="recompute metrics from stored run directories")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("validate", help="property and oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR", help="write validate.json here")
    return ap


def resolve_config(args, users=None) -> SimConfig:
    cfg = cfgmod.load(args.config) if args.config else SimConfig()
    kind = args.experiment
    if args.baseline:
        if kind not in (None, "1", "1*"):
            raise cfgmod.ConfigError("--baseline only applies to experiment 1")
        kind = "1*"
    plan = cfg.plan
    try:
        if kind is not None and kind != plan.kind:
            if "3" in (kind, plan.kind):
                plan = ExperimentPlan.preset(kind)  # different arrival process and placement
            else:
                plan = replace(plan, kind=kind)
        if users is not None:
            plan = replace(plan, users=users)
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from exc
    cfg = replace(cfg, plan=plan)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _run_dir(base: Path, cfg: SimConfig) -> Path:
    kind = cfg.plan.kind.replace("*", "star")
    return base / f"exp{kind}_u{cfg.plan.users}_s{cfg.seed}"


def execute(cfg: SimConfig, out_dir: Path | None, dump_allocations: bool = False):
    """Run one configuration; optionally write it.  Returns the report."""
    trace = run(cfg, dump_allocations=dump_allocations)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.EmptyAfterTrim)
        report = metrics.compute_metrics(trace, metrics.TrimPolicy.from_plan(cfg.plan))
    if out_dir is not None:
        io.write_run(out_dir, trace, cfgmod.to_dict(cfg), cfgmod.config_hash(cfg), report)
    return report, [m for _, m in trace.violations]


def _sweep_job(job):
    cfg, out_dir = job
    return execute(cfg, out_dir)


def cmd_run(args) -> int:
    cfg = resolve_config(args, args.users)
    out = _run_dir(io.default_out(args.out), cfg)
    report, violations = execute(cfg, out, args.dump_allocations)
    if args.dump_allocations:
        violations += io.audit_dump(out / "allocations.csv", cascade=not cfg.plan.baseline)
    print(f"wrote {out}")
    for k, v in report.scalars().items():
        print(f"  {k:>14s} {v:.6g}")
    if violations:
        print(f"{len(violations)} constraint violation(s); first: {violations[0]}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    base_cfg = resolve_config(args)
    out = io.default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = args.users or [base_cfg.plan.users]
    seeds = derive_seeds(base_cfg.seed, args.reps)
    rows, summary, bad = [], {}, 0
    for n in grid:
        cfg_n = replace(base_cfg, plan=replace(base_cfg.plan, users=n))
        jobs = [(cfg_n.with_seed(s), _run_dir(out / "runs", cfg_n.with_seed(s)) if args.traces else None)
                for s in seeds]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_sweep_job, jobs))
        else:
            results = [_sweep_job(j) for j in jobs]
        reports = [r for r, _ in results]
        bad += sum(len(v) for _, v in results)
        agg = metrics.aggregate(reports)
        rows.append((cfg_n.plan.kind, n, agg))
        summary[str(n)] = {"config_hash": cfgmod.config_hash(cfg_n), "seeds": seeds, "aggregate": agg}
        print(f"users={n}: {agg['runs']} runs, mean rebuffering {agg['rebuffer_mean']['mean']:.4g} s")
    io.write_aggregates(out / "aggregates.csv", rows)
    io.write_json(out / "summary.json", summary)
    print(f"wrote {out / 'summary.json'}")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_metrics(args) -> int:
    reports, kinds = [], set()
    for d in args.runs:
        trace = io.read_trace(d)
        kinds.add(trace.plan.kind)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", metrics.EmptyAfterTrim)
            rep = metrics.compute_metrics(trace, metrics.TrimPolicy.from_plan(trace.plan))
        reports.append(rep)
        print(d, " ".join(f"{k}={v:.6g}" for k, v in rep.scalars().items()))
    agg = metrics.aggregate(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_aggregates(out / "aggregates.csv", [("+".join(sorted(kinds)), "", agg)])
    return EXIT_OK


def cmd_validate(args) -> int:
    results = validate.run_all(args.seed)
    for r in results:
        print(r.line())
    ok = all(r.ok for r in results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "validate.json", [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results])
    print("all checks passed" if ok else "validation FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "metrics": cmd_metrics, "validate": cmd_validate}[args.cmd]
    try:
        return handler(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
