"""Command line entry point: ``fbmcsim run|compare|domain-slice|validate-data``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__, fixture_path
from .dispatch import ConfigurationError, DispatchInfeasible
from .grid import DataError, StructuralError, build_lodf, build_ptdf, load_grid_data, select_cnecs
from .pipeline import (StageError, compare_scenarios, emit_reports, load_config, load_summary, run_scenario,
                       write_domain_slice, write_manifest)

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
log = logging.getLogger("fbmcsim")


def _scenario_args(p):
    p.add_argument("--config", type=Path, help="scenario INI file")
    p.add_argument("--dataset", help="dataset directory (default: bundled 3-zone fixture)")
    p.add_argument("--mode", help="fbmc, fbmc_plus, fbmc_cc, ntc, nodal or uniform")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="Monte-Carlo deviation samples (0 disables)")
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set fbmc.minram=0.7 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbmcsim", description="Flow-based market coupling simulation")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its reports")
    _scenario_args(run)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--no-figures", action="store_true")
    run.add_argument("--slice", nargs="?", const="", default=None, metavar="TIMESTEP",
                     help="also write a domain slice (first timestep if none given)")
    run.add_argument("--slice-axes", default=None, metavar="A:B,C:D")

    cmp_ = sub.add_parser("compare", help="compare finished runs (directories holding summary.json)")
    cmp_.add_argument("runs", nargs="+", type=Path)
    cmp_.add_argument("--out", type=Path, required=True)
    cmp_.add_argument("--no-figures", action="store_true")

    ds = sub.add_parser("domain-slice", help="write a 2-D slice of the flow-based domain")
    _scenario_args(ds)
    ds.add_argument("--out", type=Path, required=True)
    ds.add_argument("--timestep", default=None)
    ds.add_argument("--axes", default=None, metavar="A:B,C:D", help="default: first three zones chained")
    ds.add_argument("--no-figures", action="store_true")

    val = sub.add_parser("validate-data", help="check a dataset directory against the CSV contract")
    val.add_argument("dataset", nargs="?", default=None)
    return ap


def _config(args, **extra):
    kw = dict(dataset=args.dataset, mode=args.mode, seed=args.seed, samples=args.samples, threads=args.threads)
    kw.update(extra)
    return load_config(args.config, args.set, **kw)


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_scenario(cfg)
    req = None
    if args.slice is not None or args.slice_axes:
        req = {"timestep": args.slice or None, "axes": args.slice_axes}
    emit_reports(report, args.out, figures=not args.no_figures and cfg.figures, slice_request=req)
    _print_summary(report)
    print(f"reports written to {args.out}")
    return EXIT_OK


def _print_summary(report):
    print(f"scenario {report.name} ({report.mode}): stages {', '.join(report.stages)}")
    for stage, c in report.costs.items():
        print(f"  {stage:9s} generation {c['generation']:14.2f}  curtailment {c['curtailment']:12.2f}"
              f"  redispatch {c['redispatch']:12.2f}  total {c['total']:14.2f}")
    v = report.volumes
    print(f"  volumes   C {v['C']:.2f} MWh  R {v['R']:.2f} MWh  C+R {v['C+R']:.2f} MWh")
    if report.realtime:
        rt = report.realtime
        print(f"  real time ({rt['samples']} samples, alpha from {rt['alpha_source']}): "
              f"C+R at omega=0 {rt['omega_zero']['C+R']:.2f}, sampled mean {rt['omega_sampled']['C+R']:.2f}")


def cmd_compare(args) -> int:
    summaries = [load_summary(p) for p in args.runs]
    rows = compare_scenarios(summaries, args.out, figures=not args.no_figures)
    names = list(dict.fromkeys(r["scenario"] for r in rows))
    print("stage      component    " + "".join(f"{n:>16s}" for n in names))
    for stage in ("basecase", "D-1", "D-0"):
        for comp in ("generation", "curtailment", "redispatch", "total"):
            vals = {r["scenario"]: r["value"] for r in rows if r["stage"] == stage and r["component"] == comp}
            if vals:
                print(f"{stage:10s} {comp:12s} " + "".join(
                    f"{vals[n]:16.2f}" if n in vals else " " * 16 for n in names))
    return EXIT_OK


def cmd_domain_slice(args) -> int:
    cfg = _config(args, samples=0)
    if cfg.mode not in ("fbmc", "fbmc_plus", "fbmc_cc"):
        raise ConfigurationError("domain slices need a flow-based mode")
    report = run_scenario(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    paths = write_domain_slice(report, args.out, args.timestep, args.axes, figures=not args.no_figures)
    write_manifest(args.out, paths)
    print(f"domain slice written to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    directory = Path(args.dataset) if args.dataset else Path(str(fixture_path()))
    case, fleet, series = load_grid_data(directory)
    ptdf = build_ptdf(case)
    lodf = build_lodf(case, ptdf)
    cnecs = select_cnecs(case, ptdf, lodf)
    report = {
        "dataset": str(directory),
        "nodes": case.n_nodes, "lines": case.n_lines, "zones": list(case.zones),
        "generators": fleet.n, "intermittent": int(fleet.intermittent.sum()),
        "timesteps": series.n_steps, "cross_border_lines": int(case.cross_border.sum()),
        "radial_lines": int((~lodf.valid).sum()), "default_cnecs": len(cnecs),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "domain-slice": cmd_domain_slice,
            "validate-data": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    warnings.formatwarning = lambda msg, cat, *_args, **_kw: f"{cat.__name__}: {msg}"
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(exc.cause, DispatchInfeasible) else EXIT_ERROR
    except DispatchInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigurationError, StructuralError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
