"""Command-line front end.

Commands write CSV (or JSON with ``--format json``) into ``--out`` together
with a ``<command>.manifest.json`` that records the inputs needed to rerun.

Exit codes: 0 ok, 1 input error, 2 unstable allocation, 3 brute-force guard.

Column orders
  dimension : lambda, total_cores, <cores per entity>, predicted_T, feasible,
              evaluations, wall_time [, bf_total_cores, bf_predicted_T,
              bf_checks, n_checks, bf_wall_time]
  simulate  : mean_response, ci95, ci_low, ci_high, served, rejected, offered,
              analytic_T
  nodes     : node, utilization, mean_wait, mean_sojourn, mean_number, arrival_rate
  drp       : see nsos.drp.TIMELINE_COLUMNS, then cores_<entity>
  complexity: sweep, value, wall_time, total_cores, iterations, evaluations
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import complexity
from .des import SimConfig, profile_from_dict, simulate_scenario, write_trace_csv
from .dimensioning import (SELECTIONS, bruteforce_check_count, dimension_bruteforce,
                           dimension_heuristic)
from .drp import (DrpConfig, LinearTrendPredictor, NoisyOraclePredictor,
                  PersistencePredictor, run_drp_loop)
from .errors import NsosError, TooLarge, Unstable
from .model import NsosModel, NsosScenario

log = logging.getLogger("nsos")

EXIT_OK, EXIT_INPUT, EXIT_UNSTABLE, EXIT_GUARD = 0, 1, 2, 3


class InputError(Exception):
    pass


def _tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def bundled(name: str) -> Path:
    return Path(str(resources.files("nsos") / "data" / name))


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}")


def load_scenario(path) -> NsosScenario:
    data = _load_json(path, "scenario")
    if not isinstance(data, dict):
        raise InputError(f"scenario {path}: top level must be an object")
    try:
        return NsosScenario.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"scenario {path}: {exc}")


def load_allocation(path, model: NsosModel):
    data = _load_json(path, "allocation")
    cores = data.get("cores", data) if isinstance(data, dict) else None
    if not isinstance(cores, dict):
        raise InputError(f"allocation {path}: expected an object mapping entity labels to cores")
    for name, value in cores.items():
        if not isinstance(value, int) or value < 0:
            raise InputError(f"allocation {path}: field {name!r} must be a nonnegative integer")
    try:
        return model.allocation_from_dict(cores)
    except ValueError as exc:
        raise InputError(f"allocation {path}: {exc}")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_rows(path: Path, columns, rows, fmt: str) -> Path:
    path = path.with_suffix("." + fmt)
    if fmt == "json":
        payload = [{c: _jsonable(r.get(c)) for c in columns} for r in rows]
        path.write_text(json.dumps(payload, indent=2) + "\n")
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def _jsonable(x):
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_manifest(out: Path, args, outputs, config: dict):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "scenario": str(args.scenario) if getattr(args, "scenario", None) else None,
        "seed": getattr(args, "seed", None),
        "tool_version": _tool_version(),
        "config": config,
        "outputs": [str(p) for p in outputs],
    }
    path = out / f"{args.command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n")
    return path


def _scenario_arg(args) -> NsosScenario:
    return load_scenario(args.scenario or bundled("scenario_base.json"))


def _allocation_or_dimensioned(args, model):
    if args.allocation:
        return load_allocation(args.allocation, model)
    return dimension_heuristic(model).allocation


# -- commands -------------------------------------------------------------------

def cmd_analyze(args) -> int:
    scenario = _scenario_arg(args)
    model = NsosModel(scenario, multi_server_beta=not args.no_multi_beta)
    alloc = _allocation_or_dimensioned(args, model)
    try:
        ev = model.evaluate(alloc.cores)
    except Unstable as exc:
        print(f"unstable allocation: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    per = np.array([ev.per_entity[n] for n in model.names])
    report = {
        "T": ev.T,
        "slo": scenario.slo,
        "meets_slo": ev.T <= scenario.slo,
        "allocation": alloc.as_dict(),
        "per_entity_T": ev.per_entity,
        "fork_join_T": {str(d + 1): float(t) for d, t in enumerate(model.fork_join_times(per))},
        "nodes": [
            {"node": lab, "rate": float(r), "utilization": float(u), "arrival_scv": float(c),
             "waiting": float(w)}
            for lab, r, u, c, w in zip(ev.network.labels, ev.flow.rate, ev.flow.utilization,
                                       ev.flow.arrival_scv, ev.flow.waiting)
        ],
        "warnings": ev.flow.warnings,
    }
    out = Path(args.out)
    if args.format == "json":
        path = out / "analyze.json"
        path.write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")
    else:
        path = write_rows(out / "analyze", ["node", "rate", "utilization", "arrival_scv", "waiting"],
                          report["nodes"], "csv")
        summary = out / "analyze_summary.json"
        summary.write_text(json.dumps({k: v for k, v in report.items() if k != "nodes"},
                                      indent=2, default=_jsonable) + "\n")
        path = [path, summary]
    outputs = path if isinstance(path, list) else [path]
    write_manifest(out, args, outputs, {"scenario": scenario.to_dict(),
                                        "allocation": alloc.as_dict()})
    print(json.dumps({"T": ev.T, "meets_slo": ev.T <= scenario.slo}))
    return EXIT_OK


def _parse_rates(text):
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--sweep expects comma-separated numbers, got {text!r}")
    if not rates or any(r < 0 for r in rates):
        raise InputError("--sweep needs at least one nonnegative rate")
    return rates


def cmd_dimension(args) -> int:
    scenario = _scenario_arg(args)
    rates = _parse_rates(args.sweep) if args.sweep else [scenario.ext_rate]
    names = NsosModel(scenario).names
    columns = ["lambda", "total_cores"] + [f"cores_{n}" for n in names] + [
        "predicted_T", "feasible", "evaluations", "wall_time"]
    if args.brute_force:
        columns += ["bf_total_cores", "bf_predicted_T", "bf_checks", "n_checks", "bf_wall_time"]
    rows = []
    for lam in rates:
        model = NsosModel(scenario.with_arrivals(lam))
        t0 = time.perf_counter()
        res = dimension_heuristic(model, selection=args.selection)
        row = {"lambda": lam, "total_cores": res.total_cores, "predicted_T": res.predicted_T,
               "feasible": res.feasible, "evaluations": res.model_evaluations,
               "wall_time": time.perf_counter() - t0}
        row.update({f"cores_{n}": c for n, c in zip(names, res.allocation.cores)})
        if args.brute_force:
            t0 = time.perf_counter()
            try:
                bf = dimension_bruteforce(model, max_checks=args.max_checks)
            except TooLarge as exc:
                print(f"brute force refused at lambda={lam}: estimated "
                      f"{exc.estimated_checks} checks > {args.max_checks}", file=sys.stderr)
                return EXIT_GUARD
            row.update(bf_total_cores=bf.total_cores, bf_predicted_T=bf.predicted_T,
                       bf_checks=bf.model_evaluations,
                       n_checks=bruteforce_check_count(int(model.active.sum()),
                                                       bf.initial_cores, bf.total_cores),
                       bf_wall_time=time.perf_counter() - t0)
        rows.append(row)
    out = Path(args.out)
    path = write_rows(out / "dimension", columns, rows, args.format)
    write_manifest(out, args, [path], {"scenario": scenario.to_dict(), "rates": rates,
                                       "brute_force": args.brute_force,
                                       "selection": args.selection})
    for r in rows:
        print(f"lambda={r['lambda']:g} cores={r['total_cores']} T={r['predicted_T']:.6g}"
              + (f" oracle={r['bf_total_cores']}" if args.brute_force else ""))
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = _scenario_arg(args)
    model = NsosModel(scenario)
    alloc = _allocation_or_dimensioned(args, model)
    try:
        cfg = SimConfig(args.duration, args.warmup, args.seed, args.service_dist,
                        args.batches, trace=bool(args.trace))
    except NsosError as exc:
        raise InputError(str(exc))
    profile = profile_from_dict(_load_json(args.profile, "profile")) if args.profile else None
    stats = simulate_scenario(model, alloc, cfg, profile)
    try:
        analytic = model.response_time(alloc.cores)
    except NsosError:
        analytic = math.inf
    row = stats.to_row()
    row["analytic_T"] = analytic
    out = Path(args.out)
    cols = ["mean_response", "ci95", "ci_low", "ci_high", "served", "rejected", "offered",
            "analytic_T"]
    outputs = [write_rows(out / "simulate", cols, [row], args.format)]
    node_rows = [{"node": k, "utilization": stats.per_node_utilization[k],
                  "mean_wait": stats.per_node_mean_wait[k],
                  "mean_sojourn": stats.per_node_mean_sojourn[k],
                  "mean_number": stats.per_node_mean_number[k],
                  "arrival_rate": stats.per_node_arrival_rate[k]}
                 for k in stats.per_node_utilization]
    outputs.append(write_rows(out / "simulate_nodes", ["node", "utilization", "mean_wait",
                                                       "mean_sojourn", "mean_number",
                                                       "arrival_rate"], node_rows, args.format))
    if args.trace:
        write_trace_csv(stats.trace, out / "trace.csv")
        outputs.append(out / "trace.csv")
    write_manifest(out, args, outputs, {"scenario": scenario.to_dict(),
                                        "allocation": alloc.as_dict(),
                                        "sim": vars(cfg),
                                        "profile": profile.to_dict() if profile else None})
    print(f"mean_response={row['mean_response']:.6g} ci95={row['ci95']:.3g} "
          f"analytic_T={analytic:.6g} served={row['served']}")
    return EXIT_OK


def cmd_drp(args) -> int:
    scenario = _scenario_arg(args)
    profile = profile_from_dict(_load_json(args.profile or bundled("profile_desk.json"), "profile"))
    raw = _load_json(args.drp_config or bundled("drp_desk.json"), "drp config")
    if args.boot_delay is not None:
        raw["boot_delay"] = args.boot_delay
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = DrpConfig.from_dict(raw)
    except (TypeError, NsosError) as exc:
        raise InputError(f"drp config: {exc}")
    if args.predictor == "persistence":
        predictor = PersistencePredictor(args.margin)
    elif args.predictor == "linear":
        predictor = LinearTrendPredictor()
    else:
        predictor = NoisyOraclePredictor(profile, cfg.dt, args.oracle_sigma, cfg.seed,
                                         cfg.monitor_window)
    timeline = run_drp_loop(scenario, profile, predictor, cfg)
    out = Path(args.out)
    csv_path = out / "drp.csv"
    timeline.write_csv(csv_path)
    side = out / "drp.json"
    timeline.write_sidecar(side, {"scenario": scenario.to_dict(), "predictor": args.predictor,
                                  "total_rejection": timeline.total_rejection})
    write_manifest(out, args, [csv_path, side], {"scenario": scenario.to_dict(),
                                                 "drp": vars(cfg), "predictor": args.predictor,
                                                 "profile": profile.to_dict()})
    print(f"windows={len(timeline.records)} total_rejection={timeline.total_rejection:.4f} "
          f"max_window_rejection={timeline.column('rejection_fraction').max():.4f}")
    return EXIT_OK


def _floats(text, what):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"{what} expects comma-separated numbers")


def cmd_complexity(args) -> int:
    scenario = _scenario_arg(args)
    points = []
    if args.lambda_sweep:
        points += complexity.lambda_sweep(scenario, _floats(args.lambda_sweep, "--lambda-sweep"),
                                          args.runs)
    if args.tmax_sweep:
        points += complexity.tmax_sweep(scenario, _floats(args.tmax_sweep, "--tmax-sweep"),
                                        args.runs)
    if args.ndso_sweep:
        points += complexity.ndso_sweep(scenario, [int(x) for x in
                                                   _floats(args.ndso_sweep, "--ndso-sweep")],
                                        args.runs)
    if not points:
        raise InputError("give at least one of --lambda-sweep, --tmax-sweep, --ndso-sweep")
    fits = complexity.analyze_timings(points, NsosModel(scenario).zero_load_time())
    out = Path(args.out)
    cols = ["sweep", "value", "wall_time", "total_cores", "iterations", "evaluations"]
    path = write_rows(out / "complexity", cols, [vars(p) for p in points], args.format)
    fit_path = out / "complexity_fits.json"
    fit_path.write_text(json.dumps(fits, indent=2) + "\n")
    write_manifest(out, args, [path, fit_path], {"scenario": scenario.to_dict(),
                                                 "runs": args.runs})
    print(json.dumps(fits))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON (default: bundled operating point)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nsos", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="response time of an allocation")
    p.add_argument("--allocation", help="JSON mapping entity labels to cores")
    p.add_argument("--no-multi-beta", action="store_true",
                   help="plain Allen-Cunneen on multi-server nodes")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dimension", parents=[common], help="minimum cores for the SLO")
    p.add_argument("--sweep", help="comma-separated external rates")
    p.add_argument("--brute-force", action="store_true", help="add exhaustive-search columns")
    p.add_argument("--max-checks", type=int, default=10 ** 7)
    p.add_argument("--selection", choices=SELECTIONS, default=SELECTIONS[0])
    p.set_defaults(func=cmd_dimension)

    p = sub.add_parser("simulate", parents=[common], help="discrete-event simulation")
    p.add_argument("--allocation")
    p.add_argument("--profile", help="arrival profile JSON (default: constant scenario rate)")
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--warmup", type=float, default=2.0)
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--service-dist", default="gamma",
                   choices=("gamma", "exponential", "deterministic"))
    p.add_argument("--trace", action="store_true", help="write per-SOR trace.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("drp", parents=[common], help="closed-loop provisioning run")
    p.add_argument("--profile", help="profile JSON (default: bundled desk profile)")
    p.add_argument("--drp-config", help="loop configuration JSON")
    p.add_argument("--boot-delay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--predictor", choices=("persistence", "linear", "oracle"),
                   default="persistence")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--oracle-sigma", type=float, default=0.0)
    p.set_defaults(func=cmd_drp)

    p = sub.add_parser("complexity", parents=[common], help="heuristic wall-time sweeps")
    p.add_argument("--lambda-sweep")
    p.add_argument("--tmax-sweep")
    p.add_argument("--ndso-sweep")
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(func=cmd_complexity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Unstable as exc:
        print(f"unstable: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except NsosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
