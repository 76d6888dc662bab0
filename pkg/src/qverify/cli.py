"""Command-line front end: scenario runs, parameter sweeps, grid export.

Commands:
    qverify run <config>                 execute the scenario pipeline
    qverify sweep <config> --param ... --values ...
    qverify export-correlators <config>  write the sampled correlator grid

Exit codes: 0 success, 2 configuration/schema error, 3 numerical failure.
Outputs land in out/<scenario>/ as report.json, timeseries.csv,
correlators.csv (export command) and validation.csv (oracle runs), all
with deterministic formatting.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import os
import sys

import numpy as np

from .baths import BathFitError
from .dynamics import EvolutionError
from .estimator import (
    build_correlator_grid,
    load_correlator_grid,
    save_correlator_grid,
)
from .oracle import append_validation_records, build_perturbed_grid, validate_estimate
from .protocol import run_protocol, run_protocol_bounded
from .scenario import Scenario, SchemaError, load_scenario, parse_scenario

__all__ = ["main", "cmd_run", "cmd_sweep", "cmd_export_correlators"]

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERICAL = 3

PARAM_ALIASES = {
    "lambda": "bath.terms.0.amplitude",
    "gamma": "bath.terms.0.decay",
    "g": "coupling.scale",
    "t": "grid.t",
    "eta": "protocol.eta",
}


def _scenario_grids(scenario: Scenario, correlators_from=None):
    """One correlator grid per observable (full mode only)."""
    grids = []
    for label, a_op in scenario.observables:
        if correlators_from is not None:
            grid = load_correlator_grid(correlators_from, source_tag=scenario.source_tag)
            if grid.grid.n_steps != scenario.grid.n_steps:
                raise ValueError(
                    "imported correlator grid resolution does not match the scenario"
                )
        elif scenario.source_tag == "perturbed-measured" and scenario.oracle_model is not None:
            grid = build_perturbed_grid(
                scenario.oracle_model, scenario.coupling_op, a_op, scenario.grid
            )
        else:
            grid = build_correlator_grid(
                scenario.model, scenario.rho0, scenario.coupling_op, a_op,
                scenario.grid, source_tag=scenario.source_tag,
            )
        grids.append((label, a_op, grid))
    return grids


def run_scenario(scenario: Scenario, out_dir, correlators_from=None):
    """Execute the pipeline; returns (reports, records) and writes outputs."""
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    series_columns = []
    if scenario.mode == "bounded":
        for label, a_op in scenario.observables:
            rep = run_protocol_bounded(
                scenario.model, scenario.rho0, a_op, scenario.coupling_op,
                scenario.bath, scenario.grid, scenario.eta,
                source_tag=scenario.source_tag, observable_name=label,
            )
            reports.append(rep)
        grids = []
    else:
        grids = _scenario_grids(scenario, correlators_from)
        for label, a_op, grid in grids:
            rep = run_protocol(
                scenario.model, scenario.rho0, a_op, scenario.coupling_op,
                scenario.bath, scenario.grid, scenario.eta,
                source_tag=scenario.source_tag, correlators=grid,
                observable_name=label,
            )
            reports.append(rep)
            series_columns.append((label, grid.a_series))
    if any(r.verdict == "unreliable" for r in reports):
        from dataclasses import replace

        reports = [
            r if r.verdict == "unreliable" else replace(r, by_accident=True)
            for r in reports
        ]

    records = []
    if scenario.oracle_model is not None:
        for g in scenario.oracle_scales:
            model_g = scenario.oracle_model.rescaled(g)
            for rep, (label, a_op) in zip(reports, scenario.observables):
                records.append(
                    validate_estimate(
                        model_g, rep, a_op, scenario.grid,
                        scenario_id=f"{scenario.name}:g={g:g}:{label}",
                    )
                )

    _write_report_json(os.path.join(out_dir, "report.json"), scenario, reports)
    _write_timeseries(os.path.join(out_dir, "timeseries.csv"), scenario, series_columns)
    if records:
        path = os.path.join(out_dir, "validation.csv")
        if os.path.exists(path):
            os.remove(path)
        append_validation_records(path, records)
    return reports, records


def _write_report_json(path, scenario: Scenario, reports):
    payload = {
        "scenario": scenario.name,
        "schema_version": scenario.raw.get("schema_version"),
        "eta": scenario.eta,
        "mode": scenario.mode,
        "observables": [rep.to_json_dict() for rep in reports],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_timeseries(path, scenario: Scenario, series_columns):
    times = scenario.grid.times()
    header = ["t"]
    columns = [times]
    for label, series in series_columns:
        header.extend([f"{label}_re", f"{label}_im"])
        columns.extend([np.real(series), np.imag(series)])
    lines = [",".join(header)]
    for row in zip(*columns):
        lines.append(",".join(f"{v:.15e}" for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_run(config_path, out_root="out", resolution=None, correlators_from=None) -> int:
    try:
        scenario = load_scenario(config_path)
        if resolution is not None:
            scenario = scenario.with_resolution(resolution)
    except SchemaError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as err:
        print(f"cannot read configuration: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        out_dir = os.path.join(out_root, scenario.name)
        reports, _ = run_scenario(scenario, out_dir, correlators_from=correlators_from)
    except (EvolutionError, BathFitError, np.linalg.LinAlgError, ValueError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    for rep in reports:
        ratio = rep.bound_ratio if scenario.mode == "bounded" else rep.ratio
        print(
            f"{scenario.name}: {rep.observable} -> {rep.verdict} "
            f"(ratio={ratio:.6g}, eta={rep.threshold_eta:g})"
        )
    return EXIT_OK


def _set_by_path(config: dict, dotted: str, value):
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if isinstance(node, list):
            node = node[int(key)]
        elif isinstance(node, dict):
            if key not in node:
                raise SchemaError(dotted, f"path component {key!r} not present")
            node = node[key]
        else:
            raise SchemaError(dotted, f"cannot descend into {type(node).__name__}")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict):
        if last not in node:
            raise SchemaError(dotted, f"path component {last!r} not present")
        node[last] = value
    else:
        raise SchemaError(dotted, f"cannot assign into {type(node).__name__}")


def _sweep_one(base_config, dotted, value, out_root, resolution):
    config = copy.deepcopy(base_config)
    _set_by_path(config, dotted, value)
    scenario = parse_scenario(config, origin="config")
    if resolution is not None:
        scenario = scenario.with_resolution(resolution)
    tag = f"{value:.6g}".replace("-", "m").replace(".", "p")
    out_dir = os.path.join(out_root, scenario.name, f"sweep_{tag}")
    reports, records = run_scenario(scenario, out_dir)
    rep = reports[0]
    delta = residual = ""
    if records:
        delta = f"{records[0].delta:.15e}"
        residual = f"{records[0].residual:.15e}"
    ratio = rep.bound_ratio if scenario.mode == "bounded" else rep.ratio
    return (
        f"{value:.15e},{ratio:.15e},{rep.bound_ratio:.15e},{rep.verdict},{delta},{residual}"
    )


def cmd_sweep(
    config_path, param, values, out_root="out", jobs=1, resolution=None
) -> int:
    dotted = PARAM_ALIASES.get(param, param)
    try:
        base = load_scenario(config_path)
    except SchemaError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as err:
        print(f"cannot read configuration: {err}", file=sys.stderr)
        return EXIT_SCHEMA

    try:
        rows = [None] * len(values)
        if jobs > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {
                    pool.submit(
                        _sweep_one, base.raw, dotted, v, out_root, resolution
                    ): k
                    for k, v in enumerate(values)
                }
                for fut in concurrent.futures.as_completed(futures):
                    rows[futures[fut]] = fut.result()
        else:
            for k, v in enumerate(values):
                rows[k] = _sweep_one(base.raw, dotted, v, out_root, resolution)
    except SchemaError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except (EvolutionError, BathFitError, np.linalg.LinAlgError, ValueError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL

    out_dir = os.path.join(out_root, base.name)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"sweep_{param.replace('.', '_')}.csv")
    with open(path, "w", newline="") as fh:
        fh.write("value,ratio,bound_ratio,verdict,delta,residual\n")
        fh.write("\n".join(rows) + "\n")
    print(f"sweep written to {path}")
    return EXIT_OK


def cmd_export_correlators(
    config_path, out_root="out", resolution=None
) -> int:
    try:
        scenario = load_scenario(config_path)
        if resolution is not None:
            scenario = scenario.with_resolution(resolution)
    except SchemaError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as err:
        print(f"cannot read configuration: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        grids = _scenario_grids(scenario)
        out_dir = os.path.join(out_root, scenario.name)
        os.makedirs(out_dir, exist_ok=True)
        for k, (label, _, grid) in enumerate(grids):
            name = "correlators.csv" if k == 0 else f"correlators_{label}.csv"
            save_correlator_grid(os.path.join(out_dir, name), grid)
            print(f"{scenario.name}: wrote {os.path.join(out_dir, name)}")
    except (EvolutionError, BathFitError, np.linalg.LinAlgError, ValueError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output root directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs in sweeps")
    common.add_argument(
        "--resolution", type=int, default=None, help="override grid n_steps"
    )

    parser = argparse.ArgumentParser(
        prog="qverify",
        description="Self-consistent reliability estimation for analog quantum simulators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="run one scenario")
    p_run.add_argument("config")
    p_run.add_argument(
        "--correlators-from", default=None,
        help="CSV grid to use instead of simulating (run-from-data mode)",
    )

    p_sweep = sub.add_parser(
        "sweep", parents=[common], help="run a scenario across parameter values"
    )
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True,
                         help=f"field path or alias ({', '.join(PARAM_ALIASES)})")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated numeric values")

    p_export = sub.add_parser(
        "export-correlators", parents=[common], help="write the sampled grid CSV"
    )
    p_export.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(
            args.config, out_root=args.out, resolution=args.resolution,
            correlators_from=args.correlators_from,
        )
    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v != ""]
        except ValueError:
            print("values must be a comma-separated list of numbers", file=sys.stderr)
            return EXIT_SCHEMA
        if not values:
            print("values must not be empty", file=sys.stderr)
            return EXIT_SCHEMA
        return cmd_sweep(
            args.config, args.param, values, out_root=args.out,
            jobs=args.jobs, resolution=args.resolution,
        )
    if args.command == "export-correlators":
        return cmd_export_correlators(
            args.config, out_root=args.out, resolution=args.resolution
        )
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
