"""Command-line front end: single runs, comparison sweeps, oracle checks.

Three subcommands:

* ``run``    one scenario file through one filter, writing the step log,
             metrics, trajectory, and the resolved scenario echo.
* ``sweep``  a directory of scenario files crossed with filter modes,
             producing per-run artifacts plus a comparison table.
* ``oracle`` grid value-iteration cross-checks of the trajectory optimizer
             on a turn-rate-car scenario.

Exit statuses for run and sweep: 0 success, 2 task failure (safe halt,
U-turn, or budget exhausted), 3 safety violation under a filter that
guarantees safety (test-failing), 4 solver numeric failure (partial log is
still written), 5 configuration rejection. ``sweep`` returns 0 when every
run ends in {0, 2} and the largest abnormal status otherwise. ``oracle``
returns 0 when all checks pass and 1 otherwise.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .dynamics import DUBINS
from .errors import ConfigError
from .filters import CBF_DDP, LR_DDP
from .grid_oracle import GridSpec, grid_dp, query
from .harness import (
    Metrics,
    Scenario,
    SimulationAborted,
    compute_metrics,
    load_scenario,
    run_simulation,
    scenario_to_mapping,
    write_outputs,
)
from .reach_avoid_ilq import solve

__all__ = ["main"]

EXIT_SUCCESS = 0
EXIT_TASK_FAILURE = 2
EXIT_SAFETY_VIOLATION = 3
EXIT_SOLVER_FAILURE = 4
EXIT_CONFIG_REJECTED = 5

# CLI spellings of the filter modes.
_FILTER_CHOICES = {
    "cbf-ddp": "cbf_ddp",
    "lr-ddp": "lr_ddp",
    "manual-cbf": "manual_cbf",
    "none": "none",
}
_SWEEP_MODES = (CBF_DDP, LR_DDP)

_TABLE_COLUMNS = (
    "scenario",
    "filter",
    "status",
    "task_success",
    "steps_taken",
    "accel_jerk_mean",
    "accel_jerk_std",
    "steer_jerk_mean",
    "steer_jerk_std",
    "total_deviation",
    "cycle_time_mean",
    "cycle_time_std",
)


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    """Fold command-line overrides into the loaded scenario."""
    filt = scenario.filter
    solver = scenario.solver
    filter_kwargs = {}
    if args.filter is not None:
        filter_kwargs["mode"] = _FILTER_CHOICES[args.filter]
    if args.gamma is not None:
        filter_kwargs["gamma"] = args.gamma
    if getattr(args, "lambda_scale", None) is not None:
        filter_kwargs["lambda_scale"] = args.lambda_scale
    if args.max_qcqp_iters is not None:
        filter_kwargs["max_qcqp_iterations"] = args.max_qcqp_iters
    if filter_kwargs:
        filt = dataclasses.replace(filt, **filter_kwargs)
    if args.horizon is not None:
        solver = dataclasses.replace(solver, horizon=args.horizon)
    if filt is scenario.filter and solver is scenario.solver:
        return scenario
    return dataclasses.replace(scenario, filter=filt, solver=solver)


def _execute(scenario: Scenario, out_dir: Path) -> tuple[int, Metrics | None]:
    """Run one scenario and write its artifacts; returns (status, metrics)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_path = out_dir / "scenario_resolved.json"
    echo_path.write_text(
        json.dumps(scenario_to_mapping(scenario), indent=2) + "\n"
    )
    try:
        records = run_simulation(scenario)
    except SimulationAborted as exc:
        write_outputs(exc.records, None, out_dir, model=scenario.model)
        print(f"{scenario.name}: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE, None
    metrics = compute_metrics(records, scenario) if records else None
    write_outputs(records, metrics, out_dir, model=scenario.model)
    violated = any(r.g_value < 0.0 for r in records)
    if violated and scenario.filter.mode in (CBF_DDP, LR_DDP):
        return EXIT_SAFETY_VIOLATION, metrics
    if metrics is None or not metrics.task_success:
        return EXIT_TASK_FAILURE, metrics
    return EXIT_SUCCESS, metrics


def _cmd_run(args) -> int:
    scenario = _apply_overrides(load_scenario(args.scenario), args)
    out_dir = Path(args.out) if args.out else Path("out") / scenario.name
    status, metrics = _execute(scenario, out_dir)
    if metrics is None:
        summary = "no completed steps"
    else:
        summary = (
            f"success={metrics.task_success} steps={metrics.steps_taken}"
            f" deviation={metrics.total_deviation:.4f}"
            f" cycle_time_mean={metrics.cycle_time_mean:.3f}s"
        )
    print(
        f"{scenario.name} [{scenario.filter.mode}]: {summary}"
        f" status={status} out={out_dir}"
    )
    return status


def _sweep_one(scenario_path: str, mode: str, args_dict: dict, out_root: str):
    """One sweep cell; module-level so process pools can dispatch it."""
    name = Path(scenario_path).stem
    try:
        args = argparse.Namespace(**args_dict)
        scenario = _apply_overrides(load_scenario(scenario_path), args)
        scenario = dataclasses.replace(
            scenario, filter=dataclasses.replace(scenario.filter, mode=mode)
        )
        name = scenario.name
        out_dir = Path(out_root) / f"{scenario.name}__{mode}"
        status, metrics = _execute(scenario, out_dir)
    except ConfigError as exc:
        print(f"{name} [{mode}]: {exc}", file=sys.stderr)
        return name, mode, EXIT_CONFIG_REJECTED, None
    return name, mode, status, metrics


def _table_row(name: str, mode: str, status: int, metrics) -> dict:
    row = {"scenario": name, "filter": mode, "status": status}
    for column in _TABLE_COLUMNS[3:]:
        row[column] = "" if metrics is None else getattr(metrics, column)
    return row


def _format_table(rows: list[dict]) -> str:
    cells = [
        [
            (
                f"{row[c]:.4f}"
                if isinstance(row[c], float)
                else str(row[c])
            )
            for c in _TABLE_COLUMNS
        ]
        for row in rows
    ]
    widths = [
        max(len(header), *(len(line[i]) for line in cells)) if cells else len(header)
        for i, header in enumerate(_TABLE_COLUMNS)
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(_TABLE_COLUMNS, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for line in cells:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))
    return "\n".join(lines)


def _cmd_sweep(args) -> int:
    root = Path(args.scenario)
    if not root.is_dir():
        raise ConfigError(f"sweep expects a scenario directory, got {root}")
    scenario_paths = sorted(str(p) for p in root.glob("*.json"))
    if not scenario_paths:
        raise ConfigError(f"no scenario files (*.json) under {root}")
    modes = (
        [_FILTER_CHOICES[args.filter]] if args.filter is not None else _SWEEP_MODES
    )
    out_root = args.out or "out"
    args_dict = vars(args).copy()
    args_dict.pop("handler", None)
    args_dict["filter"] = None  # the mode is applied per sweep cell
    cells = [
        (path, mode, args_dict, out_root)
        for path in scenario_paths
        for mode in modes
    ]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=args.jobs
        ) as pool:
            results = list(pool.map(_sweep_one, *zip(*cells)))
    else:
        results = [_sweep_one(*cell) for cell in cells]
    rows = [_table_row(*result) for result in results]
    table = _format_table(rows)
    print(table)
    out_dir = Path(out_root)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "comparison.csv"
    table_lines = [",".join(_TABLE_COLUMNS)]
    for row in rows:
        table_lines.append(
            ",".join(
                ("%.17g" % row[c]) if isinstance(row[c], float) else str(row[c])
                for c in _TABLE_COLUMNS
            )
        )
    table_path.write_text("\n".join(table_lines) + "\n")
    print(f"table written to {table_path}")
    abnormal = [r["status"] for r in rows if r["status"] not in (0, 2)]
    return max(abnormal) if abnormal else EXIT_SUCCESS


def _oracle_grid(scenario: Scenario, horizon: int, nodes: int, controls: int):
    """Grid specification covering the scenario's workspace."""
    env = scenario.env
    model = scenario.model
    points = [scenario.initial_state[:2]]
    if env.obstacles.shape[0]:
        points.extend(env.obstacles[:, :2])
    if env.goal is not None:
        points.append(env.goal[:2])
    points = np.asarray(points)
    pad = 1.0
    x_lo, y_lo = points.min(axis=0) - pad
    x_hi, y_hi = points.max(axis=0) + pad
    if env.road_half_width is not None:
        y_lo = max(y_lo, -env.road_half_width)
        y_hi = min(y_hi, env.road_half_width)
    spec = GridSpec(
        lower=np.array([x_lo, y_lo, -np.pi]),
        upper=np.array([x_hi, y_hi, np.pi]),
        nodes_per_dim=(nodes, nodes, nodes),
        periodic=(False, False, True),
        control_samples=np.linspace(
            model.control_lower, model.control_upper, controls
        ),
        horizon=horizon,
        mode=scenario.solver.mode,
    )
    return spec


def _cmd_oracle(args) -> int:
    scenario = load_scenario(args.scenario)
    if scenario.model.name != DUBINS:
        raise ConfigError("oracle checks run on dubins scenarios (3D state)")
    horizon = args.horizon if args.horizon is not None else 20
    spec = _oracle_grid(scenario, horizon, args.grid_nodes, args.control_samples)
    print(
        f"building {args.grid_nodes}^3 grid, {args.control_samples} controls,"
        f" horizon {horizon} ..."
    )
    table = grid_dp(spec, scenario.env, scenario.model)
    solver = dataclasses.replace(scenario.solver, horizon=horizon)
    nodes = spec.nodes()
    values = table.values[0].reshape(-1)
    rng = np.random.default_rng(0)
    eligible = np.flatnonzero(values > args.value_floor)
    if eligible.size == 0:
        print("no grid nodes above the value floor; nothing to check")
        return 1
    picks = rng.choice(eligible, size=min(args.samples, eligible.size), replace=False)
    worst = -np.inf
    failures = 0
    for index in picks:
        start = nodes[index]
        solution = solve(scenario.model, scenario.env, solver, start)
        grid_value = query(table, start, 0)
        gap = solution.rollout_objective - grid_value
        worst = max(worst, gap)
        if gap > args.tolerance:
            failures += 1
            print(
                f"  node {start.round(3)}: rollout {solution.rollout_objective:.4f}"
                f" exceeds grid {grid_value:.4f} + {args.tolerance}"
            )
    print(
        f"checked {picks.size} nodes: {failures} failures,"
        f" worst rollout-minus-grid gap {worst:.5f}"
        f" (tolerance {args.tolerance})"
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = {
            "scenario": scenario.name,
            "grid_nodes": args.grid_nodes,
            "control_samples": args.control_samples,
            "horizon": horizon,
            "samples": int(picks.size),
            "failures": failures,
            "worst_gap": worst,
            "tolerance": args.tolerance,
        }
        (out_dir / "oracle_report.json").write_text(
            json.dumps(report, indent=2) + "\n"
        )
    return 0 if failures == 0 else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbfddp",
        description="Reach-avoid safety filtering: runs, sweeps, oracle checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--scenario", required=True, help="scenario file (run/oracle) or directory (sweep)"
        )
        p.add_argument("--out", default=None, help="output directory")

    run_p = sub.add_parser("run", help="run one scenario")
    sweep_p = sub.add_parser("sweep", help="run a scenario directory across filters")
    oracle_p = sub.add_parser("oracle", help="grid-DP cross-check of the optimizer")

    for p in (run_p, sweep_p):
        add_shared(p)
        p.add_argument(
            "--filter",
            choices=sorted(_FILTER_CHOICES),
            default=None,
            help="override the scenario's filter mode",
        )
        p.add_argument("--gamma", type=float, default=None, help="barrier decay factor")
        p.add_argument(
            "--lambda",
            dest="lambda_scale",
            type=float,
            default=None,
            help="constraint over-scaling between repair attempts",
        )
        p.add_argument("--horizon", type=int, default=None, help="solver horizon override")
        p.add_argument(
            "--max-qcqp-iters",
            type=int,
            default=None,
            help="repair attempts per control cycle",
        )
    sweep_p.add_argument("--jobs", type=int, default=1, help="parallel scenario runs")

    add_shared(oracle_p)
    oracle_p.add_argument("--horizon", type=int, default=None, help="grid and solver horizon")
    oracle_p.add_argument("--samples", type=int, default=200, help="nodes to spot-check")
    oracle_p.add_argument("--grid-nodes", type=int, default=41, help="nodes per dimension")
    oracle_p.add_argument(
        "--control-samples", type=int, default=11, help="control grid resolution"
    )
    oracle_p.add_argument(
        "--value-floor",
        type=float,
        default=0.1,
        help="only check nodes whose grid value exceeds this",
    )
    oracle_p.add_argument(
        "--tolerance",
        type=float,
        default=0.05,
        help="allowed rollout-over-grid excess",
    )

    run_p.set_defaults(handler=_cmd_run)
    sweep_p.set_defaults(handler=_cmd_sweep)
    oracle_p.set_defaults(handler=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration rejected: {exc}", file=sys.stderr)
        return EXIT_CONFIG_REJECTED


if __name__ == "__main__":
    sys.exit(main())
