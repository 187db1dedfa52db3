"""Command-line entry point.

Subcommands: ``gen-scenario``, ``schedule``, ``rebalance``, ``simulate``,
``verify``. Structured inputs and outputs are JSON, time series are CSV,
and the report path renders matplotlib figures next to them. Every run
writes a ``manifest.json`` with input/output content digests so repeat
runs are auditable.

Exit codes: 0 ok, 2 malformed input, 3 non-binary solution,
4 infeasible target, 5 verification flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import resources

import numpy as np

from . import __version__
from . import figures, lp, mobility, rebalance, scheduling, stochastic
from .numerics import LtiSystem, TimeGrid

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NON_BINARY = 3
EXIT_INFEASIBLE = 4
EXIT_FLAGS = 5


class InputError(ValueError):
    pass


def four_node_instance_path() -> str:
    """Path of the packaged 4-node demo instance."""
    return str(resources.files("sparsectl.data") / "four_node.json")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, args_ns, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": {k: v for k, v in sorted(vars(args_ns).items()) if k != "func"},
        "tool_version": __version__,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _load_instance(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        a = np.asarray(doc["a"], dtype=float)
        b = np.asarray(doc["b"], dtype=float)
        if b.size == 0 or b.ndim != 2 or b.shape[1] == 0:
            raise InputError("instance has no control channels")
        system = LtiSystem(a=a, b=b, horizon=float(doc["horizon"]))
        return scheduling.ScheduleInstance(
            system=system,
            alpha=np.asarray(doc["alpha"], dtype=float),
            beta=int(doc["beta"]),
        )
    except InputError:
        raise
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed instance file {path}: {exc}") from exc


def _load_scenario(path):
    try:
        return mobility.load_scenario(path)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed scenario file {path}: {exc}") from exc


def cmd_gen_scenario(args) -> int:
    started = time.monotonic()
    cfg_kwargs = {}
    for name, attr in (
        ("total_vehicles", "total"),
        ("radius_km", "radius_km"),
        ("speed_kmh", "speed_kmh"),
        ("handling_h", "handling_h"),
        ("horizon_hours", "horizon_hours"),
        ("beta", "beta"),
        ("coeff_high", "coeff_high"),
    ):
        val = getattr(args, attr)
        if val is not None:
            cfg_kwargs[name] = val
    config = mobility.ScenarioConfig(**cfg_kwargs)
    scenario = mobility.generate_random_scenario(args.stations, args.seed, config)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    mobility.save_scenario(scenario, args.out)
    _write_manifest(out_dir, "gen-scenario", args, [], [args.out], started)
    print(f"wrote scenario with s={args.stations} seed={args.seed} to {args.out}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    started = time.monotonic()
    instance = _load_instance(args.instance)
    grid = TimeGrid.from_horizon(instance.system.horizon, args.grid)
    scores = scheduling.controllability_scores(instance, grid)
    relaxed = scheduling.solve_relaxed_schedule(instance, grid, scores)
    snapped = scheduling.recover_binary_schedule(relaxed, scores)

    out = args.out
    os.makedirs(out, exist_ok=True)
    outputs = []
    csv_path = os.path.join(out, "schedule.csv")
    scheduling.schedule_to_csv(snapped, csv_path)
    outputs.append(csv_path)
    gantt_path = os.path.join(out, "gantt.json")
    _dump_json(scheduling.gantt_intervals(snapped), gantt_path)
    outputs.append(gantt_path)

    report = {
        "objective": relaxed.objective,
        "objective_snapped": snapped.objective,
        "discreteness_fraction": relaxed.discreteness_fraction,
        "channel_usage": list(relaxed.channel_usage),
        "grid_steps": grid.steps,
    }
    baseline = None
    if args.baseline is not None:
        baseline = scheduling.top_slice_schedule(
            instance.system, args.baseline, grid, scores
        )
        report["baseline_alpha_total"] = args.baseline
        report["baseline_objective"] = baseline.objective
    regularity = scheduling.check_regularity(scores)
    report["regularity_pass"] = regularity.passed
    report_path = os.path.join(out, "report.json")
    _dump_json(report, report_path)
    outputs.append(report_path)

    if not args.no_figures:
        fig_path = os.path.join(out, "schedule.png")
        figures.save_schedule_figure(scores, snapped, fig_path, baseline)
        outputs.append(fig_path)
    outputs.append(
        _write_manifest(out, "schedule", args, [args.instance], outputs, started)
    )
    print(
        f"objective {relaxed.objective:.4f}"
        + (f", baseline {baseline.objective:.4f}" if baseline is not None else "")
    )
    return EXIT_OK


def cmd_rebalance(args) -> int:
    started = time.monotonic()
    scenario = _load_scenario(args.scenario)
    model = mobility.build_mobility_model(scenario)
    grid = TimeGrid.from_horizon(scenario.horizon, args.grid)
    mode = rebalance.BoundsMode.SIGNED if args.signed else rebalance.BoundsMode.NON_NEGATIVE
    instance = rebalance.RebalanceInstance(
        model=model, x0=scenario.x0, xd=scenario.xd, beta=scenario.beta, mode=mode
    )
    solution = rebalance.solve_relaxed_rebalance(instance, grid)
    out = args.out
    os.makedirs(out, exist_ok=True)

    if solution.status is not lp.LpStatus.OPTIMAL:
        doc = rebalance.controls_to_json(solution)
        doc["unreachable_mass"] = solution.mass_gap
        _dump_json(doc, os.path.join(out, "controls.json"))
        print(
            f"target unreachable (status {solution.status.value}); "
            f"mass gap 1'xd - 1'x0 = {solution.mass_gap:.6g}",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE

    snapped = rebalance.extract_sparse_control(solution.control)
    outputs = []
    controls_path = os.path.join(out, "controls.json")
    doc = rebalance.controls_to_json(solution, pairs=model.index_map.pairs)
    doc["snapped_terminal_residual"] = float(
        np.max(
            np.abs(
                solution.reach.terminal_state(instance.x0, snapped.values)
                - instance.xd
            )
        )
    )
    _dump_json(doc, controls_path)
    outputs.append(controls_path)

    states_path = os.path.join(out, "states.csv")
    rebalance.states_to_csv(solution.states, grid, states_path)
    outputs.append(states_path)

    report = {
        "objective_l1": solution.objective,
        "terminal_residual": solution.terminal_residual,
        "interior_mass_fraction": solution.interior_fraction,
        "costs": {
            "L0": solution.control.census.l0_total,
            "L1": solution.control.census.l1_total,
            "l0_max": solution.control.census.l0_step_max,
        },
    }
    assumption = rebalance.check_assumption(model, grid, seed=args.seed)
    report["assumption_pass"] = assumption.passed
    report["assumption_flags"] = len(assumption.flags)

    baseline_traj = None
    if args.baseline:
        baseline_traj, base_report = rebalance.min_energy_baseline(
            instance, grid, solution.reach
        )
        report["baseline"] = {
            "L0": baseline_traj.census.l0_total,
            "L1": baseline_traj.census.l1_total,
            **base_report,
        }
        report["l0_ratio_vs_baseline"] = (
            solution.control.census.l0_total / baseline_traj.census.l0_total
        )
    report_path = os.path.join(out, "report.json")
    _dump_json(report, report_path)
    outputs.append(report_path)

    if not args.no_figures:
        state_fig = os.path.join(out, "states.png")
        figures.save_rebalance_figure(
            grid.knots, solution.states, scenario.s,
            scenario.xd[0], state_fig,
        )
        outputs.append(state_fig)
        dur_fig = os.path.join(out, "durations.png")
        figures.save_duration_figure(
            solution.control.census, dur_fig,
            baseline_census=None if baseline_traj is None else baseline_traj.census,
            labels=[f"{i}<-{j}" for (i, j) in model.index_map.pairs],
        )
        outputs.append(dur_fig)
    outputs.append(
        _write_manifest(out, "rebalance", args, [args.scenario], outputs, started)
    )
    print(
        f"L1 {solution.objective:.4f}, L0 {solution.control.census.l0_total:.4f}, "
        f"residual {solution.terminal_residual:.2e}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.monotonic()
    scenario = _load_scenario(args.scenario)
    model = mobility.build_mobility_model(scenario)
    m = model.index_map.m
    config = stochastic.SimulationConfig(
        delta=args.delta,
        horizon=scenario.horizon,
        runs=args.runs,
        seed=args.seed,
        record_every=args.record_every,
    )
    u = None
    inputs = [args.scenario]
    if args.controls is not None:
        try:
            with open(args.controls) as fh:
                doc = json.load(fh)
            coarse = np.zeros((args.controls_grid, m))
            for k, pair, val in doc["controls"]:
                a = (
                    model.index_map.pair_index(*pair)
                    if isinstance(pair, list)
                    else int(pair)
                )
                coarse[int(k), a] = float(val)
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"malformed controls file: {exc}") from exc
        if config.steps % args.controls_grid != 0:
            raise InputError("simulation steps must be a multiple of the control grid")
        u = np.repeat(coarse, config.steps // args.controls_grid, axis=0)
        inputs.append(args.controls)

    summary = stochastic.run_monte_carlo(model, config, u=u)
    out = args.out
    os.makedirs(out, exist_ok=True)
    outputs = []
    csv_path = os.path.join(out, "summary.csv")
    stochastic.summary_to_csv(summary, csv_path, scenario.s, model.index_map.pairs)
    outputs.append(csv_path)
    verdict = summary.max_abs_z <= args.z_threshold
    report = {
        "max_abs_z": summary.max_abs_z,
        "max_deviation": summary.max_deviation,
        "z_threshold": args.z_threshold,
        "consistent": bool(verdict),
        "clamping_inactive": summary.clamping_inactive,
        "truncated_departures": summary.truncated,
        "clamped_demand_mass": summary.clamped_demand,
        "runs": summary.runs,
        "seed": summary.seed,
    }
    report_path = os.path.join(out, "report.json")
    _dump_json(report, report_path)
    outputs.append(report_path)
    if not args.no_figures:
        fig_path = os.path.join(out, "simulation.png")
        figures.save_simulation_figure(summary, scenario.s, fig_path)
        outputs.append(fig_path)
    outputs.append(
        _write_manifest(out, "simulate", args, inputs, outputs, started)
    )
    print(
        f"max |z| = {summary.max_abs_z:.2f} "
        f"({'consistent' if verdict else 'INCONSISTENT'})"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    with open(args.path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"not valid JSON: {exc}") from exc
    if "stations" in doc:
        scenario = _load_scenario(args.path)
        model = mobility.build_mobility_model(scenario)
        grid = TimeGrid.from_horizon(scenario.horizon, args.grid or 96)
        report = rebalance.check_assumption(
            model, grid, trials=args.trials, seed=args.seed
        )
        print(
            f"impulse-response regularity: {'pass' if report.passed else 'FLAGS'} "
            f"({len(report.flags)} flags over {report.trials} trials; "
            f"min level gap {report.min_level_gap:.2e}, "
            f"min pair gap {report.min_pair_gap:.2e})"
        )
        return EXIT_OK if report.passed else EXIT_FLAGS
    if "a" in doc:
        instance = _load_instance(args.path)
        grid = TimeGrid.from_horizon(instance.system.horizon, args.grid or 400)
        scores = scheduling.controllability_scores(instance, grid)
        report = scheduling.check_regularity(scores)
        print(
            f"score regularity: {'pass' if report.passed else 'FLAGS'} "
            f"(channels {list(report.channel_flags)}, "
            f"pairs {list(report.pair_flags)})"
        )
        return EXIT_OK if report.passed else EXIT_FLAGS
    raise InputError("file is neither a schedule instance nor a mobility scenario")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsectl",
        description="Sparse control-node scheduling and mobility rebalancing",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenario", help="draw a random mobility scenario")
    p.add_argument("--stations", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total", type=float, default=None)
    p.add_argument("--radius-km", type=float, default=None)
    p.add_argument("--speed-kmh", type=float, default=None)
    p.add_argument("--handling-h", type=float, default=None)
    p.add_argument("--horizon-hours", type=float, default=None)
    p.add_argument("--beta", type=int, default=None)
    p.add_argument("--coeff-high", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenario)

    p = sub.add_parser("schedule", help="solve a control-node scheduling instance")
    p.add_argument("instance")
    p.add_argument("--grid", type=int, default=400)
    p.add_argument("--baseline", type=float, default=None,
                   help="also run the aggregate-budget baseline with this total")
    p.add_argument("--out", default=_default_out())
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("rebalance", help="solve sparse rebalancing for a scenario")
    p.add_argument("scenario")
    p.add_argument("--grid", type=int, default=96)
    p.add_argument("--signed", action="store_true",
                   help="allow negative moves (|u| <= 1 box)")
    p.add_argument("--baseline", action="store_true",
                   help="also run the minimum-energy comparison")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the regularity diagnostic")
    p.add_argument("--out", default=_default_out())
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_rebalance)

    p = sub.add_parser("simulate", help="Monte-Carlo validation of the mean-field model")
    p.add_argument("scenario")
    p.add_argument("--controls", default=None)
    p.add_argument("--controls-grid", type=int, default=96,
                   help="grid the controls file was solved on")
    p.add_argument("--runs", type=int, default=2000)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--z-threshold", type=float, default=5.0)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--out", default=_default_out())
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="regularity checks for instances/scenarios")
    p.add_argument("path")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--trials", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def _default_out() -> str:
    return os.environ.get("SPARSECTL_OUT", "sparsectl-out")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except scheduling.NonBinaryScheduleError as exc:
        print(f"non-binary schedule: {exc}", file=sys.stderr)
        return EXIT_NON_BINARY
    except rebalance.NonBinaryControlError as exc:
        print(f"non-binary control: {exc}", file=sys.stderr)
        return EXIT_NON_BINARY


if __name__ == "__main__":
    sys.exit(main())
