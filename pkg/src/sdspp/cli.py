"""Command-line entry point: ``sdspp <subcommand>``.

Every subcommand reads the packaged YAML defaults, an optional ``--config``
file and repeated ``--set key.path=value`` overrides.  Files go to
``--output-dir``, else ``$SDSPP_OUTPUT_DIR``, else ``./sdspp_output``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from sdspp.drivability import DrivabilityField
from sdspp.harness.config import load_config, output_dir
from sdspp.harness.experiments import (
    mae_experiment,
    runtime_benchmark,
    shape_comparison,
    swerving_check,
)
from sdspp.harness.noise import NoiseSpec
from sdspp.harness.pipeline import PipelineConfig, compute_mae, grid_extent, rules_from_config, run_pipeline
from sdspp.harness.scenarios import SCENARIOS, generate_scenario


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))
    return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _spec(cfg: dict, args) -> NoiseSpec:
    kw = {"seed": args.seed}
    if args.noise_level is not None:
        kw["odometry_multiplier"] = args.noise_level
    return NoiseSpec.from_config(cfg, **kw)


def cmd_run(args, cfg: dict, out: Path) -> int:
    scenario = generate_scenario(args.scenario, args.seed, cfg)
    spec = _spec(cfg, args)
    plan_times = tuple(args.plan_time) if args.plan_time else ()
    if args.plan and not plan_times:
        plan_times = tuple(float(t) for t in scenario.times[:: int(scenario.tick_rate)][1:])
    pc = PipelineConfig(
        domain_knowledge=not args.no_domain_knowledge,
        use_landmarks=not args.no_landmarks,
        use_lines=not args.no_lines,
        plan_times=plan_times,
        build_field=True,
    )
    report = run_pipeline(scenario, spec, pc, cfg)
    stem = f"run_{args.scenario}_seed{args.seed}"
    mae = compute_mae(report, scenario)
    if report.last_grid is not None:
        pgm, side = report.last_grid.to_pgm(out / f"{stem}_field.pgm")
        report.artifacts += [str(pgm), str(side)]
    for i, p in enumerate(report.plans):
        path = p.trajectory.to_csv(out / f"{stem}_plan{i:02d}.csv")
        report.artifacts.append(str(path))
    data = report.to_dict()
    data["mae"] = {"aggregate": mae.aggregate, "per_node": {str(k): v for k, v in mae.per_node.items()}}
    data["phase_totals"] = report.phase_totals()
    path = _write_json(out / f"{stem}.json", data)
    print(f"{args.scenario} seed {args.seed}: {len(report.ticks)} ticks, MAE {mae.aggregate:.4f} m, "
          f"{len(report.plans)} plans -> {path}")
    return 0


def cmd_mae(args, cfg: dict, out: Path) -> int:
    table = mae_experiment(args.seeds, args.levels, cfg, progress=_log if args.verbose else None)
    table.to_csv(out / "mae.csv")
    table.summary_to_csv(out / "mae_summary.csv")
    checks = table.checks()
    _write_json(out / "mae_checks.json", {"seeds": len(table.seeds), "wall_time": table.wall_time, **checks})
    for row in table.summary():
        print(f"{row['configuration']:>11s} {row['level']:4.1f}σ  mean {row['mean_mae']:.4f}  "
              f"std {row['std']:.4f}  se {row['std_error']:.4f}")
    for k, v in checks.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    return 0 if all(checks.values()) else 1


def cmd_runtime(args, cfg: dict, out: Path) -> int:
    table = runtime_benchmark(args.nodes, args.repeats, cfg, progress=_log if args.verbose else None)
    table.to_csv(out / "runtime.csv")
    exp = cfg["experiments"]["runtime"]
    checks = table.checks(int(exp["line_features"]), int(exp["comparison_nodes"]), exp["line_comparison"])
    _write_json(out / "runtime_checks.json", checks)
    for r in table.rows:
        print(f"nodes {r['nodes']:4d} lines {r['lines']:3d}  total {r['total'] * 1e3:8.1f} ms")
    for k, v in checks.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    return 0 if all(checks.values()) else 1


def cmd_shape(args, cfg: dict, out: Path) -> int:
    report = shape_comparison(cfg)
    report.to_csv(out / "shape_comparison.csv")
    for a in report.arms:
        a.trajectory.to_csv(out / f"shape_{a.obstacle_lane}_{a.representation}.csv")
    checks = report.checks()
    _write_json(out / "shape_checks.json", checks)
    for a in report.arms:
        print(f"{a.obstacle_lane:>8s} {a.representation:>6s}  deviation {a.max_lateral_deviation:.3f} m  "
              f"clearance {a.min_clearance:.3f} m")
    for k, v in checks.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    return 0 if all(checks.values()) else 1


def cmd_swerving(args, cfg: dict, out: Path) -> int:
    rows = {}
    for dk in (True, False):
        r = swerving_check(dk, cfg, args.seed, args.noise_level or 0.0)
        tag = "with_domain_knowledge" if dk else "without_domain_knowledge"
        r.trajectory.to_csv(out / f"swerving_{tag}.csv")
        rows[tag] = {
            "max_lateral": r.max_lateral,
            "lateral_at_obstruction": r.lateral_at_obstruction,
            "terminal_x": r.terminal_x,
            "terminal_v": r.terminal_v,
            "obstruction_station": r.obstruction_station,
        }
        print(f"{tag}: lateral at obstruction {r.lateral_at_obstruction:.2f} m, "
              f"terminal x {r.terminal_x:.2f} m, terminal v {r.terminal_v:.2f} m/s")
    _write_json(out / "swerving.json", rows)
    return 0


def cmd_export_field(args, cfg: dict, out: Path) -> int:
    scenario = generate_scenario(args.scenario, args.seed, cfg)
    spec = _spec(cfg, args)
    t_stop = scenario.times[-1] if args.time is None else args.time
    pc = PipelineConfig(build_field=False, sample_grid=False, stop_time=float(t_stop))
    report = run_pipeline(scenario, spec, pc, cfg)
    rules = rules_from_config(cfg)
    if args.no_domain_knowledge:
        rules = rules.without_domain_knowledge()
    fld = DrivabilityField(report.graph, rules, args.shape, args.gaussian_scale)
    res = args.resolution or cfg["drivability"]["grid_resolution"]
    grid = fld.sample_grid(grid_extent(report.graph.latest_pose().pose, cfg), res)
    stem = out / f"field_{args.scenario}_t{float(t_stop):g}"
    pgm, side = grid.to_pgm(stem.with_suffix(".pgm"))
    grid.to_csv(stem.with_suffix(".csv"))
    print(f"{grid.shape[1]}x{grid.shape[0]} grid, range [{grid.values.min():.3g}, {grid.values.max():.3g}] -> {pgm}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file merged over the packaged defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. optimizer.max_iterations=50 (repeatable)")
    common.add_argument("--output-dir", type=Path, help="defaults to $SDSPP_OUTPUT_DIR or ./sdspp_output")
    common.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")

    p = argparse.ArgumentParser(prog="sdspp", description="Semantic drivable-space SLAM, fields and planning.")
    sub = p.add_subparsers(dest="command", required=True)

    def noise_args(sp):
        sp.add_argument("--noise-level", type=float, default=None, help="odometry noise multiplier")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("run", parents=[common], help="run the pipeline on one scenario")
    sp.add_argument("scenario", choices=SCENARIOS)
    noise_args(sp)
    sp.add_argument("--plan", action="store_true", help="plan once per second")
    sp.add_argument("--plan-time", type=float, action="append", help="plan at this time (repeatable)")
    sp.add_argument("--no-domain-knowledge", action="store_true")
    sp.add_argument("--no-landmarks", action="store_true")
    sp.add_argument("--no-lines", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("mae-experiment", parents=[common], help="localisation MAE table")
    sp.add_argument("--seeds", type=int, default=None)
    sp.add_argument("--levels", type=_float_list, default=None, help="comma-separated noise multipliers")
    sp.set_defaults(func=cmd_mae)

    sp = sub.add_parser("runtime", parents=[common], help="phase timings against graph size")
    sp.add_argument("--nodes", type=_int_list, default=None, help="comma-separated ascending node counts")
    sp.add_argument("--repeats", type=int, default=None)
    sp.set_defaults(func=cmd_runtime)

    sp = sub.add_parser("shape-compare", parents=[common], help="bi-Gaussian against box obstacles")
    sp.set_defaults(func=cmd_shape)

    sp = sub.add_parser("swerving", parents=[common], help="swerving plan with and without domain knowledge")
    noise_args(sp)
    sp.set_defaults(func=cmd_swerving)

    sp = sub.add_parser("export-field", parents=[common], help="sample the field to a 16-bit graymap")
    sp.add_argument("scenario", choices=SCENARIOS)
    noise_args(sp)
    sp.add_argument("--time", type=float, default=None, help="snapshot time, defaults to the scenario end")
    sp.add_argument("--resolution", type=float, default=None)
    sp.add_argument("--shape", choices=("bbox", "bi-gaussian"), default="bbox")
    sp.add_argument("--gaussian-scale", type=float, default=1.0)
    sp.add_argument("--no-domain-knowledge", action="store_true")
    sp.set_defaults(func=cmd_export_field)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    out = output_dir(args.output_dir)
    return int(args.func(args, cfg, out) or 0)


if __name__ == "__main__":
    sys.exit(main())
