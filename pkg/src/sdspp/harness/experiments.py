"""Experiment drivers: localisation MAE table, runtime benchmark, obstacle-shape
comparison and the swerving domain-knowledge check."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdspp import se2
from sdspp.drivability import DrivabilityField
from sdspp.harness.config import default_config, merge
from sdspp.harness.noise import NOISE_LEVELS, NoiseSpec, inject_noise
from sdspp.harness.pipeline import (
    PipelineConfig,
    compute_mae,
    grid_extent,
    optimizer_from_config,
    rules_from_config,
    run_pipeline,
)
from sdspp.harness.scenarios import generate_scenario
from sdspp.slam import OptimizerConfig, optimize
from sdspp.world_model import FactorGraph, SemanticClass, SemanticInfo

# configuration name -> (use landmarks, use lines)
MAE_CONFIGURATIONS = {
    "odom": (False, False),
    "odom+LM": (True, False),
    "odom+LL": (False, True),
    "odom+LM+LL": (True, True),
}

PHASES = ("graph_build", "optimize", "apf")


def _experiment(cfg: dict | None, name: str) -> dict:
    return merge(default_config()["experiments"][name], (cfg or {}).get("experiments", {}).get(name, {}))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv_rows(path) -> list[dict]:
    """Load any exported CSV as dicts; numeric fields come back as float or int."""

    def conv(v: str):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    with Path(path).open(newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ----------------------------------------------------------------------
# localisation MAE


@dataclass
class PairedComparison:
    """Per-seed differences ``a - b`` of two configurations at one noise level."""

    mean_difference: float
    std_error: float
    z: float

    def distinguishable(self, z_crit: float) -> bool:
        return abs(self.z) > z_crit


def paired_comparison(a, b) -> PairedComparison:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    mean = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
    if se > 0:
        z = mean / se
    else:
        z = 0.0 if mean == 0 else float(np.copysign(np.inf, mean))
    return PairedComparison(mean, se, float(z))


@dataclass
class MaeTable:
    """Aggregate MAE per (configuration, level, seed)."""

    configurations: tuple
    levels: tuple
    seeds: tuple
    values: np.ndarray  # (configurations, levels, seeds)
    significance_z: float = 1.96
    wall_time: float = 0.0

    def cell(self, configuration: str, level: float) -> np.ndarray:
        return self.values[self.configurations.index(configuration), self.levels.index(level)]

    def summary(self) -> list[dict]:
        rows = []
        n = len(self.seeds)
        for i, c in enumerate(self.configurations):
            for j, lv in enumerate(self.levels):
                v = self.values[i, j]
                std = float(v.std(ddof=1)) if n > 1 else 0.0
                rows.append({
                    "configuration": c, "level": float(lv), "seeds": n, "mean_mae": float(v.mean()),
                    "std": std, "std_error": std / np.sqrt(n),
                })
        return rows

    def compare(self, a: str, b: str, level: float) -> PairedComparison:
        return paired_comparison(self.cell(a, level), self.cell(b, level))

    def checks(self) -> dict:
        """Qualitative claims of the experiment, each as a boolean."""
        full = "odom+LM+LL"
        means = {(c, lv): float(self.cell(c, lv).mean()) for c in self.configurations for lv in self.levels}
        lo, hi = min(self.levels), max(self.levels)
        return {
            "all_measurements_best": all(
                means[(full, lv)] <= means[(c, lv)] for c in self.configurations for lv in self.levels
            ),
            "landmarks_no_gain_at_low_noise": not self.compare("odom", "odom+LM", lo).distinguishable(self.significance_z),
            "landmarks_gain_at_high_noise": self.compare("odom", "odom+LM", hi).z > self.significance_z,
            "lines_gain_at_low_noise": all(
                means[("odom+LL", lv)] < means[("odom", lv)] for lv in self.levels if lv <= 0.2
            ),
        }

    def to_csv(self, path) -> Path:
        """Per-seed long table; :meth:`from_csv` restores it exactly."""
        rows = [
            (c, lv, s, self.values[i, j, k])
            for i, c in enumerate(self.configurations)
            for j, lv in enumerate(self.levels)
            for k, s in enumerate(self.seeds)
        ]
        return _write_rows(path, ("configuration", "level", "seed", "mae"), rows)

    def summary_to_csv(self, path) -> Path:
        rows = self.summary()
        return _write_rows(path, list(rows[0]), [list(r.values()) for r in rows])

    @classmethod
    def from_csv(cls, path, significance_z: float = 1.96) -> "MaeTable":
        rows = read_csv_rows(path)
        configs = tuple(dict.fromkeys(r["configuration"] for r in rows))
        levels = tuple(dict.fromkeys(float(r["level"]) for r in rows))
        seeds = tuple(dict.fromkeys(int(r["seed"]) for r in rows))
        values = np.full((len(configs), len(levels), len(seeds)), np.nan)
        for r in rows:
            values[configs.index(r["configuration"]), levels.index(float(r["level"])),
                   seeds.index(int(r["seed"]))] = float(r["mae"])
        return cls(configs, levels, seeds, values, significance_z)


def mae_experiment(seeds: int | None = None, levels=None, config: dict | None = None,
                   configurations=None, progress=None) -> MaeTable:
    """Run every configuration on seeds ``0..seeds-1`` at every odometry noise level.

    All configurations of one (level, seed) cell share the same measurement
    stream, so their per-seed MAEs are paired.
    """
    exp = _experiment(config, "mae")
    seeds = int(seeds if seeds is not None else exp["seeds"])
    if seeds < 2:
        raise ValueError("need at least 2 seeds for a standard error")
    levels = tuple(float(v) for v in (levels if levels is not None else exp.get("levels", NOISE_LEVELS)))
    configurations = tuple(configurations or MAE_CONFIGURATIONS)
    cfg = merge(config or default_config(), exp.get("overrides") or {})
    values = np.zeros((len(configurations), len(levels), seeds))
    t0 = time.perf_counter()
    for j, lv in enumerate(levels):
        for s in range(seeds):
            scenario = generate_scenario(exp["scenario"], s, cfg, duration=exp["duration"])
            spec = NoiseSpec.from_config(cfg, odometry_multiplier=lv, seed=s)
            stream = inject_noise(scenario, spec, cfg)
            for i, name in enumerate(configurations):
                use_lm, use_ll = MAE_CONFIGURATIONS[name]
                pc = PipelineConfig(use_landmarks=use_lm, use_lines=use_ll, build_field=False, sample_grid=False)
                report = run_pipeline(scenario, spec, pc, cfg, stream)
                values[i, j, s] = compute_mae(report, scenario).aggregate
            if progress:
                progress(f"level {lv} seed {s}: " + " ".join(
                    f"{c}={values[i, j, s]:.4f}" for i, c in enumerate(configurations)))
    return MaeTable(configurations, levels, tuple(range(seeds)), values,
                    float(exp.get("significance_z", 1.96)), time.perf_counter() - t0)


# ----------------------------------------------------------------------
# runtime benchmark


def synthesize_graph(n_nodes: int, n_lines: int, seed: int, config: dict | None = None,
                     noise_level: float = 0.2) -> tuple[FactorGraph, dict]:
    """Build a graph with exactly ``n_nodes`` nodes, ``n_lines`` of them lane lines.

    The AV drives along +x at the scenario speed and tick rate.  Landmarks sit
    alternately left and right of the road and are seen within ``view_range``;
    line ``i`` runs parallel to the road, alternating sides outward, and is
    observed every ``line_every`` ticks at the sensor's look-ahead distances.
    Returns the graph and the time spent building it.
    """
    cfg = merge(default_config(), config or {})
    exp = _experiment(cfg, "runtime")
    if n_lines < 0 or n_nodes - n_lines < 4:
        raise ValueError("need n_nodes - n_lines >= 4")
    n_av = (n_nodes - n_lines + 1) // 2
    n_lm = n_nodes - n_lines - n_av
    rate = float(cfg["scenario"]["tick_rate"])
    step = float(cfg["scenario"]["ego_speed"]) / rate
    lane = float(cfg["scenario"]["lane_width"])
    spec = NoiseSpec.from_config(cfg, odometry_multiplier=noise_level, seed=seed)
    rng = np.random.default_rng([seed, 2])
    truth = np.column_stack([np.arange(n_av) * step, np.zeros(n_av), np.zeros(n_av)])
    length = truth[-1, 0]
    lm_x = np.linspace(0.0, length, n_lm) + rng.uniform(-0.2, 0.2, n_lm)
    lm_y = np.where(np.arange(n_lm) % 2 == 0, -1.0, 1.0) * (lane + rng.uniform(0.0, 2.0, n_lm))
    landmarks = np.column_stack([lm_x, lm_y])
    line_y = [(1 if i % 2 == 0 else -1) * (lane / 2 + lane * (i // 2)) for i in range(n_lines)]
    ahead = np.asarray(cfg["sensors"]["line_ahead"], dtype=float)
    view = float(exp["view_range"])
    line_every = int(exp["line_every"])

    graph = FactorGraph(**{**cfg["graph"], "window_duration": 1e9})
    t0 = time.perf_counter()
    lm_seen = np.zeros(n_lm, dtype=bool)
    for k in range(n_av):
        odo = np.zeros(3) if k == 0 else se2.between(truth[k - 1], truth[k]) + rng.normal(0, 1, 3) * spec.odometry_std
        pid = graph.add_pose(k / rate, odo, spec.odometry_covariance)
        near = np.abs(landmarks[:, 0] - truth[k, 0]) <= view
        if k == n_av - 1:
            near |= ~lm_seen  # every landmark gets at least one observation
        for m in np.flatnonzero(near):
            lm_seen[m] = True
            rel = se2.inverse_transform_points(truth[k], landmarks[m])[0]
            graph.observe_landmark(
                pid, rel + rng.normal(0, spec.landmark_std, 2), spec.landmark_covariance,
                SemanticInfo(SemanticClass.CONE, (0.3, 0.3), 1000 + int(m)),
            )
        if n_lines and (k % line_every == 0 or k == n_av - 1):
            for i, y in enumerate(line_y):
                pts = np.column_stack([truth[k, 0] + ahead, np.full(ahead.size, y)])
                rel = se2.inverse_transform_points(truth[k], pts)
                graph.observe_line(
                    pid, rel + rng.normal(0, spec.line_std, rel.shape), spec.line_covariance,
                    SemanticInfo(SemanticClass.SOLID_LINE, None, 100 + i),
                )
    build = time.perf_counter() - t0
    if len(graph.nodes) != n_nodes:
        raise RuntimeError(f"synthesised {len(graph.nodes)} nodes, expected {n_nodes}")
    return graph, {"graph_build": build}


def time_phases(n_nodes: int, n_lines: int, seed: int, config: dict | None = None) -> dict:
    """Wall time of graph construction, optimisation and field construction."""
    cfg = merge(default_config(), config or {})
    exp = _experiment(cfg, "runtime")
    graph, timings = synthesize_graph(n_nodes, n_lines, seed, cfg, float(exp["noise_level"]))
    opt = optimizer_from_config(cfg)
    if exp.get("iterations") is not None:
        # a fixed iteration count isolates the effect of graph size
        opt = OptimizerConfig(**{**opt.__dict__, "max_iterations": int(exp["iterations"]),
                                 "relative_cost_tolerance": 1e-300})
    t0 = time.perf_counter()
    optimize(graph, opt)
    timings["optimize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fld = DrivabilityField(graph, rules_from_config(cfg))
    fld.sample_grid(grid_extent(graph.latest_pose().pose, cfg), cfg["drivability"]["grid_resolution"])
    timings["apf"] = time.perf_counter() - t0
    timings["total"] = sum(timings[p] for p in PHASES)
    return timings


@dataclass
class RuntimeTable:
    """Median phase timings (seconds) keyed by (node count, line count)."""

    rows: list = field(default_factory=list)  # dicts: nodes, lines, repeats, <phase>...
    samples: dict = field(default_factory=dict)

    def row(self, nodes: int, lines: int) -> dict:
        for r in self.rows:
            if r["nodes"] == nodes and r["lines"] == lines:
                return r
        raise KeyError((nodes, lines))

    def series(self, lines: int) -> list[dict]:
        return sorted((r for r in self.rows if r["lines"] == lines), key=lambda r: r["nodes"])

    def checks(self, lines: int, comparison_nodes: int, comparison_lines, budget: float = 0.5) -> dict:
        ser = self.series(lines)
        monotone = all(
            all(a[p] <= b[p] for a, b in zip(ser, ser[1:])) for p in (*PHASES, "total")
        )
        out = {"monotone": monotone}
        at = [r for r in ser if r["nodes"] == comparison_nodes]
        if at:
            out["within_budget"] = at[0]["total"] <= budget
        lo, hi = comparison_lines
        try:
            out["lines_slower"] = self.row(comparison_nodes, hi)["total"] > self.row(comparison_nodes, lo)["total"]
        except KeyError:
            pass
        return out

    def to_csv(self, path) -> Path:
        header = ["nodes", "lines", "repeats", *PHASES, "total"]
        return _write_rows(path, header, [[r[h] for h in header] for r in self.rows])

    @classmethod
    def from_csv(cls, path) -> "RuntimeTable":
        return cls(read_csv_rows(path))


def runtime_benchmark(node_counts=None, repeats: int | None = None, config: dict | None = None,
                      line_counts=None, progress=None) -> RuntimeTable:
    """Median phase timings over ``repeats`` synthesized graphs per size.

    ``line_counts`` lists the (nodes, lines) pairs to add to the sweep; by
    default the configured line comparison at ``comparison_nodes``.
    """
    exp = _experiment(config, "runtime")
    node_counts = [int(n) for n in (node_counts if node_counts is not None else exp["nodes"])]
    if any(b <= a for a, b in zip(node_counts, node_counts[1:])):
        raise ValueError("node counts must be strictly ascending")
    repeats = int(repeats if repeats is not None else exp["repeats"])
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cells = [(n, int(exp["line_features"])) for n in node_counts]
    if line_counts is None:
        line_counts = [(int(exp["comparison_nodes"]), int(k)) for k in exp["line_comparison"]]
    cells += [c for c in line_counts if c not in cells]
    # warm-up so imports and caches do not land in the first measurement
    time_phases(min(node_counts), int(exp["line_features"]), 0, config)
    table = RuntimeTable()
    # repeats sweep all cells round-robin so slow drift in machine load hits every size alike
    runs_by_cell = {c: [] for c in cells}
    for r in range(repeats):
        for n, k in cells:
            runs_by_cell[(n, k)].append(time_phases(n, k, r, config))
    for n, k in cells:
        runs = runs_by_cell[(n, k)]
        row = {"nodes": n, "lines": k, "repeats": repeats}
        for p in (*PHASES, "total"):
            row[p] = float(np.median([t[p] for t in runs]))
        table.rows.append(row)
        table.samples[(n, k)] = runs
        if progress:
            progress(f"nodes {n} lines {k}: " + " ".join(f"{p}={row[p] * 1e3:.1f}ms" for p in (*PHASES, "total")))
    return table


# ----------------------------------------------------------------------
# obstacle shape comparison


SHAPE_ARMS = ("wide", "narrow", "bbox")


def _rect_distance(points: np.ndarray, center, theta: float, extent) -> np.ndarray:
    """Distance from points to a rectangle (0 inside)."""
    local = se2.inverse_transform_points(np.array([center[0], center[1], theta]), points)
    half = np.asarray(extent, dtype=float) / 2
    out = np.maximum(np.abs(local) - half, 0.0)
    return np.hypot(out[:, 0], out[:, 1])


@dataclass
class ShapeArm:
    obstacle_lane: str
    representation: str
    max_lateral_deviation: float
    min_clearance: float
    terminal_x: float
    terminal_v: float
    cost: float
    failed: bool
    trajectory: object = None


@dataclass
class ShapeReport:
    arms: list

    def arm(self, lane: str, representation: str) -> ShapeArm:
        for a in self.arms:
            if a.obstacle_lane == lane and a.representation == representation:
                return a
        raise KeyError((lane, representation))

    def checks(self, max_deviation: float = 0.3, min_clearance: float = 0.5) -> dict:
        return {
            "wide_swerves_more": self.arm("adjacent", "wide").max_lateral_deviation
            > self.arm("adjacent", "bbox").max_lateral_deviation,
            "narrow_closer": self.arm("ego", "narrow").min_clearance < self.arm("ego", "bbox").min_clearance,
            "bbox_deviation_ok": self.arm("adjacent", "bbox").max_lateral_deviation <= max_deviation,
            "bbox_clearance_ok": self.arm("ego", "bbox").min_clearance >= min_clearance,
        }

    def to_csv(self, path) -> Path:
        header = ["obstacle_lane", "representation", "max_lateral_deviation", "min_clearance",
                  "terminal_x", "terminal_v", "cost", "failed"]
        return _write_rows(path, header, [[getattr(a, h) for h in header] for a in self.arms])


def shape_comparison(config: dict | None = None) -> ShapeReport:
    """Plan past an obstacle in the ego or adjacent lane with three obstacle shapes.

    Measurements are noise-free so the arms differ only in the representation.
    Deviation is the largest |y| of the planned positions (ego lane centre is
    y = 0); clearance is the smallest distance from a planned position to the
    true obstacle footprint.
    """
    exp = _experiment(config, "shape")
    cfg = config or default_config()
    shapes = {
        "wide": ("bi-gaussian", float(exp["wide_scale"])),
        "narrow": ("bi-gaussian", float(exp["narrow_scale"])),
        "bbox": ("bbox", 1.0),
    }
    spec = NoiseSpec.from_config(cfg, odometry_multiplier=0.0, landmark_multiplier=0.0, line_multiplier=0.0)
    t_plan = float(exp["plan_time"])
    arms = []
    for lane in ("ego", "adjacent"):
        scenario = generate_scenario("straight-two-lane", 0, cfg, obstacle_lane=lane,
                                     obstacle_station=float(exp["obstacle_station"]),
                                     duration=t_plan + 1.0)
        ob = scenario.obstacles[0]
        stream = inject_noise(scenario, spec, cfg)
        for rep in SHAPE_ARMS:
            shape, scale = shapes[rep]
            pc = PipelineConfig(build_field=False, sample_grid=False, obstacle_shape=shape,
                                gaussian_scale=scale, plan_times=(t_plan,), stop_time=t_plan)
            report = run_pipeline(scenario, spec, pc, cfg, stream)
            tr = report.plans[0].trajectory
            pos = tr.states[:, :2]
            arms.append(ShapeArm(
                lane, rep,
                max_lateral_deviation=float(np.abs(pos[:, 1]).max()),
                min_clearance=float(_rect_distance(pos, ob.center, ob.theta, ob.extent).min()),
                terminal_x=float(tr.states[-1, 0]),
                terminal_v=float(tr.states[-1, 3]),
                cost=float(tr.cost),
                failed=bool(tr.failed),
                trajectory=tr,
            ))
    return ShapeReport(arms)


# ----------------------------------------------------------------------
# swerving with and without domain knowledge


@dataclass
class SwervingResult:
    domain_knowledge: bool
    obstruction_station: float
    max_lateral: float
    lateral_at_obstruction: float
    terminal_x: float
    terminal_v: float
    trajectory: object
    report: object = None

    @property
    def passes_obstruction(self) -> bool:
        return self.terminal_x > self.obstruction_station

    def exits_ego_lane(self, lane_width: float) -> bool:
        return self.lateral_at_obstruction > lane_width / 2


def swerving_check(domain_knowledge: bool, config: dict | None = None, seed: int = 0,
                   noise_level: float = 0.0) -> SwervingResult:
    """Plan once in the swerving scenario after the lead vehicles have passed the obstruction."""
    exp = _experiment(config, "swerving")
    cfg = config or default_config()
    t_plan = float(exp["plan_time"])
    scenario = generate_scenario("swerving", seed, cfg, duration=t_plan + 1.0)
    spec = NoiseSpec.from_config(cfg, odometry_multiplier=noise_level, seed=seed)
    if noise_level == 0.0:
        spec = NoiseSpec.from_config(cfg, odometry_multiplier=0.0, landmark_multiplier=0.0,
                                     line_multiplier=0.0, seed=seed)
    pc = PipelineConfig(build_field=False, sample_grid=False, domain_knowledge=domain_knowledge,
                        plan_times=(t_plan,), stop_time=t_plan)
    report = run_pipeline(scenario, spec, pc, cfg)
    tr = report.plans[0].trajectory
    station = float(scenario.obstacles[0].center[0])
    xs, ys = tr.states[:, 0], tr.states[:, 1]
    near = np.abs(xs - station) <= float(exp["obstruction_window"])
    return SwervingResult(
        domain_knowledge, station,
        max_lateral=float(ys.max()),
        lateral_at_obstruction=float(ys[near].max()) if near.any() else float("-inf"),
        terminal_x=float(xs[-1]),
        terminal_v=float(tr.states[-1, 3]),
        trajectory=tr,
        report=report,
    )
