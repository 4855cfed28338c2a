"""Per-tick pipeline: ingest, prune, optimise, build the field, optionally plan."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from sdspp.drivability import ClassRule, DrivabilityField, DrivabilityRules, Grid
from sdspp.harness.config import default_config
from sdspp.harness.noise import MeasurementStream, NoiseSpec, inject_noise
from sdspp.harness.scenarios import Scenario
from sdspp.planner import MptpParams, Trajectory, VehicleState, plan
from sdspp.slam import OptimizationAborted, OptimizerConfig, optimize
from sdspp.world_model import FactorGraph, SemanticClass, SemanticInfo


def _section(cfg: dict | None, name: str) -> dict:
    out = dict(default_config()[name])
    out.update((cfg or {}).get(name, {}))
    return out


def graph_from_config(cfg: dict | None = None) -> FactorGraph:
    return FactorGraph(**_section(cfg, "graph"))


def optimizer_from_config(cfg: dict | None = None) -> OptimizerConfig:
    return OptimizerConfig(**_section(cfg, "optimizer"))


def rules_from_config(cfg: dict | None = None) -> DrivabilityRules:
    d = _section(cfg, "drivability")
    return DrivabilityRules(
        rules={SemanticClass(k): ClassRule(*v) for k, v in d["rules"].items()},
        default=ClassRule(*d["default"]),
        default_extent=tuple(d["default_extent"]),
        stopped_speed=d["stopped_speed"],
        d_3l=d["d_3l"],
        grad_norm_des=d["grad_norm_des"],
        drive_clears_lines=bool(d.get("drive_clears_lines", True)),
    )


def planner_from_config(cfg: dict | None = None) -> MptpParams:
    d = _section(cfg, "planner")
    known = {f.name for f in fields(MptpParams)}
    return MptpParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


def grid_extent(pose, cfg: dict | None = None) -> tuple[float, float, float, float]:
    d = _section(cfg, "drivability")
    x = float(pose[0])
    return (x - d["grid_behind"], x + d["grid_ahead"], float(d["grid_y"][0]), float(d["grid_y"][1]))


@dataclass
class PipelineConfig:
    use_landmarks: bool = True
    use_lines: bool = True
    optimize: bool = True
    build_field: bool = True
    sample_grid: bool = True
    domain_knowledge: bool = True
    obstacle_shape: str = "bbox"
    gaussian_scale: float = 1.0
    plan_times: tuple = ()
    stop_time: float | None = None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TickRecord:
    index: int
    time: float
    n_nodes: int
    n_edges: int
    estimates: dict
    optimization: dict | None = None
    error: str | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, wall_time: bool = True) -> dict:
        opt = None
        if self.optimization is not None:
            opt = {k: v for k, v in self.optimization.items() if wall_time or k != "wall_time"}
        d = {
            "index": self.index,
            "time": self.time,
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
            "estimates": {str(k): list(v) for k, v in self.estimates.items()},
            "optimization": opt,
            "error": self.error,
        }
        if wall_time:
            d["timings"] = self.timings
        return d


@dataclass
class PlanRecord:
    time: float
    tick: int
    start: list
    trajectory: Trajectory
    field: DrivabilityField | None = None

    def to_dict(self) -> dict:
        tr = self.trajectory
        return {
            "time": self.time,
            "tick": self.tick,
            "start": self.start,
            "cost": tr.cost,
            "breakdown": tr.breakdown,
            "failed": tr.failed,
            "states": tr.states.tolist(),
            "inputs": tr.inputs.tolist(),
        }


@dataclass
class RunReport:
    scenario: str
    seed: int
    noise: dict
    config: dict
    ticks: list = field(default_factory=list)
    node_tick: dict = field(default_factory=dict)
    plans: list = field(default_factory=list)
    last_field: DrivabilityField | None = None
    last_grid: Grid | None = None
    graph: FactorGraph | None = None
    artifacts: list = field(default_factory=list)

    def to_dict(self, wall_time: bool = True) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "noise": self.noise,
            "config": self.config,
            "ticks": [t.to_dict(wall_time) for t in self.ticks],
            "node_tick": {str(k): v for k, v in self.node_tick.items()},
            "plans": [p.to_dict() for p in self.plans],
            "artifacts": list(self.artifacts),
        }

    def to_json(self, wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(wall_time), sort_keys=True)

    def phase_totals(self) -> dict:
        out: dict = {}
        for t in self.ticks:
            for k, v in t.timings.items():
                out[k] = out.get(k, 0.0) + v
        return out


@dataclass
class MaeResult:
    per_node: dict
    aggregate: float


def compute_mae(report: RunReport, scenario: Scenario) -> MaeResult:
    """Per-node mean position error over every graph containing the node, and their mean."""
    errors: dict[int, list] = {}
    for tick in report.ticks:
        for nid, est in tick.estimates.items():
            truth = scenario.ego[report.node_tick[nid], :2]
            errors.setdefault(nid, []).append(float(np.hypot(*(np.asarray(est) - truth))))
    per_node = {nid: float(np.mean(v)) for nid, v in errors.items()}
    agg = float(np.mean(list(per_node.values()))) if per_node else 0.0
    return MaeResult(per_node, agg)


def ingest_tick(graph: FactorGraph, tick, stream: MeasurementStream, cfg: PipelineConfig) -> int:
    """Add one tick of measurements to the graph; returns the new pose id."""
    delta = np.zeros(3) if tick.odometry is None else tick.odometry
    pid = graph.add_pose(tick.time, delta, stream.odometry_covariance)
    if cfg.use_landmarks:
        for ob in tick.landmarks:
            sem = SemanticInfo(SemanticClass(ob.cls), ob.extent, ob.track_id, ob.speed)
            graph.observe_landmark(pid, ob.relative, stream.landmark_covariance, sem, ob.relative_heading)
    if cfg.use_lines:
        for ln in tick.lines:
            sem = SemanticInfo(SemanticClass(ln.cls), None, ln.track_id)
            graph.observe_line(pid, ln.points, stream.line_covariance, sem)
    return pid


def run_pipeline(
    scenario: Scenario,
    spec: NoiseSpec,
    pipeline: PipelineConfig | None = None,
    config: dict | None = None,
    stream: MeasurementStream | None = None,
) -> RunReport:
    pipeline = pipeline or PipelineConfig()
    stream = stream or inject_noise(scenario, spec, config)
    graph = graph_from_config(config)
    opt_cfg = optimizer_from_config(config)
    rules = rules_from_config(config)
    if not pipeline.domain_knowledge:
        rules = rules.without_domain_knowledge()
    params = planner_from_config(config)
    plan_ticks = {int(round(t * scenario.tick_rate)): t for t in pipeline.plan_times}
    report = RunReport(
        scenario.name, scenario.seed,
        {k: getattr(spec, k) for k in ("sigma_position", "sigma_heading", "odometry_multiplier",
                                       "landmark_multiplier", "line_multiplier", "seed")},
        pipeline.to_dict(),
    )
    for tick in stream.ticks:
        if pipeline.stop_time is not None and tick.time > pipeline.stop_time + 1e-9:
            break
        timings = {}
        t0 = time.perf_counter()
        pid = ingest_tick(graph, tick, stream, pipeline)
        report.node_tick[pid] = tick.index
        graph.prune_window(tick.time)
        timings["graph_build"] = time.perf_counter() - t0

        opt_report, error = None, None
        t0 = time.perf_counter()
        if pipeline.optimize:
            try:
                opt_report = optimize(graph, opt_cfg).to_dict()
            except OptimizationAborted as exc:
                error = str(exc)
        timings["optimize"] = time.perf_counter() - t0

        estimates = {n.id: [n.x, n.y] for n in graph.av_nodes()}
        latest = graph.latest_pose()
        if pipeline.build_field or tick.index in plan_ticks:
            t0 = time.perf_counter()
            fld = DrivabilityField(graph, rules, pipeline.obstacle_shape, pipeline.gaussian_scale)
            if pipeline.sample_grid:
                report.last_grid = fld.sample_grid(grid_extent(latest.pose, config), _section(config, "drivability")["grid_resolution"])
            timings["apf"] = time.perf_counter() - t0
            report.last_field = fld
            if tick.index in plan_ticks:
                s0 = VehicleState(latest.x, latest.y, latest.theta, float(scenario.ego[tick.index, 3]), 0.0)
                traj = plan(s0, fld, params)
                report.plans.append(PlanRecord(tick.time, tick.index, list(s0.as_array()), traj, fld))
        report.ticks.append(TickRecord(
            tick.index, tick.time, len(graph.nodes), len(graph.edges), estimates, opt_report, error, timings
        ))
    report.graph = graph
    return report
