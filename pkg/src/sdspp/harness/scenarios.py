"""Deterministic straight-road scenarios.

The road runs along +x.  The ego lane is centred on y = 0 and the adjacent
lane on y = lane_width; lane lines sit at -w/2, w/2 and 3w/2.  Cones line
both shoulders.  All geometry is a pure function of (name, seed, config).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from sdspp.harness.config import default_config

SCENARIOS = ("base", "follow", "barrier", "stop", "parked", "parking", "swerving", "straight-two-lane")

VEHICLE_EXTENT = (4.5, 1.8)
OBSTRUCTION_EXTENT = (2.0, 2.0)


@dataclass
class Track:
    """A vehicle with a per-tick state row (x, y, psi, v)."""

    track_id: int
    extent: tuple
    states: np.ndarray


@dataclass
class StaticObject:
    track_id: int
    cls: str
    center: tuple
    theta: float
    extent: tuple


@dataclass
class LaneLine:
    track_id: int
    cls: str
    points: np.ndarray

    def y_at(self, x) -> np.ndarray:
        return np.interp(x, self.points[:, 0], self.points[:, 1])


@dataclass
class Scenario:
    name: str
    seed: int
    tick_rate: float
    times: np.ndarray
    ego: np.ndarray
    vehicles: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)
    cones: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    cone_ids: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "tick_rate": self.tick_rate,
            "times": self.times.tolist(),
            "ego": self.ego.tolist(),
            "vehicles": [{**asdict(v), "states": v.states.tolist()} for v in self.vehicles],
            "obstacles": [asdict(o) for o in self.obstacles],
            "cones": self.cones.tolist(),
            "cone_ids": list(self.cone_ids),
            "lines": [{**asdict(ln), "points": ln.points.tolist()} for ln in self.lines],
            "options": self.options,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            name=d["name"],
            seed=d["seed"],
            tick_rate=d["tick_rate"],
            times=np.asarray(d["times"], dtype=float),
            ego=np.asarray(d["ego"], dtype=float),
            vehicles=[Track(v["track_id"], tuple(v["extent"]), np.asarray(v["states"], dtype=float))
                      for v in d["vehicles"]],
            obstacles=[StaticObject(o["track_id"], o["cls"], tuple(o["center"]), o["theta"], tuple(o["extent"]))
                       for o in d["obstacles"]],
            cones=np.asarray(d["cones"], dtype=float).reshape(-1, 2),
            cone_ids=list(d["cone_ids"]),
            lines=[LaneLine(ln["track_id"], ln["cls"], np.asarray(ln["points"], dtype=float))
                   for ln in d["lines"]],
            options=d.get("options", {}),
        )


# ----------------------------------------------------------------------
# motion primitives


def lateral_profile(segments):
    """y(x) and dy/dx for piecewise cosine blends ``(x_start, x_end, y_from, y_to)``.

    Before the first segment y is the first ``y_from``; between segments it
    holds the last ``y_to``.
    """
    segs = sorted(segments)

    def y_of(x):
        x = np.asarray(x, dtype=float)
        y = np.full(x.shape, segs[0][2] if segs else 0.0)
        dy = np.zeros(x.shape)
        for xa, xb, ya, yb in segs:
            u = np.clip((x - xa) / (xb - xa), 0.0, 1.0)
            inside = (x > xa) & (x < xb)
            y = np.where(x >= xa, ya + (yb - ya) * 0.5 * (1 - np.cos(np.pi * u)), y)
            dy = np.where(inside, (yb - ya) * 0.5 * np.pi / (xb - xa) * np.sin(np.pi * u), dy)
        return y, dy

    return y_of


def drive(times, x0: float, speed: float, lateral=None, stop_x: float | None = None,
          decel: float = 0.6, substeps: int = 20) -> np.ndarray:
    """Integrate a scripted drive; returns rows (x, y, psi, v) at ``times``.

    Longitudinal speed is ``speed`` until a braking curve brings the vehicle
    to rest at ``stop_x``.  The lateral position follows ``lateral(x)``.
    """
    lateral = lateral or lateral_profile([])
    dt = (times[1] - times[0]) / substeps if len(times) > 1 else 0.0

    def vx(x):
        if stop_x is None:
            return speed
        return min(speed, np.sqrt(2.0 * decel * max(0.0, stop_x - x)))

    xs = np.empty(len(times))
    x = x0
    for k in range(len(times)):
        xs[k] = x
        for _ in range(substeps):
            # midpoint rule keeps the braking curve well behaved near rest
            x_mid = x + 0.5 * dt * vx(x)
            x = x + dt * vx(x_mid)
    y, dy = lateral(xs)
    v_long = np.array([vx(x) for x in xs])
    psi = np.arctan(dy)
    v = v_long * np.sqrt(1.0 + dy * dy)
    return np.column_stack([xs, y, psi, v])


def _swerve(station: float, lane: float, lead_in: float, length: float, start_y: float = 0.0):
    """Lane change to the adjacent lane before ``station`` and back after it."""
    a = station - lead_in
    return lateral_profile([
        (a, a + length, start_y, lane),
        (station + lead_in - length, station + lead_in, lane, start_y),
    ])


# ----------------------------------------------------------------------
# generator


def _road(cfg: dict, rng: np.random.Generator, center_dashed: bool):
    w = cfg["lane_width"]
    xs = np.arange(cfg["road_start"], cfg["road_end"] + 1e-9, cfg["line_sample_spacing"])
    specs = [(100, -w / 2, "solid-lane-line"),
             (101, w / 2, "dashed-lane-line" if center_dashed else "solid-lane-line"),
             (102, 1.5 * w, "solid-lane-line")]
    lines = [LaneLine(tid, cls, np.column_stack([xs, np.full_like(xs, y)])) for tid, y, cls in specs]
    cx = np.arange(cfg["road_start"], cfg["road_end"] + 1e-9, cfg["cone_spacing"])
    right = np.column_stack([cx, np.full_like(cx, -w / 2 - cfg["cone_margin"])])
    left = np.column_stack([cx, np.full_like(cx, 1.5 * w + cfg["cone_margin"])])
    cones = np.vstack([right, left]) + rng.normal(0.0, cfg["cone_jitter"], (2 * len(cx), 2))
    return lines, cones, list(range(1000, 1000 + len(cones)))


def generate_scenario(name: str, seed: int = 0, config: dict | None = None, **options) -> Scenario:
    """Build scenario ``name``; ``options`` carries scenario-specific switches.

    ``straight-two-lane`` accepts ``obstacle_lane`` in {"ego", "adjacent", None}.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    cfg = dict(default_config()["scenario"])
    cfg.update((config or {}).get("scenario", {}))
    rng = np.random.default_rng(seed)
    rate = float(cfg["tick_rate"])
    duration = float(options.pop("duration", cfg["duration"]))
    times = np.arange(int(round(duration * rate)) + 1) / rate
    w = cfg["lane_width"]
    v0 = cfg["ego_speed"]
    decel = cfg["decel"]
    gap = cfg["stop_distance"]
    lines, cones, cone_ids = _road(cfg, rng, center_dashed=(name == "straight-two-lane"))
    vehicles, obstacles = [], []
    ego = None

    if name in ("base", "straight-two-lane"):
        ego = drive(times, 0.0, v0)
        if name == "straight-two-lane":
            lane = options.get("obstacle_lane", "ego")
            if lane not in ("ego", "adjacent", None):
                raise ValueError("obstacle_lane must be 'ego', 'adjacent' or None")
            if lane is not None:
                station = float(options.get("obstacle_station", 30.0))
                y = 0.0 if lane == "ego" else w
                obstacles.append(StaticObject(500, "static-obstacle", (station, y), 0.0, VEHICLE_EXTENT))
            options["obstacle_lane"] = lane
    elif name == "follow":
        ego = drive(times, 0.0, v0)
        vehicles.append(Track(1, VEHICLE_EXTENT, drive(times, 15.0, v0)))
    elif name == "barrier":
        station = cfg["barrier_station"]
        obstacles.append(StaticObject(500, "static-obstacle", (station, 0.0), 0.0, (0.5, 3.0)))
        ego = drive(times, 0.0, v0, stop_x=station - 0.25 - gap, decel=decel)
    elif name == "stop":
        station = cfg["barrier_station"] + 15.0
        obstacles.append(StaticObject(500, "static-obstacle", (station, 0.0), 0.0, (0.5, 3.0)))
        lead_stop = station - 0.25 - gap - VEHICLE_EXTENT[0] / 2
        vehicles.append(Track(1, VEHICLE_EXTENT, drive(times, 15.0, v0, stop_x=lead_stop, decel=decel)))
        ego = drive(times, 0.0, v0, stop_x=lead_stop - VEHICLE_EXTENT[0] - gap, decel=decel)
    elif name == "parked":
        ego = drive(times, 0.0, v0)
        parked = np.tile([cfg["barrier_station"] - 5.0, w, 0.0, 0.0], (len(times), 1))
        vehicles.append(Track(1, VEHICLE_EXTENT, parked))
    elif name == "parking":
        station = cfg["obstruction_station"]
        obstacles.append(StaticObject(500, "static-obstacle", (station, 0.0), 0.0, OBSTRUCTION_EXTENT))
        a = station - cfg["swerve_lead_in"]
        lat = lateral_profile([(a, a + cfg["swerve_length"], 0.0, w)])
        vehicles.append(Track(1, VEHICLE_EXTENT, drive(times, 15.0, v0, lat, stop_x=station + 6.0, decel=decel)))
        ego = drive(times, 0.0, v0, stop_x=station - OBSTRUCTION_EXTENT[0] / 2 - gap, decel=decel)
    elif name == "swerving":
        station = cfg["obstruction_station"]
        obstacles.append(StaticObject(500, "static-obstacle", (station, 0.0), 0.0, OBSTRUCTION_EXTENT))
        lat = _swerve(station, w, cfg["swerve_lead_in"], cfg["swerve_length"])
        vehicles.append(Track(1, VEHICLE_EXTENT, drive(times, 15.0, v0, lat)))
        vehicles.append(Track(2, VEHICLE_EXTENT, drive(times, 30.0, v0, lat)))
        ego = drive(times, 0.0, v0, lat)

    return Scenario(
        name=name, seed=int(seed), tick_rate=rate, times=times, ego=ego, vehicles=vehicles,
        obstacles=obstacles, cones=cones, cone_ids=cone_ids, lines=lines, options=dict(options),
    )
