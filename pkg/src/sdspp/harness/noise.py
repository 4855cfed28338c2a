"""Seeded sensor simulation: ground truth differenced into noisy measurements."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from sdspp import se2
from sdspp.harness.config import default_config
from sdspp.harness.scenarios import Scenario

NOISE_LEVELS = (0.1, 0.2, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise; each multiplier scales the matching baseline sigma."""

    sigma_position: float = 0.2
    sigma_heading: float = 0.01
    odometry_multiplier: float = 1.0
    landmark_multiplier: float = 0.25
    line_multiplier: float = 0.25
    seed: int = 0
    # smallest standard deviation written into covariances, keeps them invertible
    covariance_floor_position: float = 1e-3
    covariance_floor_heading: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_position", "sigma_heading", "odometry_multiplier",
                     "landmark_multiplier", "line_multiplier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.covariance_floor_position > 0 and self.covariance_floor_heading > 0):
            raise ValueError("covariance floors must be > 0")

    @classmethod
    def from_config(cls, cfg: dict | None = None, **kw) -> "NoiseSpec":
        section = dict(default_config()["noise"])
        section.update((cfg or {}).get("noise", {}))
        section.update(kw)
        return cls(**section)

    def with_level(self, level: float, seed: int | None = None) -> "NoiseSpec":
        return replace(self, odometry_multiplier=level, seed=self.seed if seed is None else seed)

    @property
    def odometry_std(self) -> np.ndarray:
        return np.array([self.odometry_multiplier * self.sigma_position] * 2
                        + [self.odometry_multiplier * self.sigma_heading])

    @property
    def odometry_covariance(self) -> np.ndarray:
        std = np.maximum(self.odometry_std, [self.covariance_floor_position] * 2 + [self.covariance_floor_heading])
        return np.diag(std**2)

    @property
    def landmark_std(self) -> float:
        return self.landmark_multiplier * self.sigma_position

    @property
    def landmark_covariance(self) -> np.ndarray:
        return np.eye(2) * max(self.landmark_std, self.covariance_floor_position) ** 2

    @property
    def line_std(self) -> float:
        return self.line_multiplier * self.sigma_position

    @property
    def line_covariance(self) -> np.ndarray:
        return np.eye(2) * max(self.line_std, self.covariance_floor_position) ** 2


@dataclass
class LandmarkObs:
    track_id: int
    cls: str
    relative: np.ndarray
    extent: tuple | None = None
    speed: float | None = None
    relative_heading: float | None = None


@dataclass
class LineObs:
    track_id: int
    cls: str
    points: np.ndarray


@dataclass
class TickMeasurements:
    index: int
    time: float
    odometry: np.ndarray | None
    landmarks: list = field(default_factory=list)
    lines: list = field(default_factory=list)


@dataclass
class MeasurementStream:
    ticks: list
    odometry_covariance: np.ndarray
    landmark_covariance: np.ndarray
    line_covariance: np.ndarray
    spec: NoiseSpec


def _sensor_cfg(cfg: dict | None) -> dict:
    section = dict(default_config()["sensors"])
    section.update((cfg or {}).get("sensors", {}))
    return section


def inject_noise(scenario: Scenario, spec: NoiseSpec, config: dict | None = None) -> MeasurementStream:
    """Simulate odometry, object and lane-line measurements for every tick.

    Noise draws come from a single generator seeded with ``spec.seed`` and
    are drawn in a fixed order, so equal inputs give equal streams.  The
    odometry draw for every tick happens before any observation draw, so the
    odometry noise is identical across sensor configurations.
    """
    sens = _sensor_cfg(config)
    rng_odo = np.random.default_rng([spec.seed, 0])
    rng_obs = np.random.default_rng([spec.seed, 1])
    ego = scenario.ego
    poses = ego[:, :3]
    odo_std = spec.odometry_std
    line_every = max(1, int(round(scenario.tick_rate / sens["line_rate"]))) if sens["line_rate"] > 0 else 0
    ahead = np.asarray(sens["line_ahead"], dtype=float)
    ticks = []
    for k, t in enumerate(scenario.times):
        pose = poses[k]
        odo = None
        if k > 0:
            odo = se2.between(poses[k - 1], pose) + rng_odo.normal(0.0, 1.0, 3) * odo_std
            odo[2] = se2.wrap_angle(odo[2])
        tick = TickMeasurements(k, float(t), odo)

        def visible(p):
            rel = se2.inverse_transform_points(pose, p)[0]
            return np.hypot(*rel) <= sens["landmark_range"] and rel[0] >= -sens["landmark_behind"], rel

        for cid, c in zip(scenario.cone_ids, scenario.cones):
            ok, rel = visible(c)
            if ok:
                tick.landmarks.append(LandmarkObs(
                    cid, "cone-landmark", rel + rng_obs.normal(0.0, spec.landmark_std, 2),
                    tuple(sens["cone_extent"]),
                ))
        for ob in scenario.obstacles:
            ok, rel = visible(np.asarray(ob.center))
            if ok:
                tick.landmarks.append(LandmarkObs(
                    ob.track_id, ob.cls, rel + rng_obs.normal(0.0, spec.landmark_std, 2), tuple(ob.extent),
                    relative_heading=se2.wrap_angle(ob.theta - pose[2]),
                ))
        for veh in scenario.vehicles:
            st = veh.states[k]
            ok, rel = visible(st[:2])
            if ok:
                tick.landmarks.append(LandmarkObs(
                    veh.track_id, "moving-vehicle", rel + rng_obs.normal(0.0, spec.landmark_std, 2),
                    tuple(veh.extent), speed=float(st[3]),
                    relative_heading=se2.wrap_angle(st[2] - pose[2]),
                ))
        if line_every and k % line_every == 0:
            for line in scenario.lines:
                # sample the line at fixed distances ahead along the road axis
                xs = pose[0] + ahead
                pts = np.column_stack([xs, line.y_at(xs)])
                rel = se2.inverse_transform_points(pose, pts)
                if np.abs(rel[:, 1]).min() > sens["line_lateral_range"]:
                    continue
                tick.lines.append(LineObs(
                    line.track_id, line.cls, rel + rng_obs.normal(0.0, spec.line_std, rel.shape)
                ))
        ticks.append(tick)
    return MeasurementStream(
        ticks, spec.odometry_covariance, spec.landmark_covariance, spec.line_covariance, spec
    )
