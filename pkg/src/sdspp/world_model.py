"""Graph data model: typed nodes, measurement edges and a time-based window.

Nodes follow the ``[kind, x, y, theta, semantics]`` layout: AV poses and
point landmarks (LM) carry one position, line features (LL) carry an ordered
point sequence accumulated over several observations.  Observations bind to
existing nodes by the upstream ``track_id`` only.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, TextIO

import numpy as np

from sdspp import se2

MIN_LINE_POINTS = 4


class GraphError(ValueError):
    """Raised when a measurement cannot be ingested into the graph."""


class NodeKind(str, Enum):
    AV = "AV"
    LM = "LM"
    LL = "LL"


class EdgeKind(str, Enum):
    ODOMETRY = "odometry"
    LANDMARK = "landmark-observation"
    LINE = "line-observation"
    LINE_CONSISTENCY = "line-consistency"
    PRIOR = "prior"


class SemanticClass(str, Enum):
    STATIC_OBSTACLE = "static-obstacle"
    MOVING_VEHICLE = "moving-vehicle"
    CONE = "cone-landmark"
    SOLID_LINE = "solid-lane-line"
    DASHED_LINE = "dashed-lane-line"
    DRIVE_REGION = "observed-drive-region"


LINE_CLASSES = frozenset({SemanticClass.SOLID_LINE, SemanticClass.DASHED_LINE})


@dataclass
class SemanticInfo:
    """Semantic attributes delivered by the upstream fusion layer.

    ``speed`` is the tracker's speed estimate (m/s) and is only meaningful for
    vehicles; it drives the moving/stopped reclassification.
    """

    cls: SemanticClass
    extent: tuple[float, float] | None = None
    track_id: int | None = None
    speed: float | None = None

    def __post_init__(self):
        self.cls = SemanticClass(self.cls)
        if self.extent is not None:
            length, width = (float(v) for v in self.extent)
            if not (length > 0 and width > 0):
                raise GraphError(f"extent must be strictly positive, got {self.extent}")
            self.extent = (length, width)

    def to_dict(self) -> dict:
        return {
            "cls": self.cls.value,
            "extent": list(self.extent) if self.extent is not None else None,
            "track_id": self.track_id,
            "speed": self.speed,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "SemanticInfo | None":
        if d is None:
            return None
        extent = tuple(d["extent"]) if d.get("extent") is not None else None
        return cls(d["cls"], extent, d.get("track_id"), d.get("speed"))


@dataclass
class Node:
    id: int
    kind: NodeKind
    x: float | np.ndarray
    y: float | np.ndarray
    theta: float | None = None
    semantics: SemanticInfo | None = None
    timestamp: float = 0.0
    # LL only: observation time and observation (segment) id of every point
    point_times: np.ndarray | None = None
    segments: np.ndarray | None = None

    def __post_init__(self):
        self.kind = NodeKind(self.kind)
        if self.kind is NodeKind.LL:
            self.x = np.asarray(self.x, dtype=float).copy()
            self.y = np.asarray(self.y, dtype=float).copy()
            if self.x.shape != self.y.shape or self.x.ndim != 1:
                raise GraphError("LL node needs equal-length 1-D point sequences")
            if self.x.size < MIN_LINE_POINTS:
                raise GraphError(f"LL node needs >= {MIN_LINE_POINTS} points, got {self.x.size}")
            n = self.x.size
            self.point_times = (
                np.full(n, float(self.timestamp)) if self.point_times is None
                else np.asarray(self.point_times, dtype=float).copy()
            )
            self.segments = (
                np.zeros(n, dtype=int) if self.segments is None
                else np.asarray(self.segments, dtype=int).copy()
            )
            self.theta = None
        else:
            self.x = float(self.x)
            self.y = float(self.y)
        if self.theta is not None:
            self.theta = se2.wrap_angle(self.theta)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta or 0.0])

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @points.setter
    def points(self, pts) -> None:
        pts = np.asarray(pts, dtype=float)
        self.x = pts[:, 0].copy()
        self.y = pts[:, 1].copy()


@dataclass
class Edge:
    """A measurement constraint.

    For line-observation edges ``information`` is the 2x2 per-point block (the
    full matrix is block diagonal) and ``point_index`` selects the LL points
    the measurement refers to.  For line-consistency edges ``information`` is a
    1x1 isotropic weight applied to every residual entry.
    """

    id: int
    kind: EdgeKind
    node_ids: tuple[int, ...]
    measurement: np.ndarray | None
    information: np.ndarray
    point_index: np.ndarray | None = None

    def __post_init__(self):
        self.kind = EdgeKind(self.kind)
        self.node_ids = tuple(int(i) for i in self.node_ids)
        if self.measurement is not None:
            self.measurement = np.asarray(self.measurement, dtype=float)
        self.information = check_information(self.information)
        if self.point_index is not None:
            self.point_index = np.asarray(self.point_index, dtype=int)


def check_information(matrix) -> np.ndarray:
    """Validate a symmetric positive-definite information matrix."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
        raise GraphError(f"information must be a finite square matrix, got shape {m.shape}")
    if np.abs(m - m.T).max() > 1e-9 * max(1.0, np.abs(m).max()):
        raise GraphError("information matrix is not symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise GraphError("information matrix is not positive definite") from None
    return m


def information_from_covariance(covariance) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    try:
        check_information(cov)
    except GraphError as exc:
        raise GraphError(f"covariance rejected: {exc}") from None
    return check_information(np.linalg.inv(cov))


class FactorGraph:
    """Nodes plus measurement edges, maintained over a sliding time window."""

    def __init__(
        self,
        window_duration: float = 10.0,
        line_information: float = 400.0,
        anchor_information: float = 1e6,
        trail_rate_hz: float = 2.0,
        stopped_speed: float = 0.5,
        origin=(0.0, 0.0, 0.0),
        trail_spacing: float = 0.0,
    ):
        self.window_duration = float(window_duration)
        self.line_information = float(line_information)
        self.anchor_information = float(anchor_information)
        self.trail_rate_hz = float(trail_rate_hz)
        self.stopped_speed = float(stopped_speed)
        self.trail_spacing = float(trail_spacing)
        self.origin = np.asarray(origin, dtype=float)
        self.nodes: dict[int, Node] = {}
        self.edges: dict[int, Edge] = {}
        self._next_node_id = 0
        self._next_edge_id = 0
        # lookup caches; every entry is re-validated before use
        self._tracks: dict[tuple, int] = {}
        self._trail_last: dict[int, float] = {}
        self._info_cache: dict[bytes, np.ndarray] = {}

    # ------------------------------------------------------------------
    # bookkeeping helpers

    def _new_node(self, **kwargs) -> Node:
        node = Node(id=self._next_node_id, **kwargs)
        self.nodes[node.id] = node
        self._next_node_id += 1
        return node

    def _new_edge(self, **kwargs) -> Edge:
        edge = Edge(id=self._next_edge_id, **kwargs)
        self.edges[edge.id] = edge
        self._next_edge_id += 1
        return edge

    def av_nodes(self) -> list[Node]:
        return sorted(
            (n for n in self.nodes.values() if n.kind is NodeKind.AV),
            key=lambda n: (n.timestamp, n.id),
        )

    def latest_pose(self) -> Node | None:
        av = self.av_nodes()
        return av[-1] if av else None

    def edges_of(self, node_id: int, kind: EdgeKind | None = None) -> list[Edge]:
        return [
            e for e in self.edges.values()
            if node_id in e.node_ids and (kind is None or e.kind is kind)
        ]

    @staticmethod
    def _is_track(node: Node, kind: NodeKind, track_id: int) -> bool:
        sem = node.semantics
        return (
            node.kind is kind
            and sem is not None
            and sem.track_id == track_id
            and sem.cls is not SemanticClass.DRIVE_REGION
        )

    def find_track(self, kind: NodeKind, track_id: int) -> Node | None:
        cached = self.nodes.get(self._tracks.get((kind, track_id), -1))
        if cached is not None and self._is_track(cached, kind, track_id):
            return cached
        for node in self.nodes.values():
            if self._is_track(node, kind, track_id):
                self._tracks[(kind, track_id)] = node.id
                return node
        return None

    def _information(self, covariance, shape: tuple, what: str) -> np.ndarray:
        cov = np.asarray(covariance, dtype=float)
        key = cov.tobytes() + str(cov.shape).encode()
        info = self._info_cache.get(key)
        if info is None:
            info = information_from_covariance(cov)
            if len(self._info_cache) < 64:
                self._info_cache[key] = info
        if info.shape != shape:
            raise GraphError(f"{what} covariance must be {shape[0]}x{shape[1]}")
        return info

    def _pose_node(self, pose_id: int) -> Node:
        node = self.nodes.get(pose_id)
        if node is None or node.kind is not NodeKind.AV:
            raise GraphError(f"unknown AV pose id {pose_id}")
        return node

    def snapshot(self) -> "FactorGraph":
        """Deep copy that can be shared read-only with other threads."""
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    # measurement ingestion

    def add_pose(self, timestamp: float, odometry_delta, covariance) -> int:
        """Append an AV pose initialised by odometry composition."""
        info = self._information(covariance, (3, 3), "odometry")
        prev = self.latest_pose()
        if prev is not None and not timestamp > prev.timestamp:
            raise GraphError(
                f"non-monotone timestamp {timestamp} (latest pose at {prev.timestamp})"
            )
        delta = np.asarray(odometry_delta, dtype=float)
        base = prev.pose if prev is not None else self.origin
        x, y, th = se2.compose(base, delta)
        node = self._new_node(kind=NodeKind.AV, x=x, y=y, theta=th, timestamp=float(timestamp))
        if prev is not None:
            self._new_edge(
                kind=EdgeKind.ODOMETRY,
                node_ids=(prev.id, node.id),
                measurement=delta,
                information=info,
            )
        return node.id

    def observe_landmark(
        self,
        pose_id: int,
        relative_position,
        covariance,
        semantics: SemanticInfo | None,
        relative_heading: float | None = None,
    ) -> int:
        """Attach a landmark observation, creating the LM node when the track is new.

        Vehicles are dynamic: a moving-vehicle node keeps only its newest
        observation.  While a vehicle moves faster than ``stopped_speed`` an
        observed-drive-region node is stamped at its position, at most
        ``trail_rate_hz`` times per second and only where no drive-region node
        of any track lies within ``trail_spacing``.
        """
        pose = self._pose_node(pose_id)
        info = self._information(covariance, (2, 2), "landmark")
        rel = np.asarray(relative_position, dtype=float)
        pos = se2.transform_points(pose.pose, rel)[0]
        theta = None if relative_heading is None else se2.wrap_angle(pose.theta + relative_heading)
        node = None
        if semantics is not None and semantics.track_id is not None:
            node = self.find_track(NodeKind.LM, semantics.track_id)
        if node is None:
            node = self._new_node(
                kind=NodeKind.LM, x=pos[0], y=pos[1], theta=theta,
                semantics=copy.copy(semantics), timestamp=pose.timestamp,
            )
        else:
            if semantics.cls is SemanticClass.MOVING_VEHICLE:
                for e in self.edges_of(node.id, EdgeKind.LANDMARK):
                    del self.edges[e.id]
                node.x, node.y = float(pos[0]), float(pos[1])
            node.semantics = copy.copy(semantics)
            node.timestamp = max(node.timestamp, pose.timestamp)
            if theta is not None:
                node.theta = theta
        self._new_edge(
            kind=EdgeKind.LANDMARK, node_ids=(pose.id, node.id), measurement=rel, information=info
        )
        if (
            semantics is not None
            and semantics.cls is SemanticClass.MOVING_VEHICLE
            and (semantics.speed or 0.0) >= self.stopped_speed
        ):
            self._stamp_trail(pose, rel, info, semantics, theta)
        return node.id

    def _stamp_trail(self, pose: Node, rel, info, semantics: SemanticInfo, theta) -> None:
        last = self._trail_last.get(semantics.track_id)
        if last is None:
            last = max(
                (
                    n.timestamp for n in self.nodes.values()
                    if n.semantics is not None
                    and n.semantics.cls is SemanticClass.DRIVE_REGION
                    and n.semantics.track_id == semantics.track_id
                ),
                default=-np.inf,
            )
        if pose.timestamp - last < 1.0 / self.trail_rate_hz - 1e-9:
            return
        pos = se2.transform_points(pose.pose, rel)[0]
        if self.trail_spacing > 0 and any(
            n.semantics is not None
            and n.semantics.cls is SemanticClass.DRIVE_REGION
            and np.hypot(n.x - pos[0], n.y - pos[1]) < self.trail_spacing
            for n in self.nodes.values()
        ):
            return  # keeps the trail's depth independent of how many vehicles drove it
        self._trail_last[semantics.track_id] = pose.timestamp
        trail = self._new_node(
            kind=NodeKind.LM, x=pos[0], y=pos[1], theta=theta,
            semantics=SemanticInfo(
                SemanticClass.DRIVE_REGION, semantics.extent, semantics.track_id
            ),
            timestamp=pose.timestamp,
        )
        self._new_edge(
            kind=EdgeKind.LANDMARK, node_ids=(pose.id, trail.id), measurement=rel, information=info
        )

    def observe_line(self, pose_id: int, points, covariance, semantics: SemanticInfo) -> int:
        """Append observed line points (AV frame) to the LL node of their track."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < MIN_LINE_POINTS:
            raise GraphError(f"line observation needs >= {MIN_LINE_POINTS} (x, y) points")
        pose = self._pose_node(pose_id)
        info = self._information(covariance, (2, 2), "line point")
        map_pts = se2.transform_points(pose.pose, pts)
        node = None
        if semantics is not None and semantics.track_id is not None:
            node = self.find_track(NodeKind.LL, semantics.track_id)
        if node is None:
            node = self._new_node(
                kind=NodeKind.LL, x=map_pts[:, 0], y=map_pts[:, 1],
                semantics=copy.copy(semantics), timestamp=pose.timestamp,
            )
            index = np.arange(len(map_pts))
            self._new_edge(
                kind=EdgeKind.LINE_CONSISTENCY, node_ids=(node.id,), measurement=None,
                information=[[self.line_information]],
            )
        else:
            start = node.x.size
            seg = int(node.segments.max()) + 1
            node.points = np.vstack([node.points, map_pts])
            node.point_times = np.concatenate([node.point_times, np.full(len(map_pts), pose.timestamp)])
            node.segments = np.concatenate([node.segments, np.full(len(map_pts), seg)])
            node.timestamp = max(node.timestamp, pose.timestamp)
            index = np.arange(start, start + len(map_pts))
        self._new_edge(
            kind=EdgeKind.LINE, node_ids=(pose.id, node.id), measurement=pts,
            information=info, point_index=index,
        )
        return node.id

    def add_prior(self, node_id: int, value=None, information=None) -> int:
        node = self._pose_node(node_id)
        value = node.pose if value is None else np.asarray(value, dtype=float)
        if information is None:
            information = np.eye(3) * self.anchor_information
        return self._new_edge(
            kind=EdgeKind.PRIOR, node_ids=(node.id,), measurement=value, information=information
        ).id

    # ------------------------------------------------------------------
    # window maintenance

    def prune_window(self, now: float) -> int:
        """Drop nodes older than the window; return the number of removed nodes."""
        cutoff = now - self.window_duration
        av = self.av_nodes()
        newest = av[-1].id if av else None
        removed: set[int] = set()
        for node in list(self.nodes.values()):
            if node.id == newest:
                continue
            if node.kind is NodeKind.LL:
                keep = node.point_times >= cutoff
                if keep.all():
                    continue
                if keep.sum() < MIN_LINE_POINTS:
                    removed.add(node.id)
                    continue
                self._trim_line(node, keep)
            elif node.timestamp < cutoff:
                removed.add(node.id)
        pose_removed = any(self.nodes[i].kind is NodeKind.AV for i in removed)
        for nid in removed:
            del self.nodes[nid]
        for e in list(self.edges.values()):
            if any(i in removed for i in e.node_ids):
                del self.edges[e.id]
        if pose_removed:
            oldest = self.av_nodes()[0]
            if not self.edges_of(oldest.id, EdgeKind.PRIOR):
                self.add_prior(oldest.id)
        return len(removed)

    def _trim_line(self, node: Node, keep: np.ndarray) -> None:
        remap = np.full(keep.size, -1)
        remap[keep] = np.arange(int(keep.sum()))
        node.points = node.points[keep]
        node.point_times = node.point_times[keep]
        node.segments = node.segments[keep]
        for e in self.edges_of(node.id, EdgeKind.LINE):
            mask = keep[e.point_index]
            if not mask.any():
                del self.edges[e.id]
                continue
            e.measurement = e.measurement[mask]
            e.point_index = remap[e.point_index[mask]]

    # ------------------------------------------------------------------
    # validation and serialisation

    def audit(self) -> None:
        """Raise GraphError when an edge references a missing node or point."""
        for e in self.edges.values():
            for nid in e.node_ids:
                if nid not in self.nodes:
                    raise GraphError(f"edge {e.id} ({e.kind.value}) references missing node {nid}")
            if e.kind is EdgeKind.LINE:
                ll = self.nodes[e.node_ids[1]]
                if e.point_index.max(initial=-1) >= ll.x.size or len(e.point_index) != len(e.measurement):
                    raise GraphError(f"edge {e.id} references missing line points")
        for node in self.nodes.values():
            if node.kind is NodeKind.LL and node.x.size < MIN_LINE_POINTS:
                raise GraphError(f"LL node {node.id} has fewer than {MIN_LINE_POINTS} points")

    def dump_jsonl(self, fh: TextIO) -> None:
        for record in self.to_records():
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def to_records(self) -> Iterable[dict]:
        yield {
            "type": "graph",
            "window_duration": self.window_duration,
            "line_information": self.line_information,
            "anchor_information": self.anchor_information,
            "trail_rate_hz": self.trail_rate_hz,
            "stopped_speed": self.stopped_speed,
            "trail_spacing": self.trail_spacing,
            "origin": self.origin.tolist(),
            "next_node_id": self._next_node_id,
            "next_edge_id": self._next_edge_id,
        }
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            rec = {
                "type": "node", "kind": n.kind.value, "id": n.id,
                "x": n.x.tolist() if n.kind is NodeKind.LL else n.x,
                "y": n.y.tolist() if n.kind is NodeKind.LL else n.y,
                "theta": n.theta, "timestamp": n.timestamp,
                "semantics": n.semantics.to_dict() if n.semantics else None,
            }
            if n.kind is NodeKind.LL:
                rec["point_times"] = n.point_times.tolist()
                rec["segments"] = n.segments.tolist()
            yield rec
        for eid in sorted(self.edges):
            e = self.edges[eid]
            yield {
                "type": "edge", "kind": e.kind.value, "id": e.id,
                "node_ids": list(e.node_ids),
                "measurement": None if e.measurement is None else e.measurement.tolist(),
                "information": e.information.tolist(),
                "point_index": None if e.point_index is None else e.point_index.tolist(),
            }

    @classmethod
    def load_jsonl(cls, fh: TextIO) -> "FactorGraph":
        graph = None
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "graph":
                graph = cls(
                    rec["window_duration"], rec["line_information"], rec["anchor_information"],
                    rec["trail_rate_hz"], rec["stopped_speed"], rec["origin"],
                    rec.get("trail_spacing", 0.0),
                )
                graph._next_node_id = rec["next_node_id"]
                graph._next_edge_id = rec["next_edge_id"]
            elif graph is None:
                raise GraphError("missing graph header record")
            elif rec["type"] == "node":
                node = Node(
                    id=rec["id"], kind=rec["kind"], x=rec["x"], y=rec["y"], theta=rec["theta"],
                    semantics=SemanticInfo.from_dict(rec["semantics"]), timestamp=rec["timestamp"],
                    point_times=rec.get("point_times"), segments=rec.get("segments"),
                )
                graph.nodes[node.id] = node
            elif rec["type"] == "edge":
                edge = Edge(
                    id=rec["id"], kind=rec["kind"], node_ids=rec["node_ids"],
                    measurement=rec["measurement"], information=rec["information"],
                    point_index=rec["point_index"],
                )
                graph.edges[edge.id] = edge
            else:
                raise GraphError(f"unknown record type {rec['type']!r}")
        if graph is None:
            raise GraphError("missing graph header record")
        graph.audit()
        return graph
