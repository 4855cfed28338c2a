"""Drivability field built from sigmoids of implicit functions.

Every node contributes a unit-amplitude shape (a box, or a fitted lane line
restricted to its observed extent) scaled by a per-class modifier ``delta``;
the field is the sum of the contributions.  Positive values repel, negative
values attract.  One domain-knowledge rule couples nodes: where vehicles were
observed driving, lane-line contributions are scaled by ``1 - coverage``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import expit

from sdspp import se2
from sdspp.implicit_line import (
    BoundaryPair,
    DegenerateFitError,
    ImplicitCubic,
    build_offset_lines,
    evaluate,
    fit_boundary_pair,
    fit_implicit_cubic,
)
from sdspp.world_model import FactorGraph, Node, NodeKind, SemanticClass

MAX_GRID_CELLS = 10_000_000


@dataclass(frozen=True)
class SigmoidParams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("base amplitude alpha must be > 0; use delta for negative fields")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def sigmoid(x, p: SigmoidParams):
    """``alpha / (1 + exp(-beta x))``, evaluated without overflow."""
    return p.alpha * expit(p.beta * np.asarray(x, dtype=float))


def amplitude_correction(a: int, alpha: float = 1.0) -> float:
    """Factor restoring amplitude ``alpha`` at zero for a product of ``a`` sigmoids."""
    if a < 1:
        raise ValueError("a must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    return 2.0 ** a * alpha ** (1 - a)


# ----------------------------------------------------------------------
# boxes and convex shapes


@dataclass(frozen=True)
class BboxSpec:
    center: tuple[float, float]
    theta: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("bbox length and width must be > 0")

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray]:
        """Opposite corners (rear-left, front-right) giving positive edges inside."""
        half = np.array([[-self.length / 2, self.width / 2], [self.length / 2, -self.width / 2]])
        c = se2.transform_points((*self.center, self.theta), half)
        return c[0], c[1]


def bbox_edge(x, y, i: int, spec: BboxSpec):
    """Signed distance to edge ``i``, positive on the interior side."""
    c1, c2 = spec.corners
    xc, yc = c1 if i in (0, 1) else c2
    ang = spec.theta - 0.5 * i * np.pi
    return (np.asarray(x) - xc) * np.cos(ang) + (np.asarray(y) - yc) * np.sin(ang)


def bbox_drivability(x, y, spec: BboxSpec, p: SigmoidParams):
    out = sigmoid(bbox_edge(x, y, 0, spec), p)
    for i in range(1, 4):
        out = out * sigmoid(bbox_edge(x, y, i, spec), p)
    return out


def polygon_drivability(x, y, vertices, p: SigmoidParams):
    """Product of edge sigmoids for a convex polygon with counter-clockwise vertices."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        raise ValueError("polygon needs >= 3 vertices")
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    out = np.ones(np.broadcast(x, y).shape)
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        t = (b - a) / np.linalg.norm(b - a)
        # inward normal of a counter-clockwise polygon is the left normal
        g = (x - a[0]) * -t[1] + (y - a[1]) * t[0]
        out = out * sigmoid(g, p)
    return out


# ----------------------------------------------------------------------
# lines


def line_drivability(x, y, f: ImplicitCubic, bounds: BoundaryPair, p: SigmoidParams):
    fv = evaluate(f, x, y)
    return (
        amplitude_correction(4, p.alpha)
        * sigmoid(fv, p)
        * sigmoid(-fv, p)
        * sigmoid(evaluate(bounds.f_left, x, y), p)
        * sigmoid(evaluate(bounds.f_right, x, y), p)
    )


@dataclass(frozen=True)
class ValidityRegion:
    """Two cap edges bounding a line at its most separated samples.

    ``anchors[k]`` is a cap point and ``directions[k]`` the unit local line
    direction there, oriented toward the other cap.
    """

    anchors: np.ndarray
    directions: np.ndarray

    def edge(self, x, y, k: int):
        a, d = self.anchors[k], self.directions[k]
        return (np.asarray(x) - a[0]) * d[0] + (np.asarray(y) - a[1]) * d[1]

    def value(self, x, y, p: SigmoidParams):
        return sigmoid(self.edge(x, y, 0), p) * sigmoid(self.edge(x, y, 1), p)


def max_separation_pair(points) -> tuple[int, int]:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise ValueError("need >= 2 points")
    d = squareform(pdist(pts))
    i, j = np.unravel_index(int(np.argmax(d)), d.shape)
    return (int(min(i, j)), int(max(i, j)))


def _local_direction(pts: np.ndarray, k: int, toward: np.ndarray, neighbours: int = 4) -> np.ndarray:
    order = np.argsort(np.linalg.norm(pts - pts[k], axis=1))[: max(2, neighbours)]
    local = pts[order] - pts[order].mean(axis=0)
    d = np.linalg.svd(local, full_matrices=False)[2][0]
    if d @ (toward - pts[k]) < 0:
        d = -d
    return d


def validity_region(points, d_3l: float = 1.0, p: SigmoidParams | None = None) -> ValidityRegion:
    """Caps at the max-separation pair, each perpendicular to the local line direction.

    ``d_3l`` and ``p`` are accepted for symmetry with the line fit; the caps
    are pure geometry.
    """
    pts = np.asarray(points, dtype=float)
    i, j = max_separation_pair(pts)
    di = _local_direction(pts, i, pts[j])
    dj = _local_direction(pts, j, pts[i])
    return ValidityRegion(np.array([pts[i], pts[j]]), np.array([di, dj]))


@dataclass(frozen=True)
class LineModel:
    f: ImplicitCubic
    bounds: BoundaryPair
    region: ValidityRegion

    @classmethod
    def from_points(cls, points, d_3l: float, grad_norm_des: float, segments=None) -> "LineModel":
        lines = build_offset_lines(points, d_3l, grad_norm_des, segments)
        f, _ = fit_implicit_cubic(lines)
        return cls(f, fit_boundary_pair(lines), validity_region(points))

    def value(self, x, y, p: SigmoidParams):
        """Unit-amplitude line field restricted to the validity region."""
        return line_drivability(x, y, self.f, self.bounds, p) * self.region.value(x, y, p)


# ----------------------------------------------------------------------
# domain knowledge


@dataclass(frozen=True)
class ClassRule:
    delta: float
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def _default_rules() -> dict:
    return {
        SemanticClass.STATIC_OBSTACLE: ClassRule(1e5, 10.0),
        SemanticClass.MOVING_VEHICLE: ClassRule(1e5, 10.0),
        SemanticClass.CONE: ClassRule(1e4, 10.0),
        SemanticClass.SOLID_LINE: ClassRule(1e3, 5.0),
        SemanticClass.DASHED_LINE: ClassRule(0.0, 5.0),
        SemanticClass.DRIVE_REGION: ClassRule(-50.0, 2.0),
    }


@dataclass(frozen=True)
class DrivabilityRules:
    """Per-class (delta, beta) plus the settings that decide how nodes are drawn.

    A moving-vehicle node uses its class rule only while its speed is below
    ``stopped_speed``; otherwise it is left out of the field.
    """

    rules: dict = field(default_factory=_default_rules)
    default: ClassRule = ClassRule(1e3, 10.0)
    default_extent: tuple[float, float] = (0.5, 0.5)
    stopped_speed: float = 0.5
    d_3l: float = 1.0
    grad_norm_des: float = 1.0
    # observed drive regions clear lane-line repulsion beneath them
    drive_clears_lines: bool = True

    def __post_init__(self):
        rules = {SemanticClass(k): v if isinstance(v, ClassRule) else ClassRule(*v)
                 for k, v in self.rules.items()}
        object.__setattr__(self, "rules", rules)
        static = rules.get(SemanticClass.STATIC_OBSTACLE)
        if static is not None:
            others = [abs(r.delta) for k, r in rules.items()
                      if k not in (SemanticClass.STATIC_OBSTACLE, SemanticClass.MOVING_VEHICLE)]
            if others and not static.delta >= 10 * max(others):
                raise ValueError("static-obstacle delta must dominate every other class")
        region = rules.get(SemanticClass.DRIVE_REGION)
        if region is not None and region.delta > 0:
            raise ValueError("observed-drive-region delta must be <= 0")

    def rule_for(self, node: Node) -> ClassRule:
        if node.semantics is None:
            return self.default
        return self.rules.get(node.semantics.cls, self.default)

    def without_domain_knowledge(self) -> "DrivabilityRules":
        """Same rules with the attractive drive-region term and line clearing switched off."""
        rules = dict(self.rules)
        old = rules.get(SemanticClass.DRIVE_REGION, ClassRule(0.0, 1.0))
        rules[SemanticClass.DRIVE_REGION] = ClassRule(0.0, old.beta)
        return replace(self, rules=rules, drive_clears_lines=False)

    def contributes(self, node: Node) -> bool:
        if node.kind is NodeKind.AV:
            return False
        sem = node.semantics
        if sem is not None and sem.cls is SemanticClass.MOVING_VEHICLE:
            if (sem.speed or 0.0) >= self.stopped_speed:
                return False
        return self.rule_for(node).delta != 0.0


def node_bbox(node: Node, rules: DrivabilityRules) -> BboxSpec:
    extent = node.semantics.extent if node.semantics is not None and node.semantics.extent else None
    length, width = extent if extent is not None else rules.default_extent
    return BboxSpec((node.x, node.y), node.theta or 0.0, length, width)


def bi_gaussian_drivability(node: Node, spread, x, y, amplitude: float = 1.0):
    """Anisotropic Gaussian bump in the node's frame, the usual vehicle baseline."""
    s_long, s_lat = spread
    if not (s_long > 0 and s_lat > 0):
        raise ValueError("spread must be positive")
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    c, s = np.cos(node.theta or 0.0), np.sin(node.theta or 0.0)
    dx, dy = x - node.x, y - node.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return amplitude * np.exp(-0.5 * ((u / s_long) ** 2 + (v / s_lat) ** 2))


def node_drivability(node: Node, rules: DrivabilityRules, x, y):
    """Contribution of one node: ``delta`` times its unit-amplitude shape."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if not rules.contributes(node):
        return np.zeros(np.broadcast(x, y).shape)
    rule = rules.rule_for(node)
    p = SigmoidParams(1.0, rule.beta)
    if node.kind is NodeKind.LL:
        model = LineModel.from_points(node.points, rules.d_3l, rules.grad_norm_des, node.segments)
        return rule.delta * model.value(x, y, p)
    return rule.delta * bbox_drivability(x, y, node_bbox(node, rules), p)


# ----------------------------------------------------------------------
# compiled field


@dataclass
class Grid:
    """Row-major samples at cell centres: ``values[r, c]`` sits at (xs[c], ys[r])."""

    x_min: float
    y_min: float
    resolution: float
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + (np.arange(self.values.shape[1]) + 0.5) * self.resolution

    @property
    def ys(self) -> np.ndarray:
        return self.y_min + (np.arange(self.values.shape[0]) + 0.5) * self.resolution

    def argmax_xy(self) -> tuple[float, float]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return float(self.xs[c]), float(self.ys[r])

    def to_csv(self, path) -> Path:
        path = Path(path)
        X, Y = np.meshgrid(self.xs, self.ys)
        data = np.column_stack([X.ravel(), Y.ravel(), self.values.ravel()])
        header = f"x,y,value\n# x_min={self.x_min!r} y_min={self.y_min!r} resolution={self.resolution!r}"
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return path

    @classmethod
    def from_csv(cls, path) -> "Grid":
        path = Path(path)
        with path.open() as fh:
            fh.readline()
            meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        x_min, y_min, res = float(meta["x_min"]), float(meta["y_min"]), float(meta["resolution"])
        nx = len(np.unique(data[:, 0]))
        values = data[:, 2].reshape(-1, nx)
        return cls(x_min, y_min, res, values)

    def to_pgm(self, path) -> tuple[Path, Path]:
        """16-bit binary graymap (north up) plus a JSON sidecar with the value mapping."""
        path = Path(path)
        lo, hi = float(self.values.min()), float(self.values.max())
        scale = (hi - lo) / 65535.0 if hi > lo else 1.0
        pixels = np.round((self.values - lo) / scale).astype(">u2")[::-1]
        ny, nx = self.values.shape
        with path.open("wb") as fh:
            fh.write(f"P5\n{nx} {ny}\n65535\n".encode("ascii"))
            fh.write(pixels.tobytes())
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "mapping": "value = offset + scale * pixel",
            "offset": lo,
            "scale": scale,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "resolution": self.resolution,
            "rows": ny,
            "cols": nx,
            "row_order": "top row is max y",
        }, indent=2))
        return path, sidecar


def read_pgm(path) -> tuple[np.ndarray, dict]:
    """Decode a graymap written by :meth:`Grid.to_pgm` back into field values."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    nx, ny = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=">u2").reshape(ny, nx)[::-1]
    meta = json.loads(path.with_suffix(".json").read_text())
    return meta["offset"] + meta["scale"] * pixels.astype(float), meta


def grid_shape(extent, resolution: float) -> tuple[int, int]:
    x_min, x_max, y_min, y_max = extent
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    if not (x_max > x_min and y_max > y_min):
        raise ValueError("extent must be (x_min, x_max, y_min, y_max) with positive size")
    nx = max(1, int(np.ceil((x_max - x_min) / resolution - 1e-9)))
    ny = max(1, int(np.ceil((y_max - y_min) / resolution - 1e-9)))
    if nx * ny > MAX_GRID_CELLS:
        raise ValueError(f"grid of {nx}x{ny} cells exceeds {MAX_GRID_CELLS}")
    return ny, nx


class DrivabilityField:
    """Sum of node fields over a graph snapshot, compiled for vectorised evaluation.

    ``obstacle_shape`` selects how positive box nodes are drawn: ``"bbox"``
    (sigmoid box) or ``"bi-gaussian"`` with spreads ``gaussian_scale`` times
    the node extent; the Gaussian form exists only as a comparison baseline.
    """

    def __init__(
        self,
        graph: FactorGraph | None,
        rules: DrivabilityRules | None = None,
        obstacle_shape: str = "bbox",
        gaussian_scale: float = 1.0,
    ):
        if obstacle_shape not in ("bbox", "bi-gaussian"):
            raise ValueError(f"unknown obstacle shape {obstacle_shape!r}")
        self.rules = rules or DrivabilityRules()
        self.obstacle_shape = obstacle_shape
        self.gaussian_scale = gaussian_scale
        self.node_ids: list[int] = []
        boxes, gauss, cover, self.lines = [], [], [], []
        self.failed_lines: list[int] = []
        nodes = [] if graph is None else [graph.nodes[i] for i in sorted(graph.nodes)]
        for node in nodes:
            is_region = node.semantics is not None and node.semantics.cls is SemanticClass.DRIVE_REGION
            if is_region and self.rules.drive_clears_lines and node.kind is not NodeKind.AV:
                spec = node_bbox(node, self.rules)
                cover.append((node.id, spec.center[0], spec.center[1], spec.theta, spec.length,
                              spec.width, self.rules.rule_for(node).beta, 1.0))
            if not self.rules.contributes(node):
                continue
            rule = self.rules.rule_for(node)
            if node.kind is NodeKind.LL:
                try:
                    model = LineModel.from_points(
                        node.points, self.rules.d_3l, self.rules.grad_norm_des, node.segments
                    )
                except (DegenerateFitError, ValueError, np.linalg.LinAlgError):
                    self.failed_lines.append(node.id)
                    continue
                self.lines.append((node.id, model, rule))
            else:
                spec = node_bbox(node, self.rules)
                row = (node.id, spec.center[0], spec.center[1], spec.theta, spec.length,
                       spec.width, rule.beta, rule.delta)
                if obstacle_shape == "bi-gaussian" and rule.delta > 0:
                    gauss.append(row)
                else:
                    boxes.append(row)
            self.node_ids.append(node.id)
        self._boxes = np.array(boxes, dtype=float).reshape(-1, 8)
        self._gauss = np.array(gauss, dtype=float).reshape(-1, 8)
        self._cover = np.array(cover, dtype=float).reshape(-1, 8)

    @property
    def is_empty(self) -> bool:
        return not (len(self._boxes) or len(self._gauss) or self.lines)

    @staticmethod
    def _box_terms(tab: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-box contributions with shape (n_boxes, n_points)."""
        cx, cy, th, L, W, beta, delta = (tab[:, k, None] for k in range(1, 8))
        c, s = np.cos(th), np.sin(th)
        dx, dy = x[None, :] - cx, y[None, :] - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return delta * (
            expit(beta * (u + L / 2)) * expit(beta * (L / 2 - u))
            * expit(beta * (v + W / 2)) * expit(beta * (W / 2 - v))
        )

    def _gauss_terms(self, tab: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        cx, cy, th, L, W, _, delta = (tab[:, k, None] for k in range(1, 8))
        c, s = np.cos(th), np.sin(th)
        dx, dy = x[None, :] - cx, y[None, :] - cy
        u = (c * dx + s * dy) / (self.gaussian_scale * L)
        v = (-s * dx + c * dy) / (self.gaussian_scale * W)
        return delta * np.exp(-0.5 * (u * u + v * v))

    def coverage(self, x, y):
        """Observed-drive coverage in [0, 1]: unit drive-region shapes summed, capped at 1."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        if not len(self._cover):
            return np.zeros(x.shape)
        return np.minimum(1.0, self._box_terms(self._cover, x.ravel(), y.ravel()).sum(axis=0)).reshape(x.shape)

    def _line_scale(self, x: np.ndarray, y: np.ndarray):
        return 1.0 if not len(self._cover) else 1.0 - self.coverage(x, y)

    def node_terms(self, x, y) -> dict[int, np.ndarray]:
        """Contribution of every drawn node, keyed by node id."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        shape = x.shape
        xf, yf = x.ravel(), y.ravel()
        out = {}
        for tab, fn in ((self._boxes, self._box_terms), (self._gauss, self._gauss_terms)):
            if len(tab):
                vals = fn(tab, xf, yf)
                for k, nid in enumerate(tab[:, 0].astype(int)):
                    out[int(nid)] = vals[k].reshape(shape)
        scale = self._line_scale(x, y)
        for nid, model, rule in self.lines:
            out[nid] = rule.delta * model.value(x, y, SigmoidParams(1.0, rule.beta)) * scale
        return out

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        shape = x.shape
        xf, yf = x.ravel(), y.ravel()
        total = np.zeros(xf.size)
        chunk = max(1, 2_000_000 // max(1, len(self._boxes) + len(self._gauss)))
        for a in range(0, xf.size, chunk):
            xs, ys = xf[a:a + chunk], yf[a:a + chunk]
            if len(self._boxes):
                total[a:a + chunk] += self._box_terms(self._boxes, xs, ys).sum(axis=0)
            if len(self._gauss):
                total[a:a + chunk] += self._gauss_terms(self._gauss, xs, ys).sum(axis=0)
        if self.lines:
            scale = self._line_scale(xf, yf)
            for _, model, rule in self.lines:
                total += rule.delta * model.value(xf, yf, SigmoidParams(1.0, rule.beta)) * scale
        if shape == ():
            return float(total[0])
        return total.reshape(shape)

    def gradient(self, x, y, h: float = 1e-4) -> np.ndarray:
        """Central-difference gradient; returns shape (..., 2)."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        xs = np.stack([x + h, x - h, x, x])
        ys = np.stack([y, y, y + h, y - h])
        v = self(xs, ys)
        return np.stack([(v[0] - v[1]) / (2 * h), (v[2] - v[3]) / (2 * h)], axis=-1)

    def sample_grid(self, extent, resolution: float) -> Grid:
        ny, nx = grid_shape(extent, resolution)
        x_min, y_min = float(extent[0]), float(extent[2])
        xs = x_min + (np.arange(nx) + 0.5) * resolution
        ys = y_min + (np.arange(ny) + 0.5) * resolution
        X, Y = np.meshgrid(xs, ys)
        return Grid(x_min, y_min, float(resolution), self(X, Y))


def total_drivability(graph: FactorGraph | None, rules: DrivabilityRules | None, x, y):
    return DrivabilityField(graph, rules)(x, y)


def sample_grid(graph: FactorGraph | None, rules: DrivabilityRules | None, extent, resolution: float) -> Grid:
    return DrivabilityField(graph, rules).sample_grid(extent, resolution)
