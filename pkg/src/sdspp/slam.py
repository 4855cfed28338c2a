"""Levenberg-Marquardt back-end for the factor graph.

Minimises ``sum_e r_e^T Omega_e r_e`` over AV poses, landmark positions and
line points.  Residuals are *predicted minus measured* for every factor
kind.  Pose and landmark factors use analytic Jacobians; the
implicit-function (line-consistency) factor uses central differences with a
re-fit of the cubic for every perturbation.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from sdspp import se2
from sdspp.implicit_line import line_factor_jacobian, line_factor_residual
from sdspp.world_model import Edge, EdgeKind, FactorGraph, NodeKind


class OptimizationAborted(RuntimeError):
    """The cost became non-finite; the graph was left untouched."""


@dataclass
class OptimizerConfig:
    max_iterations: int = 50
    relative_cost_tolerance: float = 1e-10
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    jacobian_step: float = 1e-6
    # 3L parameters of the implicit-function factor
    d_3l: float = 1.0
    grad_norm_des: float = 1.0
    dense_threshold: int = 200

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("relative_cost_tolerance", "initial_damping", "jacobian_step", "d_3l", "grad_norm_des"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (self.damping_up > 1 and self.damping_down > 1):
            raise ValueError("damping factors must be > 1")


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_by_kind: dict = field(default_factory=dict)
    wall_time: float = 0.0
    # cost before the first and after every accepted step
    cost_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _sqrt_info(info: np.ndarray) -> np.ndarray:
    """Upper factor U with U^T U = information."""
    return np.linalg.cholesky(info).T


def _pose_terms(pose: np.ndarray, target: np.ndarray):
    """Relative position of ``target`` in ``pose`` frames plus both Jacobians.

    pose: (m, 3), target: (m, 2).  Returns pred (m, 2), J_pose (m, 2, 3),
    J_target (m, 2, 2).
    """
    c, s = np.cos(pose[:, 2]), np.sin(pose[:, 2])
    dx = target[:, 0] - pose[:, 0]
    dy = target[:, 1] - pose[:, 1]
    pred = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)
    m = len(pose)
    jp = np.zeros((m, 2, 3))
    jp[:, 0, 0], jp[:, 0, 1], jp[:, 0, 2] = -c, -s, -s * dx + c * dy
    jp[:, 1, 0], jp[:, 1, 1], jp[:, 1, 2] = s, -c, -c * dx - s * dy
    jt = np.zeros((m, 2, 2))
    jt[:, 0, 0], jt[:, 0, 1] = c, s
    jt[:, 1, 0], jt[:, 1, 1] = -s, c
    return pred, jp, jt


class _Problem:
    """Flat state vector and vectorised factor tables for one graph."""

    def __init__(self, graph: FactorGraph, config: OptimizerConfig):
        self.graph = graph
        self.config = config
        self.start: dict[int, int] = {}
        self.size: dict[int, int] = {}
        values, angle_idx = [], []
        n = 0
        for nid in sorted(graph.nodes):
            node = graph.nodes[nid]
            self.start[nid] = n
            if node.kind is NodeKind.AV:
                values.append([node.x, node.y, node.theta or 0.0])
                angle_idx.append(n + 2)
            elif node.kind is NodeKind.LM:
                values.append([node.x, node.y])
            else:
                values.append(node.points.ravel())
            self.size[nid] = len(values[-1])
            n += self.size[nid]
        self.V0 = np.concatenate(values) if values else np.zeros(0)
        self.angle_idx = np.array(angle_idx, dtype=int)

        free = np.ones(n, dtype=bool)
        has_prior = any(e.kind is EdgeKind.PRIOR for e in graph.edges.values())
        av = graph.av_nodes()
        if not has_prior and av:
            s0 = self.start[av[0].id]
            free[s0:s0 + 3] = False
        touched = {i for e in graph.edges.values() for i in e.node_ids}
        for nid, s0 in self.start.items():
            if nid not in touched:
                free[s0:s0 + self.size[nid]] = False
        self.free = free
        self.colmap = np.full(n, -1)
        self.colmap[free] = np.arange(int(free.sum()))
        self.n_free = int(free.sum())
        self._tables()

    def _tables(self):
        odo, lm, lo, pri, lc = [], [], [], [], []
        for eid in sorted(self.graph.edges):
            e = self.graph.edges[eid]
            if e.kind is EdgeKind.ODOMETRY:
                odo.append(e)
            elif e.kind is EdgeKind.LANDMARK:
                lm.append(e)
            elif e.kind is EdgeKind.LINE:
                lo.append(e)
            elif e.kind is EdgeKind.PRIOR:
                pri.append(e)
            else:
                lc.append(e)
        st = self.start
        self.odo = (
            np.array([st[e.node_ids[0]] for e in odo], dtype=int),
            np.array([st[e.node_ids[1]] for e in odo], dtype=int),
            np.array([e.measurement for e in odo]).reshape(-1, 3),
            np.array([_sqrt_info(e.information) for e in odo]).reshape(-1, 3, 3),
        )
        self.lm = (
            np.array([st[e.node_ids[0]] for e in lm], dtype=int),
            np.array([st[e.node_ids[1]] for e in lm], dtype=int),
            np.array([e.measurement for e in lm]).reshape(-1, 2),
            np.array([_sqrt_info(e.information) for e in lm]).reshape(-1, 2, 2),
        )
        pose_idx, pt_idx, zs, us = [], [], [], []
        for e in lo:
            k = len(e.point_index)
            pose_idx.append(np.full(k, st[e.node_ids[0]]))
            pt_idx.append(st[e.node_ids[1]] + 2 * e.point_index)
            zs.append(e.measurement)
            us.append(np.broadcast_to(_sqrt_info(e.information), (k, 2, 2)))
        self.lo = (
            np.concatenate(pose_idx).astype(int) if lo else np.zeros(0, int),
            np.concatenate(pt_idx).astype(int) if lo else np.zeros(0, int),
            np.concatenate(zs) if lo else np.zeros((0, 2)),
            np.concatenate(us) if lo else np.zeros((0, 2, 2)),
        )
        self.pri = (
            np.array([st[e.node_ids[0]] for e in pri], dtype=int),
            np.array([e.measurement for e in pri]).reshape(-1, 3),
            np.array([_sqrt_info(e.information) for e in pri]).reshape(-1, 3, 3),
        )
        self.lc = []
        for e in lc:
            node = self.graph.nodes[e.node_ids[0]]
            w = float(e.information[0, 0])
            self.lc.append((st[node.id], node.x.size, node.segments.copy(), np.sqrt(w)))

    # ------------------------------------------------------------------

    def evaluate(self, V: np.ndarray, jacobian: bool):
        """Whitened residuals per kind and, optionally, the Gauss-Newton system (H, g)."""
        res: dict[str, np.ndarray] = {}
        rows, cols, vals = [], [], []
        row0 = 0

        def emit(kind, e, blocks):
            # blocks: list of (col_start (m,), J (m, r, k)) for this factor kind
            nonlocal row0
            m, r = e.shape
            res[kind] = e.ravel()
            if jacobian:
                rr = row0 + np.arange(m * r).reshape(m, r)
                for c0, J in blocks:
                    k = J.shape[2]
                    cc = c0[:, None, None] + np.arange(k)[None, None, :]
                    rows.append(np.broadcast_to(rr[:, :, None], J.shape).ravel())
                    cols.append(np.broadcast_to(cc, J.shape).ravel())
                    vals.append(J.ravel())
            row0 += m * r

        idx3 = np.arange(3)
        idx2 = np.arange(2)
        # odometry
        I, Jn, z, U = self.odo
        if len(I):
            xi = V[I[:, None] + idx3]
            xj = V[Jn[:, None] + idx3]
            pred, jp, jt = _pose_terms(xi, xj[:, :2])
            r = np.empty((len(I), 3))
            r[:, :2] = pred - z[:, :2]
            r[:, 2] = se2.wrap_angle(xj[:, 2] - xi[:, 2] - z[:, 2])
            Ji = np.zeros((len(I), 3, 3))
            Ji[:, :2, :] = jp
            Ji[:, 2, 2] = -1.0
            Jj = np.zeros((len(I), 3, 3))
            Jj[:, :2, :2] = jt
            Jj[:, 2, 2] = 1.0
            emit(EdgeKind.ODOMETRY.value, np.einsum("mij,mj->mi", U, r),
                 [(I, U @ Ji), (Jn, U @ Jj)] if jacobian else [])
        # landmark observations
        P, L, z, U = self.lm
        if len(P):
            pred, jp, jt = _pose_terms(V[P[:, None] + idx3], V[L[:, None] + idx2])
            emit(EdgeKind.LANDMARK.value, np.einsum("mij,mj->mi", U, pred - z),
                 [(P, U @ jp), (L, U @ jt)] if jacobian else [])
        # line observations, one row pair per point
        P, Q, z, U = self.lo
        if len(P):
            pred, jp, jt = _pose_terms(V[P[:, None] + idx3], V[Q[:, None] + idx2])
            emit(EdgeKind.LINE.value, np.einsum("mij,mj->mi", U, pred - z),
                 [(P, U @ jp), (Q, U @ jt)] if jacobian else [])
        # priors
        I, z, U = self.pri
        if len(I):
            x = V[I[:, None] + idx3]
            r = x - z
            r[:, 2] = se2.wrap_angle(r[:, 2])
            Jp = np.broadcast_to(np.eye(3), (len(I), 3, 3))
            emit(EdgeKind.PRIOR.value, np.einsum("mij,mj->mi", U, r),
                 [(I, U @ Jp)] if jacobian else [])
        # implicit-function factors: dense blocks kept apart from the sparse part
        lc_res, blocks = [], []
        cfg = self.config
        for start, n, segments, sw in self.lc:
            pts = V[start:start + 2 * n].reshape(n, 2)
            if jacobian:
                r, J = line_factor_jacobian(pts, cfg.d_3l, cfg.grad_norm_des, segments, cfg.jacobian_step)
                blocks.append((self.colmap[start:start + 2 * n], sw * J, sw * r))
            else:
                r = line_factor_residual(pts, cfg.d_3l, cfg.grad_norm_des, segments)
            lc_res.append(sw * r)
        if lc_res:
            res[EdgeKind.LINE_CONSISTENCY.value] = np.concatenate(lc_res)

        e = np.concatenate(list(res.values())) if res else np.zeros(0)
        if not jacobian:
            return res, e, None
        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        cols = np.concatenate(cols) if cols else np.zeros(0, int)
        vals = np.concatenate(vals) if vals else np.zeros(0)
        fc = self.colmap[cols]
        keep = fc >= 0
        Js = sp.csr_matrix((vals[keep], (rows[keep], fc[keep])), shape=(row0, self.n_free))
        Jt = Js.T.tocsr()
        H = Jt @ Js
        g = Jt @ e[:row0]
        dense = self.n_free < self.config.dense_threshold
        if dense:
            H = H.toarray()
        hr, hc, hv = [], [], []
        for cmap, J, r in blocks:
            ok = cmap >= 0
            c = cmap[ok]
            Jb = J[:, ok]
            Hb = Jb.T @ Jb
            g[c] += Jb.T @ r
            if dense:
                H[np.ix_(c, c)] += Hb
            else:
                hr.append(np.repeat(c, len(c)))
                hc.append(np.tile(c, len(c)))
                hv.append(Hb.ravel())
        if hr:
            H = H + sp.csr_matrix(
                (np.concatenate(hv), (np.concatenate(hr), np.concatenate(hc))), shape=H.shape
            )
        return res, e, (H, g)

    def step(self, V: np.ndarray, delta: np.ndarray) -> np.ndarray:
        out = V.copy()
        out[self.free] += delta
        if len(self.angle_idx):
            out[self.angle_idx] = se2.wrap_angle(out[self.angle_idx])
        return out

    def write_back(self, V: np.ndarray) -> None:
        for nid, s in self.start.items():
            node = self.graph.nodes[nid]
            if node.kind is NodeKind.AV:
                node.x, node.y, node.theta = float(V[s]), float(V[s + 1]), se2.wrap_angle(V[s + 2])
            elif node.kind is NodeKind.LM:
                node.x, node.y = float(V[s]), float(V[s + 1])
            else:
                node.points = V[s:s + 2 * node.x.size].reshape(-1, 2)


def _solve(H, g: np.ndarray, lam: float, dense: bool) -> np.ndarray:
    if dense:
        Hd = H.toarray() if sp.issparse(H) else H
        d = np.diag(Hd)
        A = Hd + lam * np.diag(np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1.0)))
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), -g)
        except (np.linalg.LinAlgError, ValueError):
            return np.linalg.lstsq(A, -g, rcond=None)[0]
    d = H.diagonal()
    D = sp.diags(lam * np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1.0)))
    return spla.spsolve((H + D).tocsc(), -g)


def _cost_breakdown(res: dict) -> dict:
    return {k: float(v @ v) for k, v in res.items()}


def factor_error(edge: Edge, graph: FactorGraph, config: OptimizerConfig | None = None) -> np.ndarray:
    """Unwhitened residual (predicted minus measured) of one edge at current node values."""
    config = config or OptimizerConfig()
    nodes = graph.nodes
    if edge.kind is EdgeKind.ODOMETRY:
        a, b = (nodes[i].pose for i in edge.node_ids)
        r = se2.between(a, b) - edge.measurement
        r[2] = se2.wrap_angle(r[2])
        return r
    if edge.kind is EdgeKind.LANDMARK:
        pose, lm = nodes[edge.node_ids[0]], nodes[edge.node_ids[1]]
        return se2.inverse_transform_points(pose.pose, lm.position)[0] - edge.measurement
    if edge.kind is EdgeKind.LINE:
        pose, ll = nodes[edge.node_ids[0]], nodes[edge.node_ids[1]]
        pts = ll.points[edge.point_index]
        return (se2.inverse_transform_points(pose.pose, pts) - edge.measurement).ravel()
    if edge.kind is EdgeKind.PRIOR:
        r = nodes[edge.node_ids[0]].pose - edge.measurement
        r[2] = se2.wrap_angle(r[2])
        return r
    ll = nodes[edge.node_ids[0]]
    return line_factor_residual(ll.points, config.d_3l, config.grad_norm_des, ll.segments)


def graph_cost(graph: FactorGraph, config: OptimizerConfig | None = None) -> float:
    config = config or OptimizerConfig()
    problem = _Problem(graph, config)
    _, e, _ = problem.evaluate(problem.V0, jacobian=False)
    return float(e @ e)


def optimize(graph: FactorGraph, config: OptimizerConfig | None = None) -> OptimizationReport:
    """Minimise the graph cost in place; see module docstring for conventions."""
    config = config or OptimizerConfig()
    t0 = time.perf_counter()
    if not graph.av_nodes():
        raise ValueError("graph needs at least one AV node")
    problem = _Problem(graph, config)
    V = problem.V0
    res, e, lin = problem.evaluate(V, jacobian=True)
    cost = float(e @ e)
    if not np.isfinite(cost):
        raise OptimizationAborted(f"non-finite initial cost {cost}")
    initial = cost
    history = [cost]
    dense = problem.n_free < config.dense_threshold
    lam = config.initial_damping
    converged = problem.n_free == 0 or cost == 0.0
    iterations = 0
    while not converged and iterations < config.max_iterations:
        H, g = lin
        if np.abs(g).max(initial=0.0) <= 1e-14 * max(cost, 1.0):
            converged = True
            break
        accepted = False
        while lam < 1e12:
            delta = _solve(H, g, lam, dense)
            V_new = problem.step(V, delta)
            res_new, e_new, _ = problem.evaluate(V_new, jacobian=False)
            cost_new = float(e_new @ e_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= config.damping_up
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        iterations += 1
        decrease = cost - cost_new
        V, cost = V_new, cost_new
        history.append(cost)
        lam = max(lam / config.damping_down, 1e-12)
        if decrease <= config.relative_cost_tolerance * (cost + decrease) or cost <= 1e-24:
            converged = True
            res = res_new
            break
        res, e, lin = problem.evaluate(V, jacobian=True)
    if not np.isfinite(cost):
        raise OptimizationAborted(f"non-finite cost {cost}")
    problem.write_back(V)
    return OptimizationReport(
        initial_cost=initial,
        final_cost=cost,
        iterations=iterations,
        converged=converged,
        cost_by_kind=_cost_breakdown(res),
        wall_time=time.perf_counter() - t0,
        cost_history=history,
    )
