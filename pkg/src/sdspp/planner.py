"""Model-predictive trajectory planner over a kinematic bicycle.

The stage cost penalises inputs, deviation from a reference state and the
drivability ``D(x, y)`` at every state point; a terminal cost pulls the
final state toward a goal ahead.  Inputs are optimised by a projected
Levenberg-Marquardt (damped Gauss-Newton) iteration started from a small set
of heuristic manoeuvres.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

STATE_FIELDS = ("x", "y", "psi", "v", "delta")
INPUT_FIELDS = ("a", "ddelta")


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0
    delta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v, self.delta], dtype=float)

    @classmethod
    def from_array(cls, s) -> "VehicleState":
        return cls(*(float(v) for v in s))


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    ddelta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.ddelta], dtype=float)


@dataclass(frozen=True)
class MptpParams:
    horizon: int = 40
    sample_time: float = 0.2
    input_weights: tuple = (4.0, 10.0)
    reference_weights: tuple = (0.0, 0.0, 0.0, 0.1, 0.0)
    terminal_weights: tuple = (3.0, 2.0, 10.0, 10.0, 0.0)
    reference_state: tuple = (0.0, 0.0, 0.0, 3.0, 0.0)
    # terminal speed target; None uses the reference speed
    terminal_speed: float | None = None
    goal_offset: float = 15.0
    goal_speed_factor: float = 0.5
    car_length: float = 4.0
    w_d: float = 1.0
    # look-ahead samples past the horizon end for the continuation term
    tail_steps: int | None = None
    # rises smaller than this are ignored by the continuation term, so leaving
    # an attractive region is free while obstacles and line ridges still count
    tail_deadband: float = 500.0
    accel_limits: tuple = (-5.0, 1.0)
    steer_rate_limits: tuple = (-0.2, 0.2)
    steer_limits: tuple = (-0.5, 0.5)
    speed_limits: tuple = (0.0, 10.0)
    max_iterations: int = 60
    # short refinement given to every start before the best few are refined fully
    screen_iterations: int = 6
    refine_candidates: int = 3
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.tail_deadband < 0:
            raise ValueError("tail_deadband must be >= 0")
        if self.horizon < 1 or not self.sample_time > 0:
            raise ValueError("horizon >= 1 and sample_time > 0 required")
        if not self.car_length > 0:
            raise ValueError("car_length must be > 0")
        for lo, hi in (self.accel_limits, self.steer_rate_limits, self.steer_limits, self.speed_limits):
            if not lo <= hi:
                raise ValueError("limits must satisfy min <= max")

    @property
    def n_tail(self) -> int:
        return self.horizon if self.tail_steps is None else int(self.tail_steps)

    def goal_x(self, s0: np.ndarray) -> float:
        return float(s0[0] + self.goal_offset + self.goal_speed_factor * s0[3] * self.sample_time * self.horizon)

    def terminal_state(self, s0: np.ndarray) -> np.ndarray:
        v = self.reference_state[3] if self.terminal_speed is None else self.terminal_speed
        return np.array([self.goal_x(s0), 0.0, 0.0, v, 0.0])


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    sample_time: float
    cost: float = float("nan")
    breakdown: dict = field(default_factory=dict)
    stage_costs: np.ndarray | None = None
    failed: bool = False
    iterations: int = 0

    def state(self, k: int) -> VehicleState:
        return VehicleState.from_array(self.states[k])

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.sample_time

    def to_csv(self, path) -> Path:
        path = Path(path)
        stage = self.stage_costs if self.stage_costs is not None else np.full(len(self.states), np.nan)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *STATE_FIELDS, *INPUT_FIELDS, "stage_cost"])
            for k, s in enumerate(self.states):
                u = self.inputs[k] if k < len(self.inputs) else (0.0, 0.0)
                w.writerow([repr(float(v)) for v in (k * self.sample_time, *s, *u, stage[k])])
        return path

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 0.0
        return cls(states=data[:, 1:6], inputs=data[:-1, 6:8], sample_time=dt, stage_costs=data[:, 8])


Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _limits(params: MptpParams):
    lo = np.array([params.accel_limits[0], params.steer_rate_limits[0]])
    hi = np.array([params.accel_limits[1], params.steer_rate_limits[1]])
    return lo, hi


def bicycle_step(s: VehicleState, u: ControlInput, t_s: float, params: MptpParams | None = None) -> VehicleState:
    """Forward-Euler kinematic bicycle step with state limits clamped."""
    params = params or MptpParams()
    nxt, _, _ = _step(s.as_array(), u.as_array(), t_s, params, jacobian=False)
    return VehicleState.from_array(nxt)


def _step(s: np.ndarray, u: np.ndarray, t_s: float, params: MptpParams, jacobian: bool):
    x, y, psi, v, d = s
    a, dd = u
    c, sn, tn = np.cos(psi), np.sin(psi), np.tan(d)
    L = params.car_length
    v_raw = v + t_s * a
    d_raw = d + t_s * dd
    nxt = np.array([
        x + t_s * v * c,
        y + t_s * v * sn,
        psi + t_s * v * tn / L,
        min(max(v_raw, params.speed_limits[0]), params.speed_limits[1]),
        min(max(d_raw, params.steer_limits[0]), params.steer_limits[1]),
    ])
    if not jacobian:
        return nxt, None, None
    A = np.eye(5)
    A[0, 2], A[0, 3] = -t_s * v * sn, t_s * c
    A[1, 2], A[1, 3] = t_s * v * c, t_s * sn
    A[2, 3], A[2, 4] = t_s * tn / L, t_s * v / (L * np.cos(d) ** 2)
    B = np.zeros((5, 2))
    B[3, 0] = t_s
    B[4, 1] = t_s
    if not params.speed_limits[0] <= v_raw <= params.speed_limits[1]:
        A[3, :] = 0.0
        B[3, :] = 0.0
    if not params.steer_limits[0] <= d_raw <= params.steer_limits[1]:
        A[4, :] = 0.0
        B[4, :] = 0.0
    return nxt, A, B


def rollout(s0, inputs, params: MptpParams, jacobian: bool = False):
    """Simulate ``inputs``; optionally return ``dS[k] = d states[k] / d inputs`` (5, N, 2)."""
    s0 = np.asarray(s0, dtype=float)
    U = np.asarray(inputs, dtype=float)
    N = len(U)
    states = np.empty((N + 1, 5))
    states[0] = s0
    sens = np.zeros((N + 1, 5, N, 2)) if jacobian else None
    for k in range(N):
        states[k + 1], A, B = _step(states[k], U[k], params.sample_time, params, jacobian)
        if jacobian:
            sens[k + 1] = np.einsum("ij,jnm->inm", A, sens[k])
            sens[k + 1][:, k, :] += B
    return states, sens


def _heading_points(states: np.ndarray, params: MptpParams) -> np.ndarray:
    """Continuation samples ahead of the final state, shape (n_tail, 2)."""
    x, y, psi, v = states[-1, :4]
    j = np.arange(1, params.n_tail + 1) * params.sample_time * v
    return np.column_stack([x + j * np.cos(psi), y + j * np.sin(psi)])


def _tail_from_terminal(field_fn: Field, term: np.ndarray, params: MptpParams) -> np.ndarray:
    """Continuation cost for a batch of terminal (x, y, psi, v) rows."""
    term = np.atleast_2d(term)
    j = np.arange(1, params.n_tail + 1)[None, :] * params.sample_time * term[:, 3:4]
    px = term[:, 0:1] + j * np.cos(term[:, 2:3])
    py = term[:, 1:2] + j * np.sin(term[:, 2:3])
    d_end = field_fn(term[:, 0], term[:, 1])
    d_ahead = field_fn(px, py)
    rise = d_ahead - np.asarray(d_end)[:, None]
    return np.maximum(0.0, rise - params.tail_deadband).sum(axis=1)


def trajectory_cost(traj_or_states, inputs, params: MptpParams, field_fn: Field | None, s0=None):
    """Total cost, per-term breakdown and per-stage costs.

    The drivability term sums ``w_d D`` over all N+1 state points plus a
    continuation term that penalises rising drivability along the final
    heading for ``tail_steps`` samples past the horizon.
    """
    states = traj_or_states.states if isinstance(traj_or_states, Trajectory) else np.asarray(traj_or_states)
    U = np.asarray(inputs, dtype=float)
    s0 = states[0] if s0 is None else np.asarray(s0, dtype=float)
    wu = np.asarray(params.input_weights)
    wr = np.asarray(params.reference_weights)
    wt = np.asarray(params.terminal_weights)
    ref = np.asarray(params.reference_state)
    term = params.terminal_state(s0)
    stage = np.zeros(len(states))
    inp = (U * U) @ wu
    stage[:-1] += inp
    e = states - ref
    refc = (e * e) @ wr
    stage += refc
    et = states[-1] - term
    terminal = float(et @ (wt * et))
    stage[-1] += terminal
    if field_fn is not None and params.w_d != 0.0:
        d = np.asarray(field_fn(states[:, 0], states[:, 1]), dtype=float)
        tail = float(_tail_from_terminal(field_fn, states[-1, :4], params)[0]) if params.n_tail else 0.0
        drv = params.w_d * d
        stage += drv
        stage[-1] += params.w_d * tail
        drive_total = float(drv.sum() + params.w_d * tail)
    else:
        drive_total = 0.0
    breakdown = {
        "input": float(inp.sum()),
        "reference": float(refc.sum()),
        "terminal": terminal,
        "drivability": drive_total,
    }
    return float(sum(breakdown.values())), breakdown, stage


def _psd2(h: np.ndarray) -> np.ndarray:
    """Project a batch of symmetric 2x2 (or nxn) matrices onto the PSD cone."""
    w, V = np.linalg.eigh(h)
    return np.einsum("...ij,...j,...kj->...ik", V, np.maximum(w, 0.0), V)


def field_derivatives(field_fn: Field, x, y, h: float = 1e-3):
    """Central-difference gradient (n, 2) and Hessian (n, 2, 2) of the field."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ox = np.array([0, h, -h, 0, 0, h, h, -h, -h])
    oy = np.array([0, 0, 0, h, -h, h, -h, h, -h])
    v = np.asarray(field_fn(x[None, :] + ox[:, None], y[None, :] + oy[:, None]), dtype=float)
    g = np.stack([(v[1] - v[2]) / (2 * h), (v[3] - v[4]) / (2 * h)], axis=-1)
    hxx = (v[1] - 2 * v[0] + v[2]) / h**2
    hyy = (v[3] - 2 * v[0] + v[4]) / h**2
    hxy = (v[5] - v[6] - v[7] + v[8]) / (4 * h * h)
    H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
    return g, H


def _tail_derivatives(field_fn: Field, term: np.ndarray, params: MptpParams, h: float):
    """FD gradient and PSD Hessian of the continuation cost w.r.t. (x, y, psi, v)."""
    n = 4
    steps = np.array([h, h, h * 0.1, h])
    pts = [term]
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        pts += [term + e, term - e]
    for i in range(n):
        for j in range(i + 1, n):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                e = np.zeros(n)
                e[i], e[j] = si * steps[i], sj * steps[j]
                pts.append(term + e)
    vals = _tail_from_terminal(field_fn, np.array(pts), params)
    f0 = vals[0]
    g = np.empty(n)
    H = np.empty((n, n))
    for i in range(n):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        g[i] = (fp - fm) / (2 * steps[i])
        H[i, i] = (fp - 2 * f0 + fm) / steps[i] ** 2
    k = 1 + 2 * n
    for i in range(n):
        for j in range(i + 1, n):
            pp, pm, mp, mm = vals[k:k + 4]
            k += 4
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * steps[i] * steps[j])
    return g, _psd2(H)


class _Objective:
    def __init__(self, s0: np.ndarray, field_fn: Field | None, params: MptpParams):
        self.s0 = s0
        self.field = field_fn
        self.params = params
        self.wu = np.asarray(params.input_weights, dtype=float)
        self.wr = np.asarray(params.reference_weights, dtype=float)
        self.wt = np.asarray(params.terminal_weights, dtype=float)
        self.ref = np.asarray(params.reference_state, dtype=float)
        self.term = params.terminal_state(s0)
        self.use_field = field_fn is not None and params.w_d != 0.0

    def cost(self, U: np.ndarray) -> float:
        states, _ = rollout(self.s0, U, self.params)
        c, _, _ = trajectory_cost(states, U, self.params, self.field, self.s0)
        return c

    def model(self, U: np.ndarray):
        """Cost, gradient and PSD Gauss-Newton Hessian over the flattened inputs."""
        p = self.params
        N = len(U)
        states, S = rollout(self.s0, U, p, jacobian=True)
        cost, _, _ = trajectory_cost(states, U, p, self.field, self.s0)
        Sf = S.reshape(N + 1, 5, 2 * N)
        g = (2.0 * self.wu * U).ravel()
        H = np.diag(np.tile(2.0 * self.wu, N))
        e = states - self.ref
        g += np.einsum("kin,ki->n", Sf, 2.0 * self.wr * e)
        H += np.einsum("kin,i,kim->nm", Sf, 2.0 * self.wr, Sf)
        et = states[-1] - self.term
        g += Sf[-1].T @ (2.0 * self.wt * et)
        H += Sf[-1].T @ (2.0 * self.wt[:, None] * Sf[-1])
        if self.use_field:
            gd, Hd = field_derivatives(self.field, states[:, 0], states[:, 1], p.fd_step)
            Hd = _psd2(Hd)
            P = Sf[:, :2, :]
            g += p.w_d * np.einsum("kin,ki->n", P, gd)
            H += p.w_d * np.einsum("kin,kij,kjm->nm", P, Hd, P)
            if p.n_tail:
                gt, Ht = _tail_derivatives(self.field, states[-1, :4], p, p.fd_step)
                T = Sf[-1, :4, :]
                g += p.w_d * T.T @ gt
                H += p.w_d * T.T @ Ht @ T
        return cost, g, H


def _project(U: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.clip(U, lo, hi)


def _refine(obj: _Objective, U0: np.ndarray, params: MptpParams):
    lo, hi = _limits(params)
    U = _project(U0, lo, hi)
    N = len(U)
    lo_f, hi_f = np.tile(lo, N), np.tile(hi, N)
    cost, g, H = obj.model(U)
    if not np.isfinite(cost):
        return U, cost, 0
    lam = 1e-3
    it = 0
    for it in range(1, params.max_iterations + 1):
        u = U.ravel()
        # variables pinned at a bound with the gradient pushing outward stay fixed
        active = ((u <= lo_f + 1e-12) & (g > 0)) | ((u >= hi_f - 1e-12) & (g < 0))
        free = ~active
        if not free.any():
            break
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        diag = np.maximum(np.diag(Hf), 1e-6)
        improved = False
        while lam < 1e10:
            try:
                step = np.linalg.solve(Hf + lam * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = u.copy()
            cand[free] += step
            Uc = _project(cand.reshape(N, 2), lo, hi)
            c_new = obj.cost(Uc)
            if np.isfinite(c_new) and c_new < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        decrease = cost - c_new
        U = Uc
        lam = max(lam / 10.0, 1e-9)
        cost, g, H = obj.model(U)
        if decrease <= 1e-9 * max(abs(cost), 1.0):
            break
    return U, cost, it


def _maneuver(s0: np.ndarray, params: MptpParams, y_targets, accel: float, switch: int | None):
    """Inputs from a simple tracking controller: hold a speed policy and steer to ``y_targets``.

    ``y_targets`` is (first, second) lateral target; the second applies from
    step ``switch`` on.  ``accel`` < 0 brakes at that rate, otherwise the
    speed tracks the reference.
    """
    lo, hi = _limits(params)
    N, ts = params.horizon, params.sample_time
    v_ref = params.reference_state[3]
    s = s0.copy()
    U = np.zeros((N, 2))
    for k in range(N):
        yt = y_targets[0] if switch is None or k < switch else y_targets[1]
        a = accel if accel < 0 else (v_ref - s[3]) / ts
        psi_des = np.clip(0.35 * (yt - s[1]), -0.35, 0.35)
        d_des = np.clip(1.5 * (psi_des - s[2]), *params.steer_limits)
        U[k] = np.clip([a, (d_des - s[4]) / ts], lo, hi)
        s, _, _ = _step(s, U[k], ts, params, jacobian=False)
    return U


def candidate_families(s0: np.ndarray, params: MptpParams) -> list[list[np.ndarray]]:
    """Heuristic starting manoeuvres grouped by lateral intent (keep lane, change lane,
    swerve and return), each family holding cruise and braking variants."""
    y0 = float(s0[1])
    half = params.horizon // 2
    lateral = [((y0, y0), None), ((0.0, 0.0), None), ((3.5, 3.5), None), ((-3.5, -3.5), None),
               ((3.5, 0.0), half), ((-3.5, 0.0), half)]
    accels = [0.0, -0.3, -0.6, -1.2, -2.5]
    return [[_maneuver(s0, params, yt, a, sw) for a in accels] for yt, sw in lateral]


def candidate_inputs(s0: np.ndarray, params: MptpParams) -> list[np.ndarray]:
    return [U for fam in candidate_families(s0, params) for U in fam]


def braking_trajectory(s0, params: MptpParams, field_fn: Field | None) -> Trajectory:
    U = np.zeros((params.horizon, 2))
    U[:, 0] = params.accel_limits[0]
    states, _ = rollout(s0, U, params)
    with np.errstate(all="ignore"):
        cost, breakdown, stage = trajectory_cost(states, U, params, field_fn, s0)
    return Trajectory(states, U, params.sample_time, cost, breakdown, stage, failed=True)


def plan(
    s0: VehicleState | np.ndarray,
    field_fn: Field | None,
    params: MptpParams | None = None,
    warm_start: Trajectory | np.ndarray | None = None,
) -> Trajectory:
    """Plan inputs that (locally) minimise the trajectory cost; deterministic."""
    params = params or MptpParams()
    s0 = s0.as_array() if isinstance(s0, VehicleState) else np.asarray(s0, dtype=float)
    lo_s = np.array([-np.inf, -np.inf, -np.inf, params.speed_limits[0], params.steer_limits[0]])
    hi_s = np.array([np.inf, np.inf, np.inf, params.speed_limits[1], params.steer_limits[1]])
    if np.any(s0 < lo_s - 1e-12) or np.any(s0 > hi_s + 1e-12):
        raise ValueError("initial state outside state limits")
    obj = _Objective(s0, field_fn, params)
    lo, hi = _limits(params)
    with np.errstate(over="ignore", invalid="ignore"):
        # every start gets a short refinement, since an unrefined start says
        # little about the basin it leads into
        starts = [U for U in candidate_inputs(s0, params) if np.isfinite(obj.cost(U))]
        if warm_start is not None:
            W = warm_start.inputs if isinstance(warm_start, Trajectory) else np.asarray(warm_start, dtype=float)
            if W.shape != (params.horizon, 2):
                raise ValueError("warm start has the wrong shape")
            starts.insert(0, _project(W, lo, hi))
        screen = replace(params, max_iterations=params.screen_iterations)
        screened = []
        for U0 in starts:
            U, c, its = _refine(obj, U0, screen)
            if np.isfinite(c):
                screened.append((c, len(screened), U, its))
        screened.sort(key=lambda t: t[:2])
        best = None
        for c0, _, U0, its0 in screened[: params.refine_candidates]:
            U, c, its = _refine(obj, U0, params)
            if np.isfinite(c) and (best is None or c < best[1]):
                best = (U, c, its0 + its)
    if best is None:
        return braking_trajectory(s0, params, field_fn)
    U, _, its = best
    states, _ = rollout(s0, U, params)
    cost, breakdown, stage = trajectory_cost(states, U, params, field_fn, s0)
    return Trajectory(states, U, params.sample_time, cost, breakdown, stage, iterations=its)
